use crate::net::ModelState;
use crate::{Error, Real, Result, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
/// Decay rate of the momentum schedule.
pub const MOMENTUM_DECAY: f64 = 4e-3;

/// Scheduled momentum coefficient for a 1-based step.
pub fn momentum_at(step: u64) -> f64 {
    BETA1 * (1.0 - 0.5 * 0.96f64.powf(step as f64 * MOMENTUM_DECAY))
}

/// One Nesterov-accelerated Adam update of every parameter, in place.
/// Gradients are checked for finiteness before anything is modified.
pub fn nadam_step<T: Real>(model: &mut ModelState<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
    if grads.len() != model.params.len() {
        return Err(Error::Architecture(format!(
            "{} gradients for {} parameters",
            grads.len(),
            model.params.len()
        )));
    }
    for ((name, p), gr) in model.params.iter().zip(grads) {
        if gr.shape() != p.shape() {
            return Err(Error::shape("nadam_step", format!("gradient of {name} is {:?}", gr.shape())));
        }
        if !gr.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let opt = &mut model.optimizer;
    opt.step += 1;
    let t = opt.step;
    let mu = momentum_at(t);
    let mu_next = momentum_at(t + 1);
    opt.mu_product *= mu;
    let mu_product_next = opt.mu_product * mu_next;
    let bias2 = 1.0 - BETA2.powf(t as f64);

    let grad_coef = T::lit(-lr * (1.0 - mu) / (1.0 - opt.mu_product));
    let mom_coef = T::lit(-lr * mu_next / (1.0 - mu_product_next));
    let (b1, b2) = (T::lit(BETA1), T::lit(BETA2));
    let (one, eps, bias2) = (T::one(), T::lit(EPSILON), T::lit(bias2));

    for (i, (_, p)) in model.params.iter_mut().enumerate() {
        let m = opt.first[i].data_mut();
        let v = opt.second[i].data_mut();
        for (j, (w, &gv)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
            m[j] = b1 * m[j] + (one - b1) * gv;
            v[j] = b2 * v[j] + (one - b2) * gv * gv;
            let denom = (v[j] / bias2).sqrt() + eps;
            *w += grad_coef * gv / denom + mom_coef * m[j] / denom;
        }
    }
    Ok(())
}
