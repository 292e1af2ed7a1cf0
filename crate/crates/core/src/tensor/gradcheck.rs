//! Central-difference gradient verification in 64-bit arithmetic.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU, max-pool or
    /// normalization decision; the function is not smooth there.
    pub skipped_kinks: usize,
}

/// Checks `f` at a single input. See [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    Ok(grad_check_many(f, std::slice::from_ref(x), &opts)?.max_rel_error)
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences for every input tensor.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let base_sig = g.kink_signature();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    drop(g);

    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g.value(loss).item(), g.kink_signature()))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for i in coords {
            let orig = t.data()[i];
            work[ti].data_mut()[i] = orig + opts.step;
            let (fp, sp) = eval(&work)?;
            work[ti].data_mut()[i] = orig - opts.step;
            let (fm, sm) = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic[ti].data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        // dyadic inputs and a power-of-two step keep every sum exact
        let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 4.0, 0.125, -0.25]).unwrap();
        let err = grad_check(|g, v| Ok(g.sum(v[0])), &x, 2f64.powi(-17)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares_is_tight() {
        let x = Tensor::from_f64(&[4], &[0.5, -1.5, 2.25, 3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
