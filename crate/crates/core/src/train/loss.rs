use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Graph, Real, Result, Tensor, Var};

/// Unit-weight binary cross-entropy on glaucoma probabilities `[B]`.
pub fn bce_loss<T: Real>(g: &mut Graph<T>, p: Var, labels: &[u8]) -> Result<Var> {
    let y: Vec<T> = labels.iter().map(|&l| T::lit(f64::from(l))).collect();
    g.bce(p, &y, &vec![T::one(); labels.len()])
}

/// `[w0, w1]` with `w0 = n1 / (n0 + n1)`: the rarer class weighs more.
pub fn class_weights(counts: [usize; 2]) -> Result<[f64; 2]> {
    if counts.contains(&0) {
        return Err(Error::Data(format!(
            "class-weighted loss needs both classes, got counts {counts:?}"
        )));
    }
    let w0 = counts[1] as f64 / (counts[0] + counts[1]) as f64;
    Ok([w0, 1.0 - w0])
}

pub fn weighted_bce_loss<T: Real>(g: &mut Graph<T>, p: Var, labels: &[u8], counts: [usize; 2]) -> Result<Var> {
    let w = class_weights(counts)?;
    let y: Vec<T> = labels.iter().map(|&l| T::lit(f64::from(l))).collect();
    let wt: Vec<T> = labels.iter().map(|&l| T::lit(w[usize::from(l)])).collect();
    g.bce(p, &y, &wt)
}

/// Which comparison drives the heatmap consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnsupLoss {
    #[default]
    Mse,
    Ssim,
    Pearson,
    GaussianPearson,
}

impl UnsupLoss {
    pub const ALL: [UnsupLoss; 4] = [
        UnsupLoss::Mse,
        UnsupLoss::Ssim,
        UnsupLoss::Pearson,
        UnsupLoss::GaussianPearson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UnsupLoss::Mse => "mse",
            UnsupLoss::Ssim => "ssim",
            UnsupLoss::Pearson => "pearson",
            UnsupLoss::GaussianPearson => "gaussian_pearson",
        }
    }
}

impl fmt::Display for UnsupLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UnsupLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UnsupLoss::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown unsupervised loss `{s}` (mse, ssim, pearson, gaussian_pearson)")))
    }
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const BLUR_SIGMA: f64 = 1.0;
const BLUR_RADIUS: usize = 2;

/// Heatmap disagreement between `care` and `cam`, both `[B, D, H, W]`.
pub fn consistency_loss<T: Real>(g: &mut Graph<T>, care: Var, cam: Var, kind: UnsupLoss) -> Result<Var> {
    if g.shape(care) != g.shape(cam) || g.shape(care).len() != 4 {
        return Err(Error::shape(
            "consistency_loss",
            format!("heatmaps {:?} and {:?}", g.shape(care), g.shape(cam)),
        ));
    }
    match kind {
        UnsupLoss::Mse => {
            let d = g.sub(care, cam)?;
            let sq = g.square(d);
            Ok(g.mean(sq))
        }
        UnsupLoss::Ssim => ssim_loss(g, care, cam),
        UnsupLoss::Pearson => pearson_loss(g, care, cam),
        UnsupLoss::GaussianPearson => {
            let a = gaussian_blur(g, care)?;
            let b = gaussian_blur(g, cam)?;
            pearson_loss(g, a, b)
        }
    }
}

fn with_channel<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let mut s = g.shape(x).to_vec();
    s.insert(1, 1);
    g.reshape(x, &s)
}

fn filter<T: Real>(g: &mut Graph<T>, x: Var, kernel: &Tensor<T>, pad: usize) -> Result<Var> {
    let w = g.constant(kernel.clone());
    let b = g.constant(Tensor::zeros(&[1]));
    g.conv3d(x, w, b, 1, pad)
}

/// `1 - mean SSIM` with a uniform cubic window, shrunk (and kept odd) to fit
/// small heatmaps.
fn ssim_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let mut k = SSIM_WINDOW.min(s[1]).min(s[2]).min(s[3]);
    if k.is_multiple_of(2) {
        k -= 1;
    }
    let kernel = Tensor::full(&[1, 1, k, k, k], T::one() / T::from_usize(k * k * k).unwrap());
    let x = with_channel(g, a)?;
    let y = with_channel(g, b)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let xy = g.mul(x, y)?;
    let mx = filter(g, x, &kernel, 0)?;
    let my = filter(g, y, &kernel, 0)?;
    let exx = filter(g, xx, &kernel, 0)?;
    let eyy = filter(g, yy, &kernel, 0)?;
    let exy = filter(g, xy, &kernel, 0)?;
    let mx2 = g.square(mx);
    let my2 = g.square(my);
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let t1 = g.scale(mxy, T::lit(2.0));
    let t1 = g.add_scalar(t1, T::lit(SSIM_C1));
    let t2 = g.scale(cxy, T::lit(2.0));
    let t2 = g.add_scalar(t2, T::lit(SSIM_C2));
    let num = g.mul(t1, t2)?;
    let b1 = g.add(mx2, my2)?;
    let b1 = g.add_scalar(b1, T::lit(SSIM_C1));
    let b2 = g.add(vx, vy)?;
    let b2 = g.add_scalar(b2, T::lit(SSIM_C2));
    let den = g.mul(b1, b2)?;
    let ssim = g.div(num, den)?;
    let m = g.mean(ssim);
    let neg = g.scale(m, -T::one());
    Ok(g.add_scalar(neg, T::one()))
}

/// Negative mean per-item Pearson correlation.
fn pearson_loss<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let s = g.shape(a).to_vec();
    let (batch, n) = (s[0], s[1..].iter().product::<usize>());
    let centred = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let flat = g.reshape(v, &[batch, n])?;
        let m = g.mean_axis(flat, 1)?;
        let m = g.reshape(m, &[batch, 1])?;
        let m = g.broadcast_to(m, &[batch, n])?;
        g.sub(flat, m)
    };
    let x = centred(g, a)?;
    let y = centred(g, b)?;
    let xy = g.mul(x, y)?;
    let cov = g.sum_axis(xy, 1)?;
    let xx = g.square(x);
    let yy = g.square(y);
    let vx = g.sum_axis(xx, 1)?;
    let vy = g.sum_axis(yy, 1)?;
    let v = g.mul(vx, vy)?;
    // the offset keeps the square root differentiable for flat maps
    let v = g.add_scalar(v, T::lit(1e-12));
    let sd = g.sqrt(v);
    let r = g.div(cov, sd)?;
    let m = g.mean(r);
    Ok(g.scale(m, -T::one()))
}

fn gaussian_blur<T: Real>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let k = 2 * BLUR_RADIUS + 1;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - BLUR_RADIUS as f64;
            (-d * d / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum::<f64>().powi(3);
    let kernel = Tensor::from_fn(&[1, 1, k, k, k], |i| T::lit(taps[i[2]] * taps[i[3]] * taps[i[4]] / total));
    let c = with_channel(g, x)?;
    let y = filter(g, c, &kernel, BLUR_RADIUS)?;
    let s = g.shape(x).to_vec();
    g.reshape(y, &s)
}

/// Scalar values of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub supervised: f64,
    pub unsupervised: f64,
    pub combined: f64,
}

impl LossTerms {
    pub fn new(supervised: f64, unsupervised: f64, lambda: f64) -> Self {
        LossTerms {
            supervised,
            unsupervised,
            combined: (1.0 - lambda) * supervised + lambda * unsupervised,
        }
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `(1 - lambda) * supervised + lambda * unsupervised` in the graph.
pub fn multitask_loss<T: Real>(g: &mut Graph<T>, supervised: Var, unsupervised: Var, lambda: f64) -> Result<(Var, LossTerms)> {
    check_lambda(lambda)?;
    let a = g.scale(supervised, T::lit(1.0 - lambda));
    let b = g.scale(unsupervised, T::lit(lambda));
    let combined = g.add(a, b)?;
    let value = |v: Var| g.value(v).item().to_f64().unwrap();
    let terms = LossTerms {
        supervised: value(supervised),
        unsupervised: value(unsupervised),
        combined: value(combined),
    };
    Ok((combined, terms))
}
