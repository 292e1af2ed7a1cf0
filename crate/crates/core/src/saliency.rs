//! CARE and 3D Grad-CAM heatmaps.
//!
//! The in-graph builders ([`care_map`], [`cam_map`]) are what the
//! consistency loss differentiates through. The tensor-level entry points
//! ([`care`], [`gradcam3d`], [`explain`]) produce [`Heatmap`]s for export.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resample, write_volume};
use crate::net::{ForwardTrace, ModelState};
use crate::{Error, Graph, Mode, Real, Result, Tensor, Var};

pub const SALIENCY_EPS: f64 = 1e-8;
pub const OVERLAY_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SaliencySource {
    #[serde(rename = "CARE")]
    Care,
    #[serde(rename = "GradCAM")]
    GradCam,
}

impl SaliencySource {
    pub fn name(self) -> &'static str {
        match self {
            SaliencySource::Care => "care",
            SaliencySource::GradCam => "gradcam",
        }
    }
}

/// One volume's heatmap with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[D, H, W]`.
    pub values: Tensor<f64>,
    pub source: SaliencySource,
    pub source_layer: String,
    /// Set when the map was upsampled to the input volume's grid.
    pub target_dims: Option<[usize; 3]>,
}

impl Heatmap {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }
}

/// Channel mean, ReLU, per-item max normalization: `[B,C,d,h,w] -> [B,d,h,w]`.
pub fn care_map<T: Real>(g: &mut Graph<T>, ca0: Var, eps: T) -> Result<Var> {
    if g.shape(ca0).len() != 5 {
        return Err(Error::shape("care", format!("expected [B, C, D, H, W], got {:?}", g.shape(ca0))));
    }
    let mean = g.mean_axis(ca0, 1)?;
    let r = g.relu(mean);
    g.max_normalize(r, eps)
}

/// Grad-CAM channel weights `[B, C]`: the spatial mean of the gradient of
/// each item's class logit with respect to `tap`. Runs a partial backward.
pub fn gradcam_weights<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    tap: Var,
    tap_name: &str,
    classes: &[usize],
) -> Result<Tensor<T>> {
    let s = g.shape(tap).to_vec();
    if s.len() != 5 {
        return Err(Error::shape("gradcam", format!("tap {tap_name} has shape {s:?}")));
    }
    if !g.requires_grad(tap) {
        return Err(Error::MissingTapGradient { tap: tap_name.into() });
    }
    let score = g.pick(logits, classes)?;
    let total = g.sum(score);
    g.backward_until(total, tap)?;
    let (b, c) = (s[0], s[1]);
    let vox = s[2] * s[3] * s[4];
    let z = T::from_usize(vox).unwrap();
    let mut w = vec![T::zero(); b * c];
    // no gradient at all means the score does not depend on the tap: zero weights
    if let Some(grad) = g.grad(tap) {
        for (k, chunk) in grad.data().chunks(vox).enumerate() {
            w[k] = chunk.iter().fold(T::zero(), |a, &v| a + v) / z;
        }
    }
    Tensor::new(&[b, c], w)
}

/// `max_normalize(relu(sum_k a_k A^k))` with the weights held constant.
pub fn cam_map<T: Real>(g: &mut Graph<T>, features: Var, weights: Tensor<T>, eps: T) -> Result<Var> {
    let w = g.constant(weights);
    let s = g.weighted_channel_sum(features, w)?;
    let r = g.relu(s);
    g.max_normalize(r, eps)
}

fn split_items<T: Real>(
    maps: &Tensor<T>,
    source: SaliencySource,
    layer: &str,
    target: Option<[usize; 3]>,
) -> Result<Vec<Heatmap>> {
    let s = maps.shape();
    let dims = [s[1], s[2], s[3]];
    (0..s[0])
        .map(|b| {
            let item = maps.index_first(b).cast::<f64>();
            let values = match target {
                Some(t) if t != dims => upsample_map(&item, t)?,
                _ => item,
            };
            Ok(Heatmap {
                values,
                source,
                source_layer: layer.to_string(),
                target_dims: target,
            })
        })
        .collect()
}

fn upsample_map(map: &Tensor<f64>, target: [usize; 3]) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let x = g.constant(map.clone());
    let y = g.upsample(x, target)?;
    Ok(g.value(y).clone())
}

/// CARE heatmaps for each batch item of an attention block output.
pub fn care<T: Real>(ca0: &Tensor<T>, layer: &str, target: Option<[usize; 3]>, eps: f64) -> Result<Vec<Heatmap>> {
    let mut g = Graph::new();
    let x = g.constant(ca0.clone());
    let h = care_map(&mut g, x, T::lit(eps))?;
    split_items(g.value(h), SaliencySource::Care, layer, target)
}

/// Grad-CAM heatmaps from a forward trace whose taps retain gradients.
/// `classes[b]` picks the logit explained for item `b`.
pub fn gradcam3d<T: Real>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    classes: &[usize],
    layer: &str,
    target: Option<[usize; 3]>,
    eps: f64,
) -> Result<Vec<Heatmap>> {
    let tap = trace.tap(layer)?;
    let w = gradcam_weights(g, trace.logits, tap, layer, classes)?;
    let h = cam_map(g, tap, w, T::lit(eps))?;
    let maps = g.value(h).clone();
    split_items(&maps, SaliencySource::GradCam, layer, target)
}

/// Which logit Grad-CAM explains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetClass {
    Predicted,
    Glaucoma,
    Healthy,
}

impl TargetClass {
    pub fn resolve<T: Real>(self, logits: &Tensor<T>) -> Vec<usize> {
        logits
            .data()
            .chunks(2)
            .map(|row| match self {
                TargetClass::Predicted => usize::from(row[1] > row[0]),
                TargetClass::Glaucoma => 1,
                TargetClass::Healthy => 0,
            })
            .collect()
    }
}

/// Eval-mode forward on `[B, 1, D, H, W]` followed by the requested maps,
/// upsampled to the input grid. `layer` defaults to the deepest attention
/// tap for CARE and the deepest conv tap for Grad-CAM.
pub fn explain<T: Real>(
    model: &mut ModelState<T>,
    batch: &Tensor<T>,
    source: SaliencySource,
    layer: Option<&str>,
    class: TargetClass,
) -> Result<Vec<Heatmap>> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true);
    let x = g.constant(batch.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let trace = model.forward(&mut g, &vars, x, Mode::Eval, &mut rng)?;
    let s = batch.shape();
    let target = Some([s[2], s[3], s[4]]);
    match source {
        SaliencySource::Care => {
            let name = match layer {
                Some(l) => l.to_string(),
                None => trace.last_attention_tap().ok_or_else(|| {
                    Error::Architecture(format!("{} has no attention block to visualize", model.spec.variant))
                })?,
            };
            if !name.starts_with("attn") {
                return Err(Error::UnknownTap {
                    name,
                    available: trace.taps.keys().filter(|k| k.starts_with("attn")).cloned().collect(),
                });
            }
            let tap = trace.tap(&name)?;
            care(g.value(tap), &name, target, SALIENCY_EPS)
        }
        SaliencySource::GradCam => {
            let name = match layer {
                Some(l) => l.to_string(),
                None => trace.last_conv_tap().expect("validated model has conv layers"),
            };
            let classes = class.resolve(g.value(trace.logits));
            gradcam3d(&mut g, &trace, &classes, &name, target, SALIENCY_EPS)
        }
    }
}

// ---------- export ----------

/// One round of 3x3x3 min (erode) or max (dilate) filtering, edges clamped.
pub fn morphology(values: &Tensor<f64>, dilate: bool) -> Tensor<f64> {
    let s = values.shape().to_vec();
    let (d, h, w) = (s[0], s[1], s[2]);
    let src = values.data();
    let range = |i: usize, n: usize| i.saturating_sub(1)..(i + 2).min(n);
    Tensor::from_fn(&s, |ix| {
        let mut acc = if dilate { f64::NEG_INFINITY } else { f64::INFINITY };
        for z in range(ix[0], d) {
            for y in range(ix[1], h) {
                for x in range(ix[2], w) {
                    let v = src[(z * h + y) * w + x];
                    acc = if dilate { acc.max(v) } else { acc.min(v) };
                }
            }
        }
        acc
    })
}

#[derive(Debug, Clone, Default)]
pub struct ExportOptions {
    /// Axial (depth index) and coronal (height index) slices; mid-slices when unset.
    pub axial: Option<usize>,
    pub coronal: Option<usize>,
    /// Erode CARE / dilate Grad-CAM in the images only.
    pub morphology: bool,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// `(rows, cols, values)` of the axial slice (fixed depth index).
fn axial_slice(v: &Tensor<f64>, z: usize) -> (usize, usize, Vec<f64>) {
    let s = v.shape();
    let plane = s[1] * s[2];
    (s[1], s[2], v.data()[z * plane..(z + 1) * plane].to_vec())
}

/// `(rows, cols, values)` of the coronal slice (fixed height index).
fn coronal_slice(v: &Tensor<f64>, y: usize) -> (usize, usize, Vec<f64>) {
    let s = v.shape();
    let mut out = Vec::with_capacity(s[0] * s[2]);
    for z in 0..s[0] {
        let row = (z * s[1] + y) * s[2];
        out.extend_from_slice(&v.data()[row..row + s[2]]);
    }
    (s[0], s[2], out)
}

fn min_max_scale(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter().map(|&x| if span > 0.0 { (x - lo) / span } else { 0.0 }).collect()
}

fn stem_path(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `<stem>.octv`, `<stem>.axial.pgm`, `<stem>.coronal.pgm` and, with a
/// source volume `[D, H, W]`, `<stem>.overlay.axial.pgm` /
/// `<stem>.overlay.coronal.pgm`. Returns the written paths.
pub fn export_heatmap(
    h: &Heatmap,
    volume: Option<&Tensor<f32>>,
    stem: &Path,
    opts: &ExportOptions,
) -> Result<Vec<PathBuf>> {
    let octv = stem_path(stem, ".octv");
    write_volume(&h.values.cast::<f32>(), &octv)?;
    let mut written = vec![octv];

    let shown = if opts.morphology {
        morphology(&h.values, h.source == SaliencySource::GradCam)
    } else {
        h.values.clone()
    };
    let [d, hh, _] = h.dims();
    let z = opts.axial.unwrap_or(d / 2);
    let y = opts.coronal.unwrap_or(hh / 2);
    if z >= d || y >= hh {
        return Err(Error::Config(format!("slice index out of range for heatmap {:?}", h.dims())));
    }
    let slices = [("axial", axial_slice(&shown, z)), ("coronal", coronal_slice(&shown, y))];
    for (name, (rows, cols, vals)) in &slices {
        let p = stem_path(stem, &format!(".{name}.pgm"));
        write_pgm(&p, *rows, *cols, &vals.iter().map(|&v| quantize(v)).collect::<Vec<_>>())?;
        written.push(p);
    }

    if let Some(vol) = volume {
        let vol = match vol.shape() {
            [1, _, _, _] => vol.clone().reshape(&vol.shape()[1..])?,
            _ => vol.clone(),
        };
        let dims = match *vol.shape() {
            [a, b, c] => [a, b, c],
            ref s => return Err(Error::shape("overlay", format!("volume must be [D, H, W], got {s:?}"))),
        };
        let heat = if dims == h.dims() {
            shown
        } else {
            let r = resample(&shown.cast::<f32>().reshape(&[1, d, hh, h.dims()[2]])?, dims)?;
            r.cast::<f64>().reshape(&dims)?
        };
        let base = vol.cast::<f64>();
        let (z, y) = (
            opts.axial.unwrap_or(dims[0] / 2).min(dims[0] - 1),
            opts.coronal.unwrap_or(dims[1] / 2).min(dims[1] - 1),
        );
        let pairs = [
            ("axial", axial_slice(&base, z), axial_slice(&heat, z)),
            ("coronal", coronal_slice(&base, y), coronal_slice(&heat, y)),
        ];
        for (name, (rows, cols, b), (_, _, hv)) in &pairs {
            let scaled = min_max_scale(b);
            // the heat paints toward white with opacity 0.5 * h
            let px: Vec<u8> = scaled
                .iter()
                .zip(hv)
                .map(|(&s, &v)| quantize((1.0 - OVERLAY_ALPHA * v) * s + OVERLAY_ALPHA * v))
                .collect();
            let p = stem_path(stem, &format!(".overlay.{name}.pgm"));
            write_pgm(&p, *rows, *cols, &px)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erosion_and_dilation_are_dual() {
        let v = Tensor::from_fn(&[3, 3, 3], |i| if i == [1, 1, 1] { 1.0 } else { 0.0 });
        assert_eq!(morphology(&v, false).max(), 0.0);
        assert_eq!(morphology(&v, true).min(), 1.0);
    }

    #[test]
    fn quantize_rounds_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.3), 255);
    }
}
