use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{crop, resample, Manifest, VolumeRecord};
use crate::{Error, Result, Tensor};

pub const MAX_SCALE: f64 = 1.25;
pub const GAIN_RANGE: (f64, f64) = (0.9, 1.1);
/// Offset bound as a fraction of the volume's value range.
pub const OFFSET_FRACTION: f64 = 0.05;

/// Each enabled transform fires on an independent fair coin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_width: bool,
    pub flip_depth: bool,
    pub scale: bool,
    pub intensity: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_width: true,
            flip_depth: true,
            scale: true,
            intensity: true,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            flip_width: false,
            flip_depth: false,
            scale: false,
            intensity: false,
        }
    }
}

/// Reverses spatial `axis` (0 = depth, 2 = width) of a `[C, D, H, W]` volume.
pub fn flip(values: &Tensor<f32>, axis: usize) -> Tensor<f32> {
    let s = values.shape().to_vec();
    let n = s[axis + 1];
    Tensor::from_fn(&s, |i| {
        let mut j = i.to_vec();
        j[axis + 1] = n - 1 - i[axis + 1];
        values.get(&j)
    })
}

/// Upsamples by `factor` and crops the centre back to the original extent.
pub fn zoom(values: &Tensor<f32>, factor: f64) -> Result<Tensor<f32>> {
    let s = values.shape();
    let dims = [s[1], s[2], s[3]];
    let big = dims.map(|d| ((d as f64 * factor).round() as usize).max(d));
    let up = resample(values, big)?;
    let origin = [0, 1, 2].map(|a| (big[a] - dims[a]) / 2);
    crop(&up, origin, dims)
}

/// Random flips, zoom and grey-level jitter; the label is untouched.
pub fn augment<R: Rng + ?Sized>(record: &VolumeRecord, rng: &mut R, cfg: &AugmentConfig) -> Result<VolumeRecord> {
    let mut v = record.values.clone();
    // coins are drawn unconditionally so toggles do not shift the stream
    let coins: [bool; 4] = [rng.random(), rng.random(), rng.random(), rng.random()];
    let factor = rng.random_range(1.0..=MAX_SCALE);
    let gain = rng.random_range(GAIN_RANGE.0..=GAIN_RANGE.1);
    let offset = rng.random_range(-OFFSET_FRACTION..=OFFSET_FRACTION);
    if cfg.flip_width && coins[0] {
        v = flip(&v, 2);
    }
    if cfg.flip_depth && coins[1] {
        v = flip(&v, 0);
    }
    if cfg.scale && coins[2] {
        v = zoom(&v, factor)?;
    }
    if cfg.intensity && coins[3] {
        let range = f64::from(v.max() - v.min());
        let (g, b) = (gain as f32, (offset * range) as f32);
        v = v.map(|x| g * x + b);
    }
    Ok(VolumeRecord {
        values: v,
        ..record.clone()
    })
}

/// Every minority index plus an equal-size uniform draw of the majority,
/// shuffled.
pub fn undersample<R: Rng + ?Sized>(labels: &[u8], rng: &mut R) -> Result<Vec<usize>> {
    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[usize::from(l.min(1))].push(i);
    }
    if by_class.iter().any(Vec::is_empty) {
        return Err(Error::Data(format!(
            "undersampling needs both classes, got {} negatives and {} positives",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let minority = usize::from(by_class[1].len() < by_class[0].len());
    let keep = by_class[minority].len();
    let majority = &mut by_class[1 - minority];
    majority.shuffle(rng);
    majority.truncate(keep);
    let mut out: Vec<usize> = by_class.concat();
    out.shuffle(rng);
    Ok(out)
}

pub fn undersample_split<R: Rng + ?Sized>(manifest: &Manifest, rng: &mut R) -> Result<Manifest> {
    let labels: Vec<u8> = manifest.entries.iter().map(|e| e.label).collect();
    let idx = undersample(&labels, rng)?;
    Ok(Manifest::new(idx.iter().map(|&i| manifest.entries[i].clone()).collect()))
}
