//! Volume files, manifests, patient-grouped splits, resampling and the
//! synthetic phantom generator.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::interp::Trilinear;
use crate::tensor::Tensor;

pub const OCTV_MAGIC: &[u8; 4] = b"OCTV";
pub const OCTV_VERSION: u16 = 1;
const OCTV_HEADER: usize = 4 + 2 + 2 + 16;

// ---------- OCTV ----------

/// Writes a `[C, D, H, W]` volume as OCTV.
pub fn write_volume(values: &Tensor<f32>, path: &Path) -> Result<()> {
    let dims = octv_dims(values).map_err(|d| Error::format(path, d))?;
    if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "refusing to write non-finite value at flat index {i} to {}",
            path.display()
        )));
    }
    let mut out = Vec::with_capacity(OCTV_HEADER + 4 * values.numel());
    out.extend_from_slice(OCTV_MAGIC);
    out.extend_from_slice(&OCTV_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn octv_dims(values: &Tensor<f32>) -> std::result::Result<[usize; 4], String> {
    match *values.shape() {
        [c, d, h, w] => Ok([c, d, h, w]),
        [d, h, w] => Ok([1, d, h, w]),
        ref s => Err(format!("OCTV stores [C, D, H, W] volumes, got shape {s:?}")),
    }
}

/// Reads an OCTV file as `[C, D, H, W]`.
pub fn read_volume(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < OCTV_HEADER {
        return Err(Error::format(path, format!("{} bytes is shorter than the OCTV header", bytes.len())));
    }
    if &bytes[..4] != OCTV_MAGIC {
        return Err(Error::format(path, "bad magic; expected OCTV"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let version = u16_at(4);
    if version != OCTV_VERSION {
        return Err(Error::format(path, format!("unsupported OCTV version {version}")));
    }
    if u16_at(6) != 0 {
        return Err(Error::format(path, "reserved header field is nonzero"));
    }
    let dims: Vec<usize> = (0..4)
        .map(|k| u32::from_le_bytes(bytes[8 + 4 * k..12 + 4 * k].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = bytes.len() - OCTV_HEADER;
    if dims.contains(&0) || payload != 4 * n {
        return Err(Error::format(
            path,
            format!("header dims {dims:?} need {} payload bytes but the file has {payload}", 4 * n),
        ));
    }
    let data: Vec<f32> = bytes[OCTV_HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(path, "payload contains non-finite values"));
    }
    Tensor::new(&dims, data)
}

// ---------- records and manifests ----------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
    Unknown,
}

impl fmt::Display for Eye {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Eye::Left => "left",
            Eye::Right => "right",
            Eye::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    /// `[1, D, H, W]`.
    pub values: Tensor<f32>,
    /// 1 = glaucomatous.
    pub label: u8,
    pub patient_id: String,
    pub eye: Eye,
    pub path: Option<PathBuf>,
}

impl VolumeRecord {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[1], s[2], s[3]]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    pub patient_id: String,
    pub eye: Eye,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Per-entry split, filled by [`split_dataset`].
    pub splits: Vec<Split>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest {
            entries,
            splits: Vec::new(),
        }
    }

    /// Reads `path,label,patient_id,eye`; relative paths resolve against
    /// the manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["path", "label", "patient_id", "eye"] {
            return Err(Error::format(
                path,
                format!("manifest header must be `path,label,patient_id,eye`, got `{}`", header.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for row in r.deserialize() {
            let mut e: ManifestEntry = row.map_err(|e| Error::format(path, e.to_string()))?;
            if e.label > 1 {
                return Err(Error::format(path, format!("label {} is not 0 or 1", e.label)));
            }
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
            entries.push(e);
        }
        Ok(Manifest::new(entries))
    }

    /// Writes the manifest with paths relative to `path`'s directory when possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::format(path, format!("{other:?}")),
        })?;
        for e in &self.entries {
            let rel = e.path.strip_prefix(base).unwrap_or(&e.path);
            w.serialize(ManifestEntry {
                path: rel.to_path_buf(),
                ..e.clone()
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// In-memory manifest for records without files (paths may be empty).
    pub fn from_records(records: &[VolumeRecord]) -> Self {
        Manifest::new(
            records
                .iter()
                .map(|r| ManifestEntry {
                    path: r.path.clone().unwrap_or_default(),
                    label: r.label,
                    patient_id: r.patient_id.clone(),
                    eye: r.eye,
                })
                .collect(),
        )
    }

    pub fn label_counts(&self) -> [usize; 2] {
        let pos = self.entries.iter().filter(|e| e.label == 1).count();
        [self.entries.len() - pos, pos]
    }

    /// Entries assigned to `split`.
    pub fn subset(&self, split: Split) -> Manifest {
        let entries = self
            .entries
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(e, _)| e.clone())
            .collect();
        Manifest::new(entries)
    }

    pub fn load(&self) -> Result<Vec<VolumeRecord>> {
        self.entries
            .iter()
            .map(|e| {
                let v = read_volume(&e.path)?;
                if v.shape()[0] != 1 {
                    return Err(Error::format(&e.path, format!("expected one channel, got {:?}", v.shape())));
                }
                Ok(VolumeRecord {
                    values: v,
                    label: e.label,
                    patient_id: e.patient_id.clone(),
                    eye: e.eye,
                    path: Some(e.path.clone()),
                })
            })
            .collect()
    }
}

/// Assigns whole patients to train/val/test in the given fractions.
pub fn split_dataset<R: Rng + ?Sized>(manifest: &Manifest, fractions: [f64; 3], rng: &mut R) -> Result<Manifest> {
    if (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!("split fractions {fractions:?} must be nonnegative and sum to 1")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        groups.entry(e.patient_id.as_str()).or_default().push(i);
    }
    if groups.len() < 3 {
        return Err(Error::Data(format!(
            "need at least 3 patients to split, found {}",
            groups.len()
        )));
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.shuffle(rng);

    let n = manifest.entries.len() as f64;
    let targets = [(fractions[0] * n).round() as usize, (fractions[1] * n).round() as usize];
    let mut splits = vec![Split::Test; manifest.entries.len()];
    let mut counts = [0usize; 3];
    let mut assigned: Vec<Split> = Vec::with_capacity(order.len());
    for g in &order {
        let s = if counts[0] < targets[0] {
            Split::Train
        } else if counts[1] < targets[1] {
            Split::Val
        } else {
            Split::Test
        };
        counts[s as usize] += g.len();
        assigned.push(s);
    }
    // every nonzero fraction gets at least one patient
    for want in [Split::Val, Split::Test] {
        if fractions[want as usize] > 0.0 && !assigned.contains(&want) {
            if let Some(k) = assigned.iter().rposition(|&s| s == Split::Train) {
                assigned[k] = want;
            }
        }
    }
    for (g, s) in order.iter().zip(&assigned) {
        for &i in g {
            splits[i] = *s;
        }
    }
    Ok(Manifest {
        entries: manifest.entries.clone(),
        splits,
    })
}

/// Splits `items` into `[train, val, test]` following `splits`.
pub fn partition<T: Clone>(items: &[T], splits: &[Split]) -> [Vec<T>; 3] {
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (item, s) in items.iter().zip(splits) {
        out[*s as usize].push(item.clone());
    }
    out
}

// ---------- resampling ----------

/// Align-corners trilinear resampling of `[C, D, H, W]` to spatial `target`.
pub fn resample(values: &Tensor<f32>, target: [usize; 3]) -> Result<Tensor<f32>> {
    let s = values.shape();
    if s.len() != 4 || target.contains(&0) {
        return Err(Error::shape("resample", format!("{s:?} to {target:?}")));
    }
    if [s[1], s[2], s[3]] == target {
        return Ok(values.clone());
    }
    let t = Trilinear::<f32>::new([s[1], s[2], s[3]], target);
    Tensor::new(&[s[0], target[0], target[1], target[2]], t.forward(values.data(), s[0]))
}

pub fn resize_affine(record: &VolumeRecord, target: [usize; 3]) -> Result<VolumeRecord> {
    Ok(VolumeRecord {
        values: resample(&record.values, target)?,
        ..record.clone()
    })
}

/// Crops `[C, D, H, W]` to `[C, size]` starting at `origin`.
pub fn crop(values: &Tensor<f32>, origin: [usize; 3], size: [usize; 3]) -> Result<Tensor<f32>> {
    let s = values.shape();
    if s.len() != 4 || (0..3).any(|a| origin[a] + size[a] > s[a + 1] || size[a] == 0) {
        return Err(Error::shape("crop", format!("{size:?} at {origin:?} from {s:?}")));
    }
    Ok(Tensor::from_fn(&[s[0], size[0], size[1], size[2]], |i| {
        values.get(&[i[0], i[1] + origin[0], i[2] + origin[1], i[3] + origin[2]])
    }))
}

// ---------- phantoms ----------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffectedSide {
    Superior,
    Inferior,
    Random,
}

/// Synthetic volumes with one bright band per hemiretina (depth half);
/// positives have the band thinned in one hemiretina.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub n_volumes: usize,
    /// Fraction of glaucomatous volumes.
    pub positive_fraction: f64,
    /// Band centre, in depth rows from the start of each hemiretina.
    pub band_center: usize,
    pub band_thickness: usize,
    /// Fraction of the band removed in the affected hemiretina.
    pub thinning: f64,
    pub affected: AffectedSide,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// 200 volumes at 32x48x28, seed 0.
impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig::new([32, 48, 28], 200, 0)
    }
}

pub const BACKGROUND: f32 = 0.2;
pub const BAND: f32 = 0.8;

impl PhantomConfig {
    pub fn new(dims: [usize; 3], n_volumes: usize, seed: u64) -> Self {
        let half = dims[0] / 2;
        PhantomConfig {
            dims,
            n_volumes,
            positive_fraction: 0.5,
            band_center: half / 2,
            band_thickness: (half / 4).max(2),
            thinning: 0.5,
            affected: AffectedSide::Random,
            noise_sigma: 0.15,
            seed,
        }
    }

    /// Rows removed from the affected band.
    pub fn removed_rows(&self) -> usize {
        (self.thinning * self.band_thickness as f64).round() as usize
    }

    /// Depth rows `[start, end)` of the band within a hemiretina.
    pub fn band_rows(&self) -> (usize, usize) {
        let start = self.band_center.saturating_sub(self.band_thickness / 2);
        (start, start + self.band_thickness)
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.dims[0] / 2;
        let (start, end) = self.band_rows();
        let bad = |m: String| Err(Error::Config(m));
        if self.dims.contains(&0) || !self.dims[0].is_multiple_of(2) {
            return bad(format!("phantom dims {:?} need a positive even depth", self.dims));
        }
        if self.band_thickness < 2 {
            return bad(format!("band thickness {} must be at least 2", self.band_thickness));
        }
        if end > half {
            return bad(format!("band rows {start}..{end} exceed the hemiretina depth {half}"));
        }
        if !(0.0..1.0).contains(&self.thinning) {
            return bad(format!("thinning {} outside [0, 1)", self.thinning));
        }
        if self.thinning > 0.0 && self.removed_rows() < 1 {
            return bad(format!(
                "thinning {} of a {}-row band removes no voxels",
                self.thinning, self.band_thickness
            ));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) || self.noise_sigma < 0.0 || self.n_volumes == 0 {
            return bad("positive fraction, noise and count must be in range".into());
        }
        Ok(())
    }

    pub fn positives(&self) -> usize {
        (self.positive_fraction * self.n_volumes as f64).round() as usize
    }
}

/// Generates labelled phantoms; each volume is its own patient.
pub fn phantom_generate(cfg: &PhantomConfig) -> Result<Vec<VolumeRecord>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut labels: Vec<u8> = (0..cfg.n_volumes).map(|i| (i < cfg.positives()) as u8).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(BACKGROUND as f64, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let [d, h, w] = cfg.dims;
    let half = d / 2;
    let (start, end) = cfg.band_rows();
    let removed = cfg.removed_rows();
    let mut out = Vec::with_capacity(cfg.n_volumes);
    for (i, &label) in labels.iter().enumerate() {
        let superior_hit = match cfg.affected {
            AffectedSide::Superior => true,
            AffectedSide::Inferior => false,
            AffectedSide::Random => rng.random::<bool>(),
        };
        let mut vals = Vec::with_capacity(d * h * w);
        for z in 0..d {
            let (row, in_superior) = (z % half, z < half);
            let affected = label == 1 && in_superior == superior_hit;
            let band_end = if affected { end - removed } else { end };
            let in_band = row >= start && row < band_end;
            for _ in 0..h * w {
                // band voxels share the background noise around a brighter mean
                let v = noise.sample(&mut rng) + if in_band { (BAND - BACKGROUND) as f64 } else { 0.0 };
                vals.push(v.clamp(0.0, 1.0) as f32);
            }
        }
        out.push(VolumeRecord {
            values: Tensor::new(&[1, d, h, w], vals)?,
            label,
            patient_id: format!("phantom-{i:05}"),
            eye: if i % 2 == 0 { Eye::Right } else { Eye::Left },
            path: None,
        });
    }
    Ok(out)
}

/// Writes phantoms as OCTV files plus `manifest.csv` into `dir`.
pub fn write_dataset(records: &[VolumeRecord], dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let path = dir.join(format!("{}.octv", r.patient_id));
        write_volume(&r.values, &path)?;
        entries.push(ManifestEntry {
            path,
            label: r.label,
            patient_id: r.patient_id.clone(),
            eye: r.eye,
        });
    }
    let m = Manifest::new(entries);
    m.write(&dir.join("manifest.csv"))?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_rows_are_centred() {
        let c = PhantomConfig::new([32, 48, 28], 10, 0);
        assert_eq!((c.band_center, c.band_thickness), (8, 4));
        assert_eq!(c.band_rows(), (6, 10));
        assert_eq!(c.removed_rows(), 2);
    }

    #[test]
    fn odd_depth_is_rejected() {
        let c = PhantomConfig::new([31, 8, 8], 4, 0);
        assert!(c.validate().is_err());
    }
}
