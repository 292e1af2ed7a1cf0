//! Complexity accounting, saliency/annotation alignment and rank statistics.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::net::{infer_shapes, ArchitectureSpec, LayerKind, LayerShape};
use crate::xattn::AttentionVariant;

/// FLOPs are counted as two per multiply-accumulate; batch norm, ReLU and
/// pooling are free.
pub const FLOP_CONVENTION: &str = "FLOP = 2 x MAC; BN/ReLU/pool = 0";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    /// Convolution weights and biases only.
    pub conv_params: u64,
    pub total_flops: u64,
    /// Spatial input dims the FLOPs refer to; `None` for a parameter-only count.
    pub dims: Option<[usize; 3]>,
    pub convention: &'static str,
}

impl ComplexityReport {
    fn from_layers(layers: Vec<LayerCost>, dims: Option<[usize; 3]>) -> Self {
        let conv_params = layers
            .iter()
            .filter(|l| l.layer.starts_with("conv"))
            .map(|l| l.params)
            .sum();
        ComplexityReport {
            total_params: layers.iter().map(|l| l.params).sum(),
            total_flops: layers.iter().map(|l| l.flops).sum(),
            conv_params,
            layers,
            dims,
            convention: FLOP_CONVENTION,
        }
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    /// `layer,params,flops` rows with a trailing total row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["layer", "params", "flops"])?;
        for l in &self.layers {
            w.write_record([l.layer.clone(), l.params.to_string(), l.flops.to_string()])?;
        }
        w.write_record(["total".to_string(), self.total_params.to_string(), self.total_flops.to_string()])?;
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>12} {:>18}", "layer", "params", "flops");
        for l in &self.layers {
            let _ = writeln!(s, "{:<10} {:>12} {:>18}", l.layer, l.params, l.flops);
        }
        let _ = writeln!(s, "{:<10} {:>12} {:>18}", "total", self.total_params, self.total_flops);
        let _ = writeln!(s, "conv params: {}", self.conv_params);
        if let Some(d) = self.dims {
            let _ = writeln!(s, "GFLOPs at 1x{}x{}x{}: {:.3}", d[0], d[1], d[2], self.gflops());
        }
        let _ = writeln!(s, "convention: {}", self.convention);
        s
    }
}

fn attention_params(c: u64, variant: AttentionVariant) -> u64 {
    let pointwise = c * c + c;
    3 * pointwise * variant.projection_sets() as u64 + pointwise
}

/// Symbolic parameter count; no model is instantiated.
pub fn count_params(spec: &ArchitectureSpec) -> Result<ComplexityReport> {
    spec.validate()?;
    let mut layers = Vec::new();
    let mut cin = 1u64;
    for i in 0..spec.filters.len() {
        let (cout, k) = (spec.filters[i] as u64, spec.kernels[i] as u64);
        let l = i + 1;
        layers.push(LayerCost {
            layer: format!("conv{l}"),
            params: k * k * k * cin * cout + cout,
            flops: 0,
        });
        layers.push(LayerCost {
            layer: format!("bn{l}"),
            params: 2 * cout,
            flops: 0,
        });
        if spec.placement.contains(&l) {
            let variant = spec.variant.attention().expect("validated");
            layers.push(LayerCost {
                layer: format!("attn{l}"),
                params: attention_params(cout, variant),
                flops: 0,
            });
        }
        cin = cout;
    }
    if !spec.filters.is_empty() {
        layers.push(LayerCost {
            layer: "dense".into(),
            params: cin * 2 + 2,
            flops: 0,
        });
    }
    Ok(ComplexityReport::from_layers(layers, None))
}

fn layer_flops(l: &LayerShape) -> u64 {
    let vox = |s: [usize; 4]| (s[1] * s[2] * s[3]) as u64;
    match l.kind {
        LayerKind::Conv { cin, cout, kernel, .. } => {
            let k = kernel as u64;
            2 * cin as u64 * k * k * k * cout as u64 * vox(l.output)
        }
        LayerKind::Attention { channels, variant } => {
            let (c, n) = (channels as u64, vox(l.input));
            let sets = variant.projection_sets() as u64;
            // each pairing projects every voxel with Q, K and V
            let projections = sets * 3 * 2 * c * c * n;
            // per direction: scores and weighted values, 2 C^2 per voxel each;
            // every voxel is a query region exactly once per pairing
            let attend = sets * 2 * 2 * c * c * n;
            let refine = 2 * c * c * n;
            projections + attend + refine
        }
        LayerKind::Dense { features, outputs } => 2 * (features * outputs) as u64,
    }
}

/// Parameter and FLOP counts for a single-item input of spatial `dims`.
pub fn count_flops(spec: &ArchitectureSpec, dims: [usize; 3]) -> Result<ComplexityReport> {
    let shapes = infer_shapes(spec, dims)?;
    let params = count_params(spec)?;
    let mut layers = Vec::new();
    for cost in params.layers {
        let flops = shapes
            .iter()
            .find(|s| s.name == cost.layer)
            .map(layer_flops)
            .unwrap_or(0);
        layers.push(LayerCost { flops, ..cost });
    }
    Ok(ComplexityReport::from_layers(layers, Some(dims)))
}

/// Published complexity of comparison architectures at 1x128x192x112.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceModel {
    pub name: &'static str,
    pub params_millions: f64,
    pub gflops: f64,
}

pub const REFERENCE_MODELS: [ReferenceModel; 6] = [
    ReferenceModel { name: "SEResNeXt50", params_millions: 28.36, gflops: 72.064 },
    ReferenceModel { name: "EPA", params_millions: 25.01, gflops: 108.801 },
    ReferenceModel { name: "M3T", params_millions: 27.05, gflops: 29.90 },
    ReferenceModel { name: "TimeSformer", params_millions: 63.15, gflops: 1357.11 },
    ReferenceModel { name: "ViT", params_millions: 88.18, gflops: 135.34 },
    ReferenceModel { name: "Med3D", params_millions: 63.30, gflops: 745.47 },
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AlignmentMetrics {
    /// Fraction of mask voxels above the threshold.
    pub mask_coverage: f64,
    /// Fraction of above-threshold voxels inside the mask.
    pub care_coverage: f64,
    /// Mean heatmap inside the mask over mean outside.
    pub enrichment: f64,
    pub threshold: f64,
}

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Compares a heatmap against a binary annotation of the same size.
pub fn alignment_metrics(care: &[f64], mask: &[bool], pct: f64) -> Result<AlignmentMetrics> {
    if care.len() != mask.len() || care.is_empty() {
        return Err(Error::Data(format!(
            "heatmap has {} voxels but mask has {}",
            care.len(),
            mask.len()
        )));
    }
    let inside = mask.iter().filter(|&&m| m).count();
    if inside == 0 {
        return Err(Error::Data("annotation mask is empty".into()));
    }
    if inside == mask.len() {
        return Err(Error::Data("annotation mask covers every voxel; enrichment is undefined".into()));
    }
    let tau = percentile(care, pct);
    let (mut hot, mut hot_in, mut sum_in, mut sum_out) = (0usize, 0usize, 0.0, 0.0);
    for (&c, &m) in care.iter().zip(mask) {
        let above = c > tau;
        hot += above as usize;
        if m {
            hot_in += above as usize;
            sum_in += c;
        } else {
            sum_out += c;
        }
    }
    let mean_in = sum_in / inside as f64;
    let mean_out = sum_out / (mask.len() - inside) as f64;
    Ok(AlignmentMetrics {
        mask_coverage: hot_in as f64 / inside as f64,
        care_coverage: if hot == 0 { 0.0 } else { hot_in as f64 / hot as f64 },
        enrichment: if mean_out == 0.0 {
            if mean_in == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            mean_in / mean_out
        },
        threshold: tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MannWhitney {
    /// `U` of the first sample: pairs where it ranks higher, ties counting half.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub exact: bool,
}

/// Largest combined sample size handled by full enumeration.
pub const EXACT_LIMIT: usize = 12;

/// Average ranks (1-based) of `values`.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn u_statistic(ranks_a: impl Iterator<Item = f64>, na: usize) -> f64 {
    ranks_a.sum::<f64>() - (na * (na + 1)) as f64 / 2.0
}

/// Two-sided permutation p-value over every split of the pooled ranks.
/// Enumerates `2^(na+nb)` subsets, so keep the pooled size small.
pub fn mann_whitney_exact(a: &[f64], b: &[f64]) -> f64 {
    let (na, n) = (a.len(), a.len() + b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    // doubled ranks are integers, so comparisons below are exact
    let ranks2: Vec<i64> = average_ranks(&pooled).iter().map(|r| (2.0 * r) as i64).collect();
    let centre2 = (na * (n + 1)) as i64; // 2 * expected rank sum
    let observed = (ranks2[..na].iter().sum::<i64>() - centre2).abs();
    let (mut extreme, mut total) = (0u64, 0u64);
    for set in 0u32..(1 << n) {
        if set.count_ones() as usize != na {
            continue;
        }
        let s: i64 = (0..n).filter(|i| set >> i & 1 == 1).map(|i| ranks2[i]).sum();
        total += 1;
        if (s - centre2).abs() >= observed {
            extreme += 1;
        }
    }
    extreme as f64 / total as f64
}

/// Normal approximation with tie and continuity corrections.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let u = u_statistic(ranks[..a.len()].iter().copied(), a.len());
    let mut sorted = pooled.clone();
    sorted.sort_by(|x, y| x.total_cmp(y));
    let mut ties = 0.0;
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        ties += t * t * t - t;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let dev = ((u - na * nb / 2.0).abs() - 0.5).max(0.0);
    let z = dev / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Rank-sum test with average ranks on ties; exact when the pooled sample
/// has at most [`EXACT_LIMIT`] items.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("Mann-Whitney needs two nonempty samples".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("Mann-Whitney samples must be finite".into()));
    }
    let ranks = average_ranks(&pooled);
    let u = u_statistic(ranks[..a.len()].iter().copied(), a.len());
    let exact = pooled.len() <= EXACT_LIMIT;
    let p = if exact {
        mann_whitney_exact(a, b)
    } else {
        mann_whitney_normal(a, b)
    };
    Ok(MannWhitney { u, p, exact })
}
