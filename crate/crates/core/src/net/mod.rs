//! The 3D CNN family: a five-block conv stack with optional cross-attention
//! blocks, global average pooling and a two-unit softmax head.

mod container;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use container::{load_model, peek_precision, save_model, MAGIC};

use crate::error::{Error, Result};
use crate::tensor::kernels::conv::out_extent;
use crate::tensor::{Graph, Mode, Real, RunningStats, Tensor, Var};
use crate::xattn::{attention_block, AttentionOutput, AttentionVariant, AttentionWeights, PointwiseConv, Projections};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
pub const CLASSES: usize = 2;
pub const IN_CHANNELS: usize = 1;

/// Attention placements covered by the placement ablation: pairs of conv indices.
pub const PLACEMENT_SWEEP: [[usize; 2]; 7] = [[1, 2], [1, 3], [2, 3], [2, 4], [2, 5], [3, 4], [3, 5]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    Base,
    H,
    NA,
    #[serde(rename = "H_NA")]
    HNA,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [ModelVariant::Base, ModelVariant::H, ModelVariant::NA, ModelVariant::HNA];

    pub fn attention(self) -> Option<AttentionVariant> {
        match self {
            ModelVariant::Base => None,
            ModelVariant::H => Some(AttentionVariant::H),
            ModelVariant::NA => Some(AttentionVariant::NA),
            ModelVariant::HNA => Some(AttentionVariant::HNA),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelVariant::Base => "Base",
            ModelVariant::H => "H",
            ModelVariant::NA => "NA",
            ModelVariant::HNA => "H_NA",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Base" | "base" => Ok(ModelVariant::Base),
            "H" | "h" => Ok(ModelVariant::H),
            "NA" | "na" => Ok(ModelVariant::NA),
            "H_NA" | "h_na" | "HNA" | "hna" => Ok(ModelVariant::HNA),
            other => Err(Error::Config(format!(
                "unknown variant `{other}` (expected Base, H, NA or H_NA)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureSpec {
    pub variant: ModelVariant,
    pub filters: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    /// 1-based conv indices followed by an attention block.
    pub placement: BTreeSet<usize>,
    pub dropout: f64,
    /// `[D, H, W]` the model is meant for; forward accepts any compatible dims.
    pub input_dims: [usize; 3],
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        ArchitectureSpec::new(ModelVariant::H)
    }
}

impl ArchitectureSpec {
    pub fn new(variant: ModelVariant) -> Self {
        ArchitectureSpec {
            variant,
            filters: vec![32; 5],
            kernels: vec![7, 5, 3, 3, 3],
            strides: vec![2, 1, 1, 1, 1],
            placement: match variant {
                ModelVariant::Base => BTreeSet::new(),
                _ => [2, 4].into_iter().collect(),
            },
            dropout: 0.1,
            input_dims: [128, 192, 112],
        }
    }

    pub fn with_placement(mut self, placement: &[usize]) -> Self {
        self.placement = placement.iter().copied().collect();
        self
    }

    pub fn with_input_dims(mut self, dims: [usize; 3]) -> Self {
        self.input_dims = dims;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.filters.len();
        if self.kernels.len() != n || self.strides.len() != n {
            return Err(Error::Architecture(format!(
                "filters/kernels/strides lengths differ: {}/{}/{}",
                n,
                self.kernels.len(),
                self.strides.len()
            )));
        }
        if self.filters.contains(&0) || self.kernels.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Architecture("filters, kernels and strides must be positive".into()));
        }
        if let Some(&bad) = self.placement.iter().find(|&&i| i == 0 || i > n) {
            return Err(Error::Architecture(format!(
                "attention placement {bad} is not a conv index in 1..={n}"
            )));
        }
        match self.variant {
            ModelVariant::Base if !self.placement.is_empty() => {
                return Err(Error::Architecture("Base has no attention blocks; placement must be empty".into()))
            }
            v if v != ModelVariant::Base && self.placement.is_empty() => {
                return Err(Error::Architecture(format!("{v} needs at least one attention placement")))
            }
            _ => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Architecture(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn channels_before(&self, conv: usize) -> usize {
        if conv == 0 {
            IN_CHANNELS
        } else {
            self.filters[conv - 1]
        }
    }

    /// Channel count fed to the dense head.
    pub fn head_features(&self) -> usize {
        self.filters.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Conv + BN + ReLU block.
    Conv { cin: usize, cout: usize, kernel: usize, stride: usize },
    /// Cross-attention block including its pooling.
    Attention { channels: usize, variant: AttentionVariant },
    Dense { features: usize, outputs: usize },
}

/// One layer with its `[C, D, H, W]` input and output shapes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
    pub input: [usize; 4],
    pub output: [usize; 4],
}

/// Propagates a single-item input of spatial `dims` through the spec,
/// reporting the first layer that cannot accept its input.
pub fn infer_shapes(spec: &ArchitectureSpec, dims: [usize; 3]) -> Result<Vec<LayerShape>> {
    spec.validate()?;
    let mut cur = [IN_CHANNELS, dims[0], dims[1], dims[2]];
    if dims.contains(&0) {
        return Err(Error::LayerInput {
            layer: "input".into(),
            detail: format!("zero extent in {dims:?}"),
        });
    }
    let mut out = Vec::new();
    for i in 0..spec.filters.len() {
        let (k, s) = (spec.kernels[i], spec.strides[i]);
        let name = format!("conv{}", i + 1);
        let mut next = [spec.filters[i], 0, 0, 0];
        for a in 0..3 {
            next[a + 1] = out_extent(cur[a + 1], k, s, k / 2).ok_or_else(|| Error::LayerInput {
                layer: name.clone(),
                detail: format!("kernel {k} does not fit spatial dims {:?}", &cur[1..]),
            })?;
        }
        out.push(LayerShape {
            name,
            kind: LayerKind::Conv {
                cin: cur[0],
                cout: next[0],
                kernel: k,
                stride: s,
            },
            input: cur,
            output: next,
        });
        cur = next;
        if spec.placement.contains(&(i + 1)) {
            let variant = spec.variant.attention().expect("validated");
            let name = format!("attn{}", i + 1);
            for &axis in variant.split_axes() {
                if !cur[axis - 1].is_multiple_of(2) {
                    return Err(Error::LayerInput {
                        layer: name,
                        detail: format!(
                            "{} extent {} is odd; cross-attention splits it in half",
                            if axis == 2 { "depth" } else { "width" },
                            cur[axis - 1]
                        ),
                    });
                }
            }
            if cur[1..].iter().any(|&e| e < 2) {
                return Err(Error::LayerInput {
                    layer: name,
                    detail: format!("spatial dims {:?} too small for 2x2x2 pooling", &cur[1..]),
                });
            }
            let pooled = [cur[0], cur[1] / 2, cur[2] / 2, cur[3] / 2];
            out.push(LayerShape {
                name,
                kind: LayerKind::Attention {
                    channels: cur[0],
                    variant,
                },
                input: cur,
                output: pooled,
            });
            cur = pooled;
        }
    }
    if spec.filters.is_empty() {
        return Ok(out);
    }
    out.push(LayerShape {
        name: "dense".into(),
        kind: LayerKind::Dense {
            features: cur[0],
            outputs: CLASSES,
        },
        input: cur,
        output: [CLASSES, 1, 1, 1],
    });
    Ok(out)
}

/// NAdam moment buffers, aligned with [`ModelState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSlots<T> {
    pub step: u64,
    pub mu_product: f64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerSlots<T> {
    pub fn zeros_like(params: &[(String, Tensor<T>)]) -> Self {
        OptimizerSlots {
            step: 0,
            mu_product: 1.0,
            first: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            second: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.mu_product = 1.0;
        for t in self.first.iter_mut().chain(self.second.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub spec: ArchitectureSpec,
    /// Trainable tensors in build order, hierarchically named.
    pub params: Vec<(String, Tensor<T>)>,
    /// Batch-norm running statistics, one per conv block.
    pub bn_stats: Vec<RunningStats<T>>,
    pub optimizer: OptimizerSlots<T>,
    /// Completed training epochs across both stages.
    pub epoch: u64,
    pub seed: u64,
    index: HashMap<String, usize>,
}

fn kaiming<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

fn fan_in_bias<T: Real>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[n], |_| T::lit(rng.random_range(-bound..bound)))
}

/// Names of the projection sets inside one attention block.
fn projection_set_names(variant: AttentionVariant) -> &'static [&'static str] {
    match variant {
        AttentionVariant::H | AttentionVariant::NA => &["qkv"],
        AttentionVariant::HNA => &["sup_inf", "mac_onh"],
    }
}

/// Instantiates a model with seeded Kaiming-uniform weights.
pub fn build_model<T: Real>(spec: &ArchitectureSpec, seed: u64) -> Result<ModelState<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<(String, Tensor<T>)> = Vec::new();
    let mut bn_stats = Vec::new();
    for i in 0..spec.filters.len() {
        let (cin, cout, k) = (spec.channels_before(i), spec.filters[i], spec.kernels[i]);
        let fan = cin * k * k * k;
        let l = i + 1;
        params.push((format!("conv{l}.weight"), kaiming(&mut rng, &[cout, cin, k, k, k], fan)));
        params.push((format!("conv{l}.bias"), fan_in_bias(&mut rng, cout, fan)));
        params.push((format!("bn{l}.gamma"), Tensor::ones(&[cout])));
        params.push((format!("bn{l}.beta"), Tensor::zeros(&[cout])));
        bn_stats.push(RunningStats::new(cout));
        if spec.placement.contains(&l) {
            let variant = spec.variant.attention().expect("validated");
            let mut pointwise = |name: String, params: &mut Vec<(String, Tensor<T>)>| {
                params.push((format!("{name}.weight"), kaiming(&mut rng, &[cout, cout, 1, 1, 1], cout)));
                params.push((format!("{name}.bias"), fan_in_bias(&mut rng, cout, cout)));
            };
            for set in projection_set_names(variant) {
                for role in ["query", "key", "value"] {
                    pointwise(format!("attn{l}.{set}.{role}"), &mut params);
                }
            }
            pointwise(format!("attn{l}.refine"), &mut params);
        }
    }
    if spec.filters.is_empty() {
        return Ok(ModelState::assemble(spec.clone(), params, bn_stats, None, 0, seed));
    }
    let f = spec.head_features();
    params.push(("dense.weight".into(), kaiming(&mut rng, &[CLASSES, f], f)));
    params.push(("dense.bias".into(), fan_in_bias(&mut rng, CLASSES, f)));
    Ok(ModelState::assemble(spec.clone(), params, bn_stats, None, 0, seed))
}

/// Graph handles and named activations from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-softmax scores `[B, 2]`.
    pub logits: Var,
    /// Softmax output `[B, 2]`.
    pub probs: Var,
    /// Class-1 probability `[B]`.
    pub p_glaucoma: Var,
    /// Conv block outputs (`convN`) and attention post-pool outputs (`attnN`).
    pub taps: BTreeMap<String, Var>,
    /// Full attention outputs keyed by the conv index they follow.
    pub attention: BTreeMap<usize, AttentionOutput>,
}

impl ForwardTrace {
    /// Name of the deepest attention tap, if any.
    pub fn last_attention_tap(&self) -> Option<String> {
        self.attention.keys().next_back().map(|i| format!("attn{i}"))
    }

    pub fn last_conv_tap(&self) -> Option<String> {
        self.taps
            .keys()
            .filter_map(|k| k.strip_prefix("conv").and_then(|n| n.parse::<usize>().ok()))
            .max()
            .map(|i| format!("conv{i}"))
    }

    pub fn tap(&self, name: &str) -> Result<Var> {
        self.taps.get(name).copied().ok_or_else(|| Error::UnknownTap {
            name: name.to_string(),
            available: self.taps.keys().cloned().collect(),
        })
    }
}

/// Plain-tensor result of an inference pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub p_glaucoma: Vec<T>,
}

impl<T: Real> ModelState<T> {
    pub(crate) fn assemble(
        spec: ArchitectureSpec,
        params: Vec<(String, Tensor<T>)>,
        bn_stats: Vec<RunningStats<T>>,
        optimizer: Option<OptimizerSlots<T>>,
        epoch: u64,
        seed: u64,
    ) -> Self {
        let index = params.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let optimizer = optimizer.unwrap_or_else(|| OptimizerSlots::zeros_like(&params));
        ModelState {
            spec,
            params,
            bn_stats,
            optimizer,
            epoch,
            seed,
            index,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_index(name).map(|i| &self.params[i].1)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_index(name).map(move |i| &mut self.params[i].1)
    }

    /// Adds every parameter to `g`; trainable ones receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Builds the forward graph for `x: [B, 1, D, H, W]`. Train mode updates
    /// batch-norm running statistics and draws dropout masks from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph<T>,
        vars: &[Var],
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardTrace> {
        let xs = g.shape(x).to_vec();
        if xs.len() != 5 || xs[1] != IN_CHANNELS {
            return Err(Error::LayerInput {
                layer: "input".into(),
                detail: format!("expected [B, 1, D, H, W], got {xs:?}"),
            });
        }
        infer_shapes(&self.spec, [xs[2], xs[3], xs[4]])?;
        if self.spec.filters.is_empty() {
            return Err(Error::Architecture("a model without conv layers has no classifier".into()));
        }
        if vars.len() != self.params.len() {
            return Err(Error::Architecture(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let p = |name: &str| -> Var { vars[self.index[name]] };
        let conv = |name: &str| PointwiseConv {
            weight: p(&format!("{name}.weight")),
            bias: p(&format!("{name}.bias")),
        };
        let (momentum, eps) = (T::lit(BN_MOMENTUM), T::lit(BN_EPS));
        let mut taps = BTreeMap::new();
        let mut attention = BTreeMap::new();
        let mut h = x;
        for i in 0..self.spec.filters.len() {
            let l = i + 1;
            let k = self.spec.kernels[i];
            h = g.conv3d(h, p(&format!("conv{l}.weight")), p(&format!("conv{l}.bias")), self.spec.strides[i], k / 2)?;
            h = g.batchnorm(
                h,
                p(&format!("bn{l}.gamma")),
                p(&format!("bn{l}.beta")),
                &mut self.bn_stats[i],
                mode,
                momentum,
                eps,
            )?;
            h = g.relu(h);
            g.tap(format!("conv{l}"), h);
            taps.insert(format!("conv{l}"), h);
            if self.spec.placement.contains(&l) {
                let variant = self.spec.variant.attention().expect("validated");
                let projections = projection_set_names(variant)
                    .iter()
                    .map(|set| Projections {
                        query: conv(&format!("attn{l}.{set}.query")),
                        key: conv(&format!("attn{l}.{set}.key")),
                        value: conv(&format!("attn{l}.{set}.value")),
                    })
                    .collect();
                let weights = AttentionWeights {
                    projections,
                    refine: conv(&format!("attn{l}.refine")),
                };
                let out = attention_block(g, h, variant, &weights, self.spec.dropout, rng, mode)?;
                h = out.post_block.expect("block output");
                g.tap(format!("attn{l}"), h);
                taps.insert(format!("attn{l}"), h);
                attention.insert(l, out);
            }
        }
        let pooled = g.global_avg_pool(h)?;
        let logits = g.dense(pooled, p("dense.weight"), p("dense.bias"))?;
        let probs = g.softmax(logits, 1)?;
        let batch = xs[0];
        let p_glaucoma = g.pick(probs, &vec![1; batch])?;
        Ok(ForwardTrace {
            logits,
            probs,
            p_glaucoma,
            taps,
            attention,
        })
    }

    /// Eval-mode inference on `[B, 1, D, H, W]`.
    pub fn predict(&mut self, batch: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = self.forward(&mut g, &vars, x, Mode::Eval, &mut rng)?;
        Ok(Prediction {
            logits: g.value(t.logits).clone(),
            p_glaucoma: g.value(t.p_glaucoma).data().to_vec(),
        })
    }
}
