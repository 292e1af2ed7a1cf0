//! Anatomically informed channel cross-attention.
//!
//! A feature volume is split into anatomical halves (depth: superior /
//! inferior hemiretina, width: ONH / macula) or quarters, and each region's
//! channels attend over the paired region's channels. Scores are `C x C`
//! matrices, so cost grows with voxel count only linearly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Real, Var};

pub const DEPTH_AXIS: usize = 2;
pub const WIDTH_AXIS: usize = 4;

/// Which anatomical split the attention uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    /// Superior / inferior hemiretinas (depth halves).
    H,
    /// ONH / macula (width halves).
    NA,
    /// Both splits: four quarters, two pairings.
    #[serde(rename = "H_NA")]
    HNA,
}

impl AttentionVariant {
    /// Number of independent query/key/value projection sets.
    pub fn projection_sets(self) -> usize {
        match self {
            AttentionVariant::H | AttentionVariant::NA => 1,
            AttentionVariant::HNA => 2,
        }
    }

    /// Axes that must have even extent.
    pub fn split_axes(self) -> &'static [usize] {
        match self {
            AttentionVariant::H => &[DEPTH_AXIS],
            AttentionVariant::NA => &[WIDTH_AXIS],
            AttentionVariant::HNA => &[DEPTH_AXIS, WIDTH_AXIS],
        }
    }
}

/// A 1x1x1 convolution `C -> C` (weight `[C,C,1,1,1]`, bias `[C]`).
#[derive(Debug, Clone, Copy)]
pub struct PointwiseConv {
    pub weight: Var,
    pub bias: Var,
}

impl PointwiseConv {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv3d(x, self.weight, self.bias, 1, 0)
    }
}

/// Query/key/value projections shared by both directions of a pair.
#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub query: PointwiseConv,
    pub key: PointwiseConv,
    pub value: PointwiseConv,
}

/// Parameters of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionWeights {
    /// One set for H / NA; `[sup_inf, mac_onh]` for H_NA.
    pub projections: Vec<Projections>,
    pub refine: PointwiseConv,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Cross-attention plus the input skip; same shape as the input.
    pub fused: Var,
    /// Per-direction attention outputs, e.g. `("SI", A_SI)`.
    pub directional: Vec<(String, Var)>,
    /// Softmax score matrices `[B,C,C]`, one per direction.
    pub scores: Vec<Var>,
    /// Output after dropout, refinement and max-pooling (block only).
    pub post_block: Option<Var>,
}

fn ensure_even<T: Real>(g: &Graph<T>, x: Var, axis: usize, op: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 5 {
        return Err(Error::shape(op, format!("expected [B,C,D,H,W], got {s:?}")));
    }
    if !s[axis].is_multiple_of(2) {
        return Err(Error::OddExtent {
            op,
            axis: if axis == DEPTH_AXIS { "depth" } else { "width" },
            extent: s[axis],
        });
    }
    Ok(())
}

/// `softmax(Q K^T / sqrt(N)) V` over channel tokens; returns output and scores.
fn attend<T: Real>(g: &mut Graph<T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let s = g.shape(q).to_vec();
    let (b, c) = (s[0], s[1]);
    let n: usize = s[2..].iter().product();
    let q2 = g.reshape(q, &[b, c, n])?;
    let k2 = g.reshape(k, &[b, c, n])?;
    let v2 = g.reshape(v, &[b, c, n])?;
    let kt = g.transpose_last2(k2)?;
    let raw = g.matmul(q2, kt)?;
    let scaled = g.scale(raw, T::one() / T::from_usize(n).unwrap().sqrt());
    let scores = g.softmax(scaled, 2)?;
    let out = g.matmul(scores, v2)?;
    Ok((g.reshape(out, &s)?, scores))
}

/// Bidirectional channel cross-attention between two equally shaped regions.
/// Returns `(A_ab, A_ba)` and their score matrices.
pub fn channel_cross_attention<T: Real>(
    g: &mut Graph<T>,
    a: Var,
    b: Var,
    p: &Projections,
) -> Result<((Var, Var), (Var, Var))> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            "channel_cross_attention",
            format!("regions differ: {:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    let (qa, ka, va) = (p.query.apply(g, a)?, p.key.apply(g, a)?, p.value.apply(g, a)?);
    let (qb, kb, vb) = (p.query.apply(g, b)?, p.key.apply(g, b)?, p.value.apply(g, b)?);
    let (ab, s_ab) = attend(g, qa, kb, vb)?;
    let (ba, s_ba) = attend(g, qb, ka, va)?;
    Ok(((ab, ba), (s_ab, s_ba)))
}

fn two_way<T: Real>(
    g: &mut Graph<T>,
    iv: Var,
    axis: usize,
    names: [&str; 2],
    p: &Projections,
    op: &'static str,
) -> Result<AttentionOutput> {
    ensure_even(g, iv, axis, op)?;
    let halves = g.split(iv, axis, 2)?;
    let ((ab, ba), (sab, sba)) = channel_cross_attention(g, halves[0], halves[1], p)?;
    let cat = g.concat(&[ab, ba], axis)?;
    let fused = g.add(cat, iv)?;
    Ok(AttentionOutput {
        fused,
        directional: vec![
            (format!("{}{}", names[0], names[1]), ab),
            (format!("{}{}", names[1], names[0]), ba),
        ],
        scores: vec![sab, sba],
        post_block: None,
    })
}

/// Hemiretinal cross-attention: depth halves, `(A_SI || A_IS) + iv`.
pub fn ca_h<T: Real>(g: &mut Graph<T>, iv: Var, p: &Projections) -> Result<AttentionOutput> {
    two_way(g, iv, DEPTH_AXIS, ["S", "I"], p, "ca_h")
}

/// ONH / macula cross-attention: width halves, ONH first.
pub fn ca_na<T: Real>(g: &mut Graph<T>, iv: Var, p: &Projections) -> Result<AttentionOutput> {
    two_way(g, iv, WIDTH_AXIS, ["O", "M"], p, "ca_na")
}

/// Four-way cross-attention over quarters SO, SM, IO, IM.
///
/// Pairing one attends within each hemiretina ((SO,SM), (IO,IM)); pairing two
/// within each of ONH and macula ((SO,IO), (SM,IM)). Each pairing's outputs
/// are reassembled at their source quarters and summed with the input.
pub fn ca_hna<T: Real>(
    g: &mut Graph<T>,
    iv: Var,
    sup_inf: &Projections,
    mac_onh: &Projections,
) -> Result<AttentionOutput> {
    ensure_even(g, iv, DEPTH_AXIS, "ca_hna")?;
    ensure_even(g, iv, WIDTH_AXIS, "ca_hna")?;
    let rows = g.split(iv, DEPTH_AXIS, 2)?;
    let sup = g.split(rows[0], WIDTH_AXIS, 2)?;
    let inf = g.split(rows[1], WIDTH_AXIS, 2)?;
    let (so, sm, io, im) = (sup[0], sup[1], inf[0], inf[1]);

    let mut directional = Vec::with_capacity(8);
    let mut scores = Vec::with_capacity(8);
    let mut pair = |g: &mut Graph<T>, x: Var, y: Var, nx: &str, ny: &str, p: &Projections| -> Result<(Var, Var)> {
        let ((xy, yx), (s1, s2)) = channel_cross_attention(g, x, y, p)?;
        directional.push((format!("{nx}·{ny}"), xy));
        directional.push((format!("{ny}·{nx}"), yx));
        scores.extend([s1, s2]);
        Ok((xy, yx))
    };

    let (so_sm, sm_so) = pair(g, so, sm, "SO", "SM", sup_inf)?;
    let (io_im, im_io) = pair(g, io, im, "IO", "IM", sup_inf)?;
    let (so_io, io_so) = pair(g, so, io, "SO", "IO", mac_onh)?;
    let (sm_im, im_sm) = pair(g, sm, im, "SM", "IM", mac_onh)?;

    let assemble = |g: &mut Graph<T>, q: [Var; 4]| -> Result<Var> {
        let top = g.concat(&[q[0], q[1]], WIDTH_AXIS)?;
        let bottom = g.concat(&[q[2], q[3]], WIDTH_AXIS)?;
        g.concat(&[top, bottom], DEPTH_AXIS)
    };
    let ca_sup_inf = assemble(g, [so_sm, sm_so, io_im, im_io])?;
    let ca_mac_onh = assemble(g, [so_io, sm_im, io_so, im_sm])?;
    let both = g.add(ca_sup_inf, ca_mac_onh)?;
    let fused = g.add(both, iv)?;
    Ok(AttentionOutput {
        fused,
        directional,
        scores,
        post_block: None,
    })
}

/// Runs the variant's cross-attention and returns its output.
pub fn cross_attention<T: Real>(
    g: &mut Graph<T>,
    iv: Var,
    variant: AttentionVariant,
    w: &AttentionWeights,
) -> Result<AttentionOutput> {
    if w.projections.len() != variant.projection_sets() {
        return Err(Error::Architecture(format!(
            "{variant:?} needs {} projection sets, got {}",
            variant.projection_sets(),
            w.projections.len()
        )));
    }
    match variant {
        AttentionVariant::H => ca_h(g, iv, &w.projections[0]),
        AttentionVariant::NA => ca_na(g, iv, &w.projections[0]),
        AttentionVariant::HNA => ca_hna(g, iv, &w.projections[0], &w.projections[1]),
    }
}

/// Cross-attention -> channel dropout -> 1x1x1 refinement with skip ->
/// 2x2x2 max pool. `post_block` of the result is the pooled output.
pub fn attention_block<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    iv: Var,
    variant: AttentionVariant,
    w: &AttentionWeights,
    dropout: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<AttentionOutput> {
    let mut out = cross_attention(g, iv, variant, w)?;
    let dropped = g.dropout3d(out.fused, dropout, rng, mode)?;
    let refined = w.refine.apply(g, dropped)?;
    let skip = g.add(refined, dropped)?;
    out.post_block = Some(g.maxpool3d(skip, 2, 2)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn proj(g: &mut Graph<f64>, c: usize, value_zero: bool, seed: u64) -> Projections {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut conv = |zero: bool| {
            let mut mk = |shape: &[usize]| {
                Tensor::from_fn(shape, |_| if zero { 0.0 } else { rng.random_range(-1.0..1.0) })
            };
            let (w, b) = (mk(&[c, c, 1, 1, 1]), mk(&[c]));
            PointwiseConv {
                weight: g.param(w),
                bias: g.param(b),
            }
        };
        Projections {
            query: conv(false),
            key: conv(false),
            value: conv(value_zero),
        }
    }

    #[test]
    fn odd_depth_is_rejected_with_axis_name() {
        let mut g = Graph::<f64>::new();
        let p = proj(&mut g, 2, false, 1);
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 2, 2]));
        let err = ca_h(&mut g, x, &p).unwrap_err();
        assert!(matches!(err, Error::OddExtent { axis: "depth", extent: 3, .. }));
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2, 3]));
        assert!(matches!(ca_na(&mut g, x, &p), Err(Error::OddExtent { axis: "width", .. })));
    }

    #[test]
    fn mismatched_regions_are_rejected() {
        let mut g = Graph::<f64>::new();
        let p = proj(&mut g, 2, false, 1);
        let a = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        let b = g.constant(Tensor::zeros(&[1, 2, 2, 2, 1]));
        assert!(channel_cross_attention(&mut g, a, b, &p).is_err());
    }

    #[test]
    fn block_halves_spatial_dims() {
        let mut g = Graph::<f64>::new();
        let p = proj(&mut g, 2, false, 1);
        let refine = PointwiseConv {
            weight: g.param(Tensor::zeros(&[2, 2, 1, 1, 1])),
            bias: g.param(Tensor::zeros(&[2])),
        };
        let w = AttentionWeights {
            projections: vec![p],
            refine,
        };
        let x = g.constant(Tensor::ones(&[1, 2, 4, 6, 2]));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = attention_block(&mut g, x, AttentionVariant::H, &w, 0.1, &mut rng, Mode::Eval).unwrap();
        assert_eq!(g.shape(out.post_block.unwrap()), &[1, 2, 2, 3, 1]);
    }
}
