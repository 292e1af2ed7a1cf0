//! Cross-attention checked against a plain-loop evaluation that shares no
//! code with the graph implementation.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xvol::tensor::gradcheck::{grad_check_many, GradCheckOptions};
use xvol::xattn::{
    attention_block, ca_h, ca_hna, ca_na, channel_cross_attention, AttentionVariant, AttentionWeights,
    PointwiseConv, Projections,
};
use xvol::{Graph, Mode, Tensor, Var};

// ---------- oracle ----------

#[derive(Clone)]
struct Lin {
    w: Vec<f64>, // [C][C] row-major (out, in)
    b: Vec<f64>,
}

#[derive(Clone)]
struct Qkv {
    q: Lin,
    k: Lin,
    v: Lin,
}

/// Region as [C][N] with N flattened row-major over (d, h, w).
type Region = Vec<Vec<f64>>;

fn project(x: &Region, l: &Lin) -> Region {
    let c = x.len();
    let n = x[0].len();
    (0..c)
        .map(|o| {
            (0..n)
                .map(|p| l.b[o] + (0..c).map(|i| l.w[o * c + i] * x[i][p]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn oracle_attend(a: &Region, b: &Region, p: &Qkv) -> Region {
    let (qa, kb, vb) = (project(a, &p.q), project(b, &p.k), project(b, &p.v));
    let c = a.len();
    let n = a[0].len();
    let mut out = vec![vec![0.0; n]; c];
    for i in 0..c {
        let logits: Vec<f64> = (0..c)
            .map(|j| (0..n).map(|t| qa[i][t] * kb[j][t]).sum::<f64>() / (n as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..c {
            for t in 0..n {
                out[i][t] += e[j] / z * vb[j][t];
            }
        }
    }
    out
}

/// Volume `[C, D, H, W]` (batch 1) as nested indexing helpers.
struct Vol {
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Vol {
    fn at(&self, c: usize, d: usize, h: usize, w: usize) -> f64 {
        self.data[((c * self.d + d) * self.h + h) * self.w + w]
    }

    fn region(&self, ds: std::ops::Range<usize>, ws: std::ops::Range<usize>) -> Region {
        (0..self.c)
            .map(|c| {
                let mut v = Vec::new();
                for d in ds.clone() {
                    for h in 0..self.h {
                        for w in ws.clone() {
                            v.push(self.at(c, d, h, w));
                        }
                    }
                }
                v
            })
            .collect()
    }

    fn place(&mut self, r: &Region, ds: std::ops::Range<usize>, ws: std::ops::Range<usize>, add: bool) {
        for (c, row) in r.iter().enumerate().take(self.c) {
            let mut k = 0;
            for d in ds.clone() {
                for h in 0..self.h {
                    for w in ws.clone() {
                        let i = ((c * self.d + d) * self.h + h) * self.w + w;
                        if add {
                            self.data[i] += row[k];
                        } else {
                            self.data[i] = row[k];
                        }
                        k += 1;
                    }
                }
            }
        }
    }
}

fn oracle_two_way(iv: &Vol, p: &Qkv, depth: bool) -> Vec<f64> {
    let (dh, wh) = (iv.d / 2, iv.w / 2);
    let (ra, rb) = if depth {
        ((0..dh, 0..iv.w), (dh..iv.d, 0..iv.w))
    } else {
        ((0..iv.d, 0..wh), (0..iv.d, wh..iv.w))
    };
    let a = iv.region(ra.0.clone(), ra.1.clone());
    let b = iv.region(rb.0.clone(), rb.1.clone());
    let mut out = Vol {
        data: iv.data.clone(),
        ..*iv
    };
    out.place(&oracle_attend(&a, &b, p), ra.0, ra.1, true);
    out.place(&oracle_attend(&b, &a, p), rb.0, rb.1, true);
    out.data
}

fn oracle_hna(iv: &Vol, supinf: &Qkv, maconh: &Qkv) -> Vec<f64> {
    let (dh, wh) = (iv.d / 2, iv.w / 2);
    let q = |top: bool, onh: bool| {
        (
            if top { 0..dh } else { dh..iv.d },
            if onh { 0..wh } else { wh..iv.w },
        )
    };
    let (so, sm, io, im) = (q(true, true), q(true, false), q(false, true), q(false, false));
    let reg = |r: &(std::ops::Range<usize>, std::ops::Range<usize>)| iv.region(r.0.clone(), r.1.clone());
    let mut out = Vol {
        data: iv.data.clone(),
        ..*iv
    };
    for (x, y, p) in [(&so, &sm, supinf), (&io, &im, supinf), (&so, &io, maconh), (&sm, &im, maconh)] {
        let (a, b) = (reg(x), reg(y));
        out.place(&oracle_attend(&a, &b, p), x.0.clone(), x.1.clone(), true);
        out.place(&oracle_attend(&b, &a, p), y.0.clone(), y.1.clone(), true);
    }
    out.data
}

// ---------- graph plumbing ----------

fn rand_lin(rng: &mut ChaCha8Rng, c: usize, int: bool) -> Lin {
    let mut draw = || {
        if int {
            rng.random_range(-2i32..=2) as f64
        } else {
            rng.random_range(-1.0..1.0)
        }
    };
    Lin {
        w: (0..c * c).map(|_| draw()).collect(),
        b: (0..c).map(|_| draw()).collect(),
    }
}

fn rand_qkv(seed: u64, c: usize, int: bool) -> Qkv {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Qkv {
        q: rand_lin(&mut rng, c, int),
        k: rand_lin(&mut rng, c, int),
        v: rand_lin(&mut rng, c, int),
    }
}

fn conv_vars(g: &mut Graph<f64>, l: &Lin) -> PointwiseConv {
    let c = l.b.len();
    PointwiseConv {
        weight: g.param(Tensor::from_f64(&[c, c, 1, 1, 1], &l.w).unwrap()),
        bias: g.param(Tensor::from_f64(&[c], &l.b).unwrap()),
    }
}

fn proj_vars(g: &mut Graph<f64>, p: &Qkv) -> Projections {
    Projections {
        query: conv_vars(g, &p.q),
        key: conv_vars(g, &p.k),
        value: conv_vars(g, &p.v),
    }
}

fn zero_values(mut p: Qkv) -> Qkv {
    p.v.w.iter_mut().for_each(|x| *x = 0.0);
    p.v.b.iter_mut().for_each(|x| *x = 0.0);
    p
}

fn int_volume(seed: u64, shape: [usize; 4]) -> Vol {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Vol {
        c: shape[0],
        d: shape[1],
        h: shape[2],
        w: shape[3],
        data: (0..n).map(|_| rng.random_range(-3i32..=3) as f64).collect(),
    }
}

fn tensor_of(v: &Vol) -> Tensor<f64> {
    Tensor::from_f64(&[1, v.c, v.d, v.h, v.w], &v.data).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * (1.0 + y.abs()), "index {i}: {x} vs {y}");
    }
}

// ---------- channel_cross_attention ----------

#[test]
fn identical_regions_give_identical_directions() {
    let mut g = Graph::<f64>::new();
    let p = proj_vars(&mut g, &rand_qkv(3, 3, false));
    let x = g.constant(Tensor::from_fn(&[1, 3, 2, 2, 2], |i| (i[1] * 7 + i[2] * 3 + i[4]) as f64 * 0.1));
    let ((ab, ba), _) = channel_cross_attention(&mut g, x, x, &p).unwrap();
    assert_eq!(g.value(ab).data(), g.value(ba).data());
}

#[test]
fn single_channel_returns_value_projection() {
    let mut g = Graph::<f64>::new();
    let qkv = rand_qkv(5, 1, false);
    let p = proj_vars(&mut g, &qkv);
    let a = g.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| i[2] as f64 - 0.5 * i[3] as f64));
    let b = g.constant(Tensor::from_fn(&[1, 1, 2, 2, 2], |i| (i[4] + 2 * i[2]) as f64));
    let ((ab, _), _) = channel_cross_attention(&mut g, a, b, &p).unwrap();
    let vb = p.value.apply(&mut g, b).unwrap();
    assert_eq!(g.value(ab).data(), g.value(vb).data());
}

#[test]
fn two_channel_two_voxel_matches_oracle() {
    let qkv = Qkv {
        q: Lin { w: vec![1.0, 0.0, 1.0, -1.0], b: vec![0.0, 1.0] },
        k: Lin { w: vec![2.0, 1.0, 0.0, 1.0], b: vec![-1.0, 0.0] },
        v: Lin { w: vec![1.0, 2.0, -1.0, 1.0], b: vec![0.0, 0.0] },
    };
    let a: Region = vec![vec![1.0, 2.0], vec![0.0, -1.0]];
    let b: Region = vec![vec![-1.0, 1.0], vec![2.0, 0.0]];
    let mut g = Graph::<f64>::new();
    let p = proj_vars(&mut g, &qkv);
    let flat = |r: &Region| r.iter().flatten().cloned().collect::<Vec<_>>();
    let av = g.constant(Tensor::from_f64(&[1, 2, 1, 1, 2], &flat(&a)).unwrap());
    let bv = g.constant(Tensor::from_f64(&[1, 2, 1, 1, 2], &flat(&b)).unwrap());
    let ((ab, ba), _) = channel_cross_attention(&mut g, av, bv, &p).unwrap();
    close(g.value(ab).data(), &flat(&oracle_attend(&a, &b, &qkv)), 1e-12);
    close(g.value(ba).data(), &flat(&oracle_attend(&b, &a, &qkv)), 1e-12);
}

// ---------- variants ----------

#[test]
fn ca_h_matches_oracle() {
    let iv = int_volume(11, [2, 4, 2, 2]);
    let qkv = rand_qkv(12, 2, true);
    let mut g = Graph::<f64>::new();
    let p = proj_vars(&mut g, &qkv);
    let x = g.constant(tensor_of(&iv));
    let out = ca_h(&mut g, x, &p).unwrap();
    assert_eq!(g.shape(out.fused), &[1, 2, 4, 2, 2]);
    close(g.value(out.fused).data(), &oracle_two_way(&iv, &qkv, true), 1e-12);
}

#[test]
fn ca_na_matches_oracle() {
    let iv = int_volume(13, [2, 2, 2, 4]);
    let qkv = rand_qkv(14, 2, true);
    let mut g = Graph::<f64>::new();
    let p = proj_vars(&mut g, &qkv);
    let x = g.constant(tensor_of(&iv));
    let out = ca_na(&mut g, x, &p).unwrap();
    assert_eq!(g.shape(out.fused), &[1, 2, 2, 2, 4]);
    close(g.value(out.fused).data(), &oracle_two_way(&iv, &qkv, false), 1e-12);
}

#[test]
fn ca_hna_matches_oracle() {
    let iv = int_volume(15, [2, 4, 2, 4]);
    let (si, mo) = (rand_qkv(16, 2, true), rand_qkv(17, 2, true));
    let mut g = Graph::<f64>::new();
    let (ps, pm) = (proj_vars(&mut g, &si), proj_vars(&mut g, &mo));
    let x = g.constant(tensor_of(&iv));
    let out = ca_hna(&mut g, x, &ps, &pm).unwrap();
    assert_eq!(out.directional.len(), 8);
    assert_eq!(g.shape(out.fused), &[1, 2, 4, 2, 4]);
    close(g.value(out.fused).data(), &oracle_hna(&iv, &si, &mo), 1e-12);
}

#[test]
fn zero_value_projection_is_identity_for_every_variant() {
    let iv = int_volume(21, [3, 4, 2, 4]);
    let p = zero_values(rand_qkv(22, 3, false));
    let mut g = Graph::<f64>::new();
    let pv = proj_vars(&mut g, &p);
    let x = g.constant(tensor_of(&iv));
    for fused in [
        ca_h(&mut g, x, &pv).unwrap().fused,
        ca_na(&mut g, x, &pv).unwrap().fused,
        ca_hna(&mut g, x, &pv, &pv).unwrap().fused,
    ] {
        assert_eq!(g.value(fused).data(), iv.data.as_slice());
    }
}

fn flip_depth(t: &Tensor<f64>) -> Tensor<f64> {
    let d = t.shape()[2];
    Tensor::from_fn(t.shape(), |i| t.get(&[i[0], i[1], d - 1 - i[2], i[3], i[4]]))
}

#[test]
fn depth_reflection_is_equivariant() {
    let iv = tensor_of(&int_volume(31, [2, 4, 2, 4]));
    let (si, mo) = (rand_qkv(32, 2, false), rand_qkv(33, 2, false));
    let run = |x: &Tensor<f64>, hna: bool| {
        let mut g = Graph::<f64>::new();
        let (ps, pm) = (proj_vars(&mut g, &si), proj_vars(&mut g, &mo));
        let v = g.constant(x.clone());
        let out = if hna {
            ca_hna(&mut g, v, &ps, &pm).unwrap()
        } else {
            ca_h(&mut g, v, &ps).unwrap()
        };
        g.value(out.fused).clone()
    };
    for hna in [false, true] {
        let direct = flip_depth(&run(&iv, hna));
        let reflected = run(&flip_depth(&iv), hna);
        close(reflected.data(), direct.data(), 1e-12);
    }
}

#[test]
fn hemiretina_symmetry_under_half_swap() {
    // identical halves: A_SI == A_IS, so fused is unchanged by swapping halves
    let half = int_volume(41, [2, 2, 2, 2]);
    let full = Tensor::from_fn(&[1, 2, 4, 2, 2], |i| half.at(i[1], i[2] % 2, i[3], i[4]));
    let qkv = rand_qkv(42, 2, false);
    let mut g = Graph::<f64>::new();
    let p = proj_vars(&mut g, &qkv);
    let x = g.constant(full);
    let out = ca_h(&mut g, x, &p).unwrap();
    assert_eq!(g.value(out.directional[0].1).data(), g.value(out.directional[1].1).data());
    let f = g.value(out.fused);
    let swapped = Tensor::from_fn(f.shape(), |i| f.get(&[0, i[1], (i[2] + 2) % 4, i[3], i[4]]));
    assert_eq!(swapped.data(), f.data());
}

// ---------- block ----------

fn block_weights(g: &mut Graph<f64>, p: &Qkv, refine: &Lin, variant: AttentionVariant) -> AttentionWeights {
    let proj = proj_vars(g, p);
    AttentionWeights {
        projections: vec![proj; variant.projection_sets()],
        refine: conv_vars(g, refine),
    }
}

fn oracle_maxpool(v: &Vol) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..v.c {
        for d in 0..v.d / 2 {
            for h in 0..v.h / 2 {
                for w in 0..v.w / 2 {
                    let mut m = f64::NEG_INFINITY;
                    for (a, b, e) in (0..8).map(|k| (k >> 2, (k >> 1) & 1, k & 1)) {
                        m = m.max(v.at(c, 2 * d + a, 2 * h + b, 2 * w + e));
                    }
                    out.push(m);
                }
            }
        }
    }
    out
}

#[test]
fn eval_block_with_zero_value_and_refine_is_maxpool() {
    let iv = int_volume(51, [2, 4, 4, 4]);
    let p = zero_values(rand_qkv(52, 2, false));
    let refine = Lin { w: vec![0.0; 4], b: vec![0.0; 2] };
    let mut g = Graph::<f64>::new();
    let w = block_weights(&mut g, &p, &refine, AttentionVariant::HNA);
    let x = g.constant(tensor_of(&iv));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = attention_block(&mut g, x, AttentionVariant::HNA, &w, 0.5, &mut rng, Mode::Eval).unwrap();
    let pooled = out.post_block.unwrap();
    assert_eq!(g.shape(pooled), &[1, 2, 2, 2, 2]);
    assert_eq!(g.value(pooled).data(), oracle_maxpool(&iv).as_slice());
}

#[test]
fn train_block_matches_stagewise_replay() {
    let c = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let iv = Vol {
        c,
        d: 4,
        h: 4,
        w: 4,
        data: (0..c * 64).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let qkv = rand_qkv(62, c, false);
    let refine = rand_lin(&mut ChaCha8Rng::seed_from_u64(63), c, false);
    let rate = 0.5;

    let mut g = Graph::<f64>::new();
    let w = block_weights(&mut g, &qkv, &refine, AttentionVariant::H);
    let x = g.constant(tensor_of(&iv));
    let mut block_rng = ChaCha8Rng::seed_from_u64(64);
    let out = attention_block(&mut g, x, AttentionVariant::H, &w, rate, &mut block_rng, Mode::Train).unwrap();

    // replay: attention, dropout (one draw per channel), refine + skip, pool
    let x1 = oracle_two_way(&iv, &qkv, true);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(64);
    let keep: Vec<f64> = (0..c)
        .map(|_| if mask_rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
        .collect();
    assert!(keep.contains(&0.0) && keep.iter().any(|&k| k > 0.0), "seed should mix");
    let x2: Vec<f64> = x1.iter().enumerate().map(|(i, v)| v * keep[i / 64]).collect();
    let x2r: Region = (0..c).map(|ch| x2[ch * 64..(ch + 1) * 64].to_vec()).collect();
    let refined = project(&x2r, &refine);
    let x3 = Vol {
        data: (0..c * 64).map(|i| refined[i / 64][i % 64] + x2[i]).collect(),
        ..iv
    };
    close(g.value(out.post_block.unwrap()).data(), &oracle_maxpool(&x3), 1e-12);
}

#[test]
fn projection_count_mismatch_is_architecture_error() {
    let mut g = Graph::<f64>::new();
    let qkv = rand_qkv(1, 2, false);
    let mut w = block_weights(&mut g, &qkv, &qkv.q, AttentionVariant::H);
    w.projections.clear();
    let x = g.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = attention_block(&mut g, x, AttentionVariant::H, &w, 0.0, &mut rng, Mode::Eval).unwrap_err();
    assert!(matches!(err, xvol::Error::Architecture(_)));
}

// ---------- properties ----------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn scores_are_row_stochastic_in_f32(seed in 0u64..10_000, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::<f32>::new();
        let mut conv = |g: &mut Graph<f32>| PointwiseConv {
            weight: g.param(Tensor::from_fn(&[c, c, 1, 1, 1], |_| rng.random_range(-2.0f32..2.0))),
            bias: g.param(Tensor::from_fn(&[c], |_| rng.random_range(-1.0f32..1.0))),
        };
        let p = Projections { query: conv(&mut g), key: conv(&mut g), value: conv(&mut g) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
        let x = g.constant(Tensor::from_fn(&[2, c, 4, 2, 4], |_| rng.random_range(-3.0f32..3.0)));
        let outs = [
            ca_h(&mut g, x, &p).unwrap(),
            ca_na(&mut g, x, &p).unwrap(),
            ca_hna(&mut g, x, &p, &p).unwrap(),
        ];
        for out in outs {
            prop_assert_eq!(g.shape(out.fused), &[2, c, 4, 2, 4]);
            for s in &out.scores {
                for row in g.value(*s).data().chunks(c) {
                    let total: f32 = row.iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-6, "row sum {}", total);
                }
            }
        }
    }
}

// ---------- gradients ----------

fn gradcheck_variant(variant: AttentionVariant) {
    let c = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let sets = variant.projection_sets();
    let mut inputs = vec![Tensor::from_fn(&[1, c, 4, 2, 4], |_| rng.random_range(-1.0..1.0))];
    for _ in 0..3 * sets {
        inputs.push(Tensor::from_fn(&[c, c, 1, 1, 1], |_| rng.random_range(-0.8..0.8)));
        inputs.push(Tensor::from_fn(&[c], |_| rng.random_range(-0.5..0.5)));
    }
    let probe = Tensor::from_fn(&[1, c, 4, 2, 4], |_| rng.random_range(-1.0..1.0));
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let conv = |k: usize| PointwiseConv {
            weight: v[1 + 2 * k],
            bias: v[2 + 2 * k],
        };
        let proj = |s: usize| Projections {
            query: conv(3 * s),
            key: conv(3 * s + 1),
            value: conv(3 * s + 2),
        };
        let out = match variant {
            AttentionVariant::H => ca_h(g, v[0], &proj(0))?,
            AttentionVariant::NA => ca_na(g, v[0], &proj(0))?,
            AttentionVariant::HNA => ca_hna(g, v[0], &proj(0), &proj(1))?,
        };
        let w = g.constant(probe.clone());
        let prod = g.mul(out.fused, w)?;
        Ok(g.sum(prod))
    };
    let report = grad_check_many(f, &inputs, &GradCheckOptions::default()).unwrap();
    assert!(report.max_rel_error < 1e-4, "{variant:?}: {report:?}");
    assert!(report.checked > 0);
}

#[test]
fn gradcheck_ca_h() {
    gradcheck_variant(AttentionVariant::H);
}

#[test]
fn gradcheck_ca_na() {
    gradcheck_variant(AttentionVariant::NA);
}

#[test]
fn gradcheck_ca_hna() {
    gradcheck_variant(AttentionVariant::HNA);
}
