//! Tape-style reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every op appends a node whose inputs already exist, so node order is a
//! topological order and backward is a single reverse sweep. Nodes keep the
//! activations their backward rule needs; after [`Graph::backward`] every
//! node that requires a gradient and is reachable from the loss holds one.

use std::collections::BTreeMap;

use rand::Rng;

use super::kernels::conv::{self, ConvGeom};
use super::kernels::interp::Trilinear;
use super::kernels::pool;
use super::{gemm, numel, Real, Strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    TransposeLast2(Var),
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Dropout {
        x: Var,
        scale: Vec<T>,
    },
    Upsample {
        x: Var,
        interp: Trilinear<T>,
        planes: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    BroadcastTo(Var),
    SumAll(Var),
    MeanAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxNormalize {
        x: Var,
        eps: T,
        argmax: Vec<usize>,
    },
    WeightedChannelSum {
        x: Var,
        w: Var,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Bce {
        p: Var,
        target: Vec<T>,
        weight: Vec<T>,
    },
}

impl<T> std::fmt::Debug for Trilinear<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("Trilinear")
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Recorded computation. Create leaves with [`Graph::param`] or
/// [`Graph::constant`], combine them with the op methods, then call
/// [`Graph::backward`] on a scalar.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    taps: BTreeMap<String, Var>,
}

/// `(outer, extent, inner)` decomposition around `axis`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            taps: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names an intermediate so saliency code can find it later.
    pub fn tap(&mut self, name: impl Into<String>, v: Var) {
        self.taps.insert(name.into(), v);
    }

    pub fn taps(&self) -> &BTreeMap<String, Var> {
        &self.taps
    }

    pub fn tap_var(&self, name: &str) -> Result<Var> {
        self.taps.get(name).copied().ok_or_else(|| Error::UnknownTap {
            name: name.to_string(),
            available: self.taps.keys().cloned().collect(),
        })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn volume(&self, op: &'static str, x: Var) -> Result<[usize; 5]> {
        let s = self.shape(x);
        if s.len() != 5 {
            return Err(Error::shape(op, format!("expected [B,C,D,H,W], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3], s[4]])
    }

    // ---- primitives -----------------------------------------------------

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, pad)?;
        if self.shape(b) != [geom.cout] {
            return Err(Error::shape(
                "conv3d",
                format!("bias {:?} does not match {} output channels", self.shape(b), geom.cout),
            ));
        }
        let out_shape = geom.out_shape();
        let mut out = vec![T::zero(); numel(&out_shape)];
        conv::forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &mut out,
        );
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Conv3d { x, w, b, geom },
            &[x, w, b],
        ))
    }

    /// Per-channel batch normalization over `[B,C,...]`. In train mode the
    /// running statistics are updated in place (unbiased variance).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<T>,
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batchnorm", format!("need [B,C,...], got {s:?}")));
        }
        let (b, c, inner) = (s[0], s[1], numel(&s[2..]));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("affine parameters must have {c} channels"),
            ));
        }
        let m = b * inner;
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::shape(
                "batchnorm",
                format!("train mode needs at least 2 values per channel, got {m}"),
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mf = T::from_usize(m).unwrap();
        for ch in 0..c {
            let idx = |bi: usize, i: usize| (bi * c + ch) * inner + i;
            let (mean, var) = if train {
                let mut sum = T::zero();
                for bi in 0..b {
                    for i in 0..inner {
                        sum += xv[idx(bi, i)];
                    }
                }
                let mean = sum / mf;
                let mut sq = T::zero();
                for bi in 0..b {
                    for i in 0..inner {
                        let d = xv[idx(bi, i)] - mean;
                        sq += d * d;
                    }
                }
                let var = sq / mf;
                let unbiased = sq / T::from_usize(m - 1).unwrap();
                stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..b {
                for i in 0..inner {
                    let j = idx(bi, i);
                    xhat[j] = (xv[j] - mean) * is;
                    out[j] = gv[ch] * xhat[j] + bv[ch];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Max pooling over the last three axes (floor output size).
    pub fn maxpool3d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let [b, c, d, h, w] = self.volume("maxpool3d", x)?;
        let od = pool::pooled_dims([d, h, w], kernel, stride)?;
        let (vals, argmax) =
            pool::maxpool3d(self.value(x).data(), b * c, [d, h, w], od, kernel, stride);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, od[0], od[1], od[2]], vals),
            Op::MaxPool { x, argmax },
            &[x],
        ))
    }

    /// Mean over every axis after the channel axis: `[B,C,...] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("global_avg_pool", format!("need [B,C,...], got {s:?}")));
        }
        let inner = numel(&s[2..]);
        let n = T::from_usize(inner).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / n)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![s[0], s[1]], out),
            Op::GlobalAvgPool(x),
            &[x],
        ))
    }

    /// `x[B,F] * w[O,F]^T + b[O]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (bn, f, o) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<T> = (0..bn)
            .flat_map(|_| self.value(b).data().iter().copied())
            .collect();
        gemm(
            bn,
            f,
            o,
            T::one(),
            self.value(x).data(),
            Strides::row_major(f),
            self.value(w).data(),
            Strides::transposed(f),
            T::one(),
            &mut out,
            Strides::row_major(o),
        );
        Ok(self.push(
            Tensor::from_parts(vec![bn, o], out),
            Op::Dense { x, w, b },
            &[x, w, b],
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = around(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xv[at(j)]);
                }
                let mut z = T::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { x, axis }, &[x]))
    }

    /// `[B,M,K] x [B,K,N] -> [B,M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); bn * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..bn {
            gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..],
                Strides::row_major(k),
                &bv[i * k * n..],
                Strides::row_major(n),
                T::zero(),
                &mut out[i * m * n..],
                Strides::row_major(n),
            );
        }
        Ok(self.push(
            Tensor::from_parts(vec![bn, m, n], out),
            Op::MatMul { a, b },
            &[a, b],
        ))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("need 2+ axes, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let out = transpose_blocks(self.value(x).data(), r, c);
        let mut shape = s;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLast2(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let (outer, n, inner) = around(&s, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }, &[x])
    }

    /// Splits `axis` into `parts` equal pieces.
    pub fn split(&mut self, x: Var, axis: usize, parts: usize) -> Result<Vec<Var>> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || parts == 0 || !s[axis].is_multiple_of(parts) {
            return Err(Error::shape(
                "split",
                format!("cannot split axis {axis} of {s:?} into {parts} equal parts"),
            ));
        }
        let len = s[axis] / parts;
        Ok((0..parts).map(|p| self.slice(x, axis, p * len, len)).collect())
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no parts"))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == s0.len()
                && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let v = self.value(*p).data();
                out.extend_from_slice(&v[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Channel dropout: each `(batch, channel)` volume is zeroed with
    /// probability `rate`, survivors scaled by `1/(1-rate)`. Identity in eval.
    pub fn dropout3d<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        mode: Mode,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("dropout3d", format!("need [B,C,...], got {s:?}")));
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let scale: Vec<T> = (0..s[0] * s[1])
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let inner = numel(&s[2..]);
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * scale[i / inner])
            .collect();
        Ok(self.push(Tensor::from_parts(s, out), Op::Dropout { x, scale }, &[x]))
    }

    /// Align-corners trilinear resampling of the last three axes.
    pub fn upsample(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || target.contains(&0) {
            return Err(Error::shape(
                "trilinear_upsample",
                format!("input {s:?} target {target:?}"),
            ));
        }
        let n = s.len();
        let src = [s[n - 3], s[n - 2], s[n - 1]];
        let planes = numel(&s[..n - 3]);
        let interp = Trilinear::new(src, target);
        let out = interp.forward(self.value(x).data(), planes);
        let mut shape = s[..n - 3].to_vec();
        shape.extend_from_slice(&target);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Upsample { x, interp, planes },
            &[x],
        ))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, node: Op<T>) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.sqrt());
        self.push(out, Op::Sqrt(x), &[x])
    }

    /// Broadcasts unit axes of `x` up to `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != shape.len() || s.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(Error::shape("broadcast_to", format!("{s:?} -> {shape:?}")));
        }
        let src = self.value(x);
        let out = Tensor::from_fn(shape, |idx| {
            let mut o = 0;
            for (ax, &i) in idx.iter().enumerate() {
                o = o * s[ax] + if s[ax] == 1 { 0 } else { i };
            }
            src.data()[o]
        });
        Ok(self.push(out, Op::BroadcastTo(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x).mean();
        self.push(Tensor::scalar(v), Op::MeanAll(x), &[x])
    }

    /// Sums out `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = around(&s, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumAxis { x, axis }, &[x]))
    }

    /// Averages out `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, T::one() / T::from_usize(n).unwrap()))
    }

    /// `x / (max(x) + eps)` independently for each item of the leading axis.
    pub fn max_normalize(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(Error::shape("max_normalize", "needs a leading batch axis"));
        }
        let inner = numel(&s[1..]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut argmax = Vec::with_capacity(s[0]);
        for (bi, item) in xv.chunks(inner).enumerate() {
            let mut best = 0;
            for (i, &v) in item.iter().enumerate() {
                if v > item[best] {
                    best = i;
                }
            }
            let denom = item[best] + eps;
            out.extend(item.iter().map(|&v| v / denom));
            argmax.push(bi * inner + best);
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::MaxNormalize { x, eps, argmax },
            &[x],
        ))
    }

    /// `y[b,...] = sum_c w[b,c] * x[b,c,...]`.
    pub fn weighted_channel_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 || self.shape(w) != [s[0], s[1]] {
            return Err(Error::shape(
                "weighted_channel_sum",
                format!("features {s:?}, weights {:?}", self.shape(w)),
            ));
        }
        let (b, c, inner) = (s[0], s[1], numel(&s[2..]));
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![T::zero(); b * inner];
        for bi in 0..b {
            let dst = &mut out[bi * inner..(bi + 1) * inner];
            for ch in 0..c {
                let wt = wv[bi * c + ch];
                let src = &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += wt * v;
                }
            }
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::WeightedChannelSum { x, w },
            &[x, w],
        ))
    }

    /// `y[b] = x[b, index[b]]` for `x: [B,K]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || index.len() != s[0] || index.iter().any(|&i| i >= s[1]) {
            return Err(Error::shape("pick", format!("{s:?} with indices {index:?}")));
        }
        let xv = self.value(x).data();
        let out: Vec<T> = index.iter().enumerate().map(|(b, &i)| xv[b * s[1] + i]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![s[0]], out),
            Op::Pick {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// `-mean(w * (y log p + (1-y) log(1-p)))` with `p` clamped to
    /// `[1e-7, 1 - 1e-7]`; the clamp blocks gradient outside that range.
    pub fn bce(&mut self, p: Var, target: &[T], weight: &[T]) -> Result<Var> {
        let s = self.shape(p).to_vec();
        if s.len() != 1 || target.len() != s[0] || weight.len() != s[0] {
            return Err(Error::shape(
                "bce",
                format!("probabilities {s:?}, {} targets, {} weights", target.len(), weight.len()),
            ));
        }
        let (lo, hi) = (T::lit(1e-7), T::lit(1.0 - 1e-7));
        let pv = self.value(p).data();
        let mut total = T::zero();
        for i in 0..s[0] {
            let q = pv[i].max(lo).min(hi);
            total += weight[i] * (target[i] * q.ln() + (T::one() - target[i]) * (T::one() - q).ln());
        }
        let loss = -total / T::from_usize(s[0]).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
            &[p],
        ))
    }

    /// Hash of every piecewise decision recorded in the graph (ReLU masks,
    /// pooling and normalization argmaxes). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = crate::checksum::Fnv64::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu(_) => {
                    for v in n.value.data() {
                        h.write(&[(*v > T::zero()) as u8]);
                    }
                }
                Op::MaxPool { argmax, .. } | Op::MaxNormalize { argmax, .. } => {
                    for a in argmax {
                        h.write(&a.to_le_bytes());
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of every reachable node that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, 0)
    }

    /// Like [`Graph::backward`] but stops once `stop`'s gradient is complete;
    /// nodes recorded before `stop` keep no gradient.
    pub fn backward_until(&mut self, loss: Var, stop: Var) -> Result<()> {
        self.run_backward(loss, stop.0)
    }

    fn run_backward(&mut self, loss: Var, floor: usize) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (floor..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let mut acc = Acc {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            backprop_node(&mut acc, &self.nodes[i], &g);
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::from_parts(shape, g));
        }
        Ok(())
    }
}

fn transpose_blocks<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// Gradient accumulator handed to the per-op backward rules.
struct Acc<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Real> Acc<'_, T> {
    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Mutable gradient buffer of `v`, or `None` when `v` needs no gradient.
    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_map(&mut self, v: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(s) = self.slot(v) {
            for (i, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        }
    }
}

fn backprop_node<'a, T: Real>(acc: &mut Acc<'a, T>, node: &Node<T>, g: &[T]) {
    let nodes: &'a [Node<T>] = acc.nodes;
    let val = |v: &Var| nodes[v.0].value.data();
    match &node.op {
        Op::Leaf => {}
        Op::Conv3d { x, w, b, geom } => {
            let (xv, wv) = (val(x), val(w));
            conv::backward_params(geom, xv, g, acc.slot(*w), None);
            conv::backward_params(geom, xv, g, None, acc.slot(*b));
            if let Some(gx) = acc.slot(*x) {
                conv::backward_input(geom, wv, g, gx);
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let s = acc.shape(*x).to_vec();
            let (b, c, inner) = (s[0], s[1], numel(&s[2..]));
            let gv = val(gamma);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            let mut dx = vec![T::zero(); g.len()];
            let m = T::from_usize(b * inner).unwrap();
            for ch in 0..c {
                let idx = |bi: usize, i: usize| (bi * c + ch) * inner + i;
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for bi in 0..b {
                    for i in 0..inner {
                        let j = idx(bi, i);
                        sg += g[j];
                        sgx += g[j] * xhat[j];
                    }
                }
                dbeta[ch] = sg;
                dgamma[ch] = sgx;
                let k = gv[ch] * inv_std[ch];
                for bi in 0..b {
                    for i in 0..inner {
                        let j = idx(bi, i);
                        dx[j] = if *train {
                            k * (g[j] - sg / m - xhat[j] * sgx / m)
                        } else {
                            k * g[j]
                        };
                    }
                }
            }
            acc.add_map(*x, &dx, |_, v| v);
            acc.add_map(*gamma, &dgamma, |_, v| v);
            acc.add_map(*beta, &dbeta, |_, v| v);
        }
        Op::Relu(x) => {
            let out = node.value.data();
            acc.add_map(*x, g, |i, gi| if out[i] > T::zero() { gi } else { T::zero() });
        }
        Op::MaxPool { x, argmax } => {
            if let Some(s) = acc.slot(*x) {
                for (&src, &gi) in argmax.iter().zip(g) {
                    s[src] += gi;
                }
            }
        }
        Op::GlobalAvgPool(x) => {
            let inner = numel(&acc.shape(*x)[2..]);
            let n = T::from_usize(inner).unwrap();
            acc.add_map(*x, &expand(g, inner), |_, v| v / n);
        }
        Op::Dense { x, w, b } => {
            let (bn, f) = (acc.shape(*x)[0], acc.shape(*x)[1]);
            let o = acc.shape(*w)[0];
            let (xv, wv) = (val(x), val(w));
            if let Some(gx) = acc.slot(*x) {
                gemm(bn, o, f, T::one(), g, Strides::row_major(o), wv, Strides::row_major(f), T::one(), gx, Strides::row_major(f));
            }
            if let Some(gw) = acc.slot(*w) {
                gemm(o, bn, f, T::one(), g, Strides::transposed(o), xv, Strides::row_major(f), T::one(), gw, Strides::row_major(f));
            }
            if let Some(gb) = acc.slot(*b) {
                for row in g.chunks(o) {
                    for (d, &v) in gb.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = around(node.value.shape(), *axis);
            let mut dx = vec![T::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            acc.add_map(*x, &dx, |_, v| v);
        }
        Op::MatMul { a, b } => {
            let (sa, sb) = (acc.shape(*a).to_vec(), acc.shape(*b).to_vec());
            let (bn, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let (av, bv) = (val(a), val(b));
            if let Some(ga) = acc.slot(*a) {
                for i in 0..bn {
                    gemm(m, n, k, T::one(), &g[i * m * n..], Strides::row_major(n), &bv[i * k * n..], Strides::transposed(n), T::one(), &mut ga[i * m * k..], Strides::row_major(k));
                }
            }
            if let Some(gb) = acc.slot(*b) {
                for i in 0..bn {
                    gemm(k, m, n, T::one(), &av[i * m * k..], Strides::transposed(k), &g[i * m * n..], Strides::row_major(n), T::one(), &mut gb[i * k * n..], Strides::row_major(n));
                }
            }
        }
        Op::TransposeLast2(x) => {
            let s = node.value.shape();
            let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
            let back = transpose_blocks(g, r, c);
            acc.add_map(*x, &back, |_, v| v);
        }
        Op::Reshape(x) | Op::AddScalar(x) => acc.add_map(*x, g, |_, v| v),
        Op::Slice { x, axis, start } => {
            let s = acc.shape(*x).to_vec();
            let (outer, n, inner) = around(&s, *axis);
            let len = node.value.shape()[*axis];
            if let Some(gx) = acc.slot(*x) {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    for (d, &v) in gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += v;
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = around(node.value.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let n = acc.shape(*p)[*axis];
                if let Some(gp) = acc.slot(*p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                        for (d, &v) in gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                offset += n;
            }
        }
        Op::Dropout { x, scale } => {
            let inner = g.len() / scale.len();
            acc.add_map(*x, g, |i, gi| gi * scale[i / inner]);
        }
        Op::Upsample { x, interp, planes } => {
            if let Some(gx) = acc.slot(*x) {
                interp.backward(g, *planes, gx);
            }
        }
        Op::Add(a, b) => {
            acc.add_map(*a, g, |_, v| v);
            acc.add_map(*b, g, |_, v| v);
        }
        Op::Sub(a, b) => {
            acc.add_map(*a, g, |_, v| v);
            acc.add_map(*b, g, |_, v| -v);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(a), val(b));
            acc.add_map(*a, g, |i, v| v * bv[i]);
            acc.add_map(*b, g, |i, v| v * av[i]);
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(a), val(b));
            acc.add_map(*a, g, |i, v| v / bv[i]);
            acc.add_map(*b, g, |i, v| -v * av[i] / (bv[i] * bv[i]));
        }
        Op::Scale(x, c) => acc.add_map(*x, g, |_, v| v * *c),
        Op::Square(x) => {
            let xv = val(x);
            acc.add_map(*x, g, |i, v| T::lit(2.0) * xv[i] * v);
        }
        Op::Sqrt(x) => {
            let y = node.value.data();
            acc.add_map(*x, g, |i, v| v / (T::lit(2.0) * y[i]));
        }
        Op::BroadcastTo(x) => {
            let s = acc.shape(*x).to_vec();
            let out_shape = node.value.shape().to_vec();
            if let Some(gx) = acc.slot(*x) {
                let probe = Tensor::<T>::zeros(&out_shape);
                for (o, &v) in g.iter().enumerate() {
                    let idx = probe.unravel(o);
                    let mut src = 0;
                    for (ax, &i) in idx.iter().enumerate() {
                        src = src * s[ax] + if s[ax] == 1 { 0 } else { i };
                    }
                    gx[src] += v;
                }
            }
        }
        Op::SumAll(x) => acc.add_map_all(*x, g[0]),
        Op::MeanAll(x) => {
            let n = T::from_usize(val(x).len()).unwrap();
            acc.add_map_all(*x, g[0] / n);
        }
        Op::SumAxis { x, axis } => {
            let (outer, n, inner) = around(acc.shape(*x), *axis);
            if let Some(gx) = acc.slot(*x) {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::MaxNormalize { x, eps, argmax } => {
            let xv = val(x);
            let inner = xv.len() / argmax.len();
            if let Some(gx) = acc.slot(*x) {
                for (bi, &am) in argmax.iter().enumerate() {
                    let denom = xv[am] + *eps;
                    let mut cross = T::zero();
                    for i in bi * inner..(bi + 1) * inner {
                        gx[i] += g[i] / denom;
                        cross += g[i] * xv[i];
                    }
                    gx[am] -= cross / (denom * denom);
                }
            }
        }
        Op::WeightedChannelSum { x, w } => {
            let s = acc.shape(*x).to_vec();
            let (b, c, inner) = (s[0], s[1], numel(&s[2..]));
            let (xv, wv) = (val(x), val(w));
            if let Some(gx) = acc.slot(*x) {
                for bi in 0..b {
                    for ch in 0..c {
                        let wt = wv[bi * c + ch];
                        let dst = &mut gx[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                        for (d, &gi) in dst.iter_mut().zip(&g[bi * inner..(bi + 1) * inner]) {
                            *d += wt * gi;
                        }
                    }
                }
            }
            if let Some(gw) = acc.slot(*w) {
                for bi in 0..b {
                    for ch in 0..c {
                        let src = &xv[(bi * c + ch) * inner..(bi * c + ch + 1) * inner];
                        gw[bi * c + ch] += src
                            .iter()
                            .zip(&g[bi * inner..(bi + 1) * inner])
                            .map(|(&a, &b)| a * b)
                            .sum::<T>();
                    }
                }
            }
        }
        Op::Pick { x, index } => {
            let k = acc.shape(*x)[1];
            if let Some(gx) = acc.slot(*x) {
                for (b, &i) in index.iter().enumerate() {
                    gx[b * k + i] += g[b];
                }
            }
        }
        Op::Bce { p, target, weight } => {
            let pv = val(p);
            let n = T::from_usize(pv.len()).unwrap();
            let (lo, hi) = (T::lit(1e-7), T::lit(1.0 - 1e-7));
            if let Some(gp) = acc.slot(*p) {
                for i in 0..pv.len() {
                    if pv[i] < lo || pv[i] > hi {
                        continue;
                    }
                    let d = -(target[i] / pv[i] - (T::one() - target[i]) / (T::one() - pv[i]));
                    gp[i] += g[0] * weight[i] * d / n;
                }
            }
        }
    }
}

impl<T: Real> Acc<'_, T> {
    fn add_map_all(&mut self, v: Var, c: T) {
        if let Some(s) = self.slot(v) {
            for d in s.iter_mut() {
                *d += c;
            }
        }
    }
}

fn expand<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    g.iter().flat_map(|&v| std::iter::repeat_n(v, inner)).collect()
}
