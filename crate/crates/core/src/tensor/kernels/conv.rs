//! 3D cross-correlation via im2col + GEMM.
//!
//! Columns are built one output-depth slab at a time so the scratch buffer
//! stays bounded for large volumes. Every reduction runs in a fixed order,
//! so results do not depend on chunk sizes.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Strides};

const COLS_BUDGET: usize = 1 << 22;

/// `floor((n + 2 pad - k) / stride) + 1`, or `None` if the kernel does not fit.
pub fn out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(Error::shape(
                "conv3d",
                format!("expected 5-axis input and weight, got {x:?} and {w:?}"),
            ));
        }
        if x[1] != w[1] {
            return Err(Error::shape(
                "conv3d",
                format!("input {x:?} has {} channels but weight {w:?} expects {}", x[1], w[1]),
            ));
        }
        if w[2] != w[3] || w[3] != w[4] {
            return Err(Error::shape("conv3d", format!("kernel must be cubic, got {w:?}")));
        }
        let k = w[2];
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = out_extent(x[2 + ax], k, stride, pad).ok_or_else(|| {
                Error::shape(
                    "conv3d",
                    format!("kernel {k} (stride {stride}, padding {pad}) does not fit input {x:?}"),
                )
            })?;
        }
        Ok(ConvGeom {
            batch: x[0],
            cin: x[1],
            cout: w[0],
            k,
            stride,
            pad,
            input: [x[2], x[3], x[4]],
            output,
        })
    }

    pub fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kdim(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.cout,
            self.output[0],
            self.output[1],
            self.output[2],
        ]
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn slab_depth(&self) -> usize {
        let per_depth = self.kdim() * self.output[1] * self.output[2];
        (COLS_BUDGET / per_depth.max(1)).clamp(1, self.output[0])
    }

    fn slabs(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.slab_depth();
        let od = self.output[0];
        (0..od).step_by(step).map(move |s| (s, (s + step).min(od)))
    }
}

/// Iterates every (column-row, output-row) pair of a slab, handing the
/// caller the source row offset (or `None` when the row lies in padding).
#[inline]
fn for_each_row(
    g: &ConvGeom,
    od0: usize,
    od1: usize,
    mut f: impl FnMut(usize, usize, Option<usize>, usize),
) {
    let [d, h, w] = g.input;
    let [_, oh_n, ow_n] = g.output;
    let k = g.k;
    let ncols = (od1 - od0) * oh_n * ow_n;
    for ci in 0..g.cin {
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let r = ((ci * k + kd) * k + kh) * k + kw;
                    let mut p = r * ncols;
                    for od in od0..od1 {
                        let id = (od * g.stride + kd) as isize - g.pad as isize;
                        for oh in 0..oh_n {
                            let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                            let src = if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                None
                            } else {
                                Some(((ci * d + id as usize) * h + ih as usize) * w)
                            };
                            f(p, kw, src, ow_n);
                            p += ow_n;
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], od0: usize, od1: usize, cols: &mut [T]) {
    let w = g.input[2] as isize;
    let (stride, pad) = (g.stride as isize, g.pad as isize);
    for_each_row(g, od0, od1, |p, kw, src, ow_n| {
        let dst = &mut cols[p..p + ow_n];
        match src {
            None => dst.fill(T::zero()),
            Some(base) => {
                for (ow, out) in dst.iter_mut().enumerate() {
                    let iw = ow as isize * stride + kw as isize - pad;
                    *out = if iw >= 0 && iw < w {
                        x[base + iw as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    });
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], od0: usize, od1: usize, gx: &mut [T]) {
    let w = g.input[2] as isize;
    let (stride, pad) = (g.stride as isize, g.pad as isize);
    for_each_row(g, od0, od1, |p, kw, src, ow_n| {
        if let Some(base) = src {
            for (ow, &v) in cols[p..p + ow_n].iter().enumerate() {
                let iw = ow as isize * stride + kw as isize - pad;
                if iw >= 0 && iw < w {
                    gx[base + iw as usize] += v;
                }
            }
        }
    });
}

pub fn forward<T: Real>(g: &ConvGeom, x: &[T], wt: &[T], bias: &[T], out: &mut [T]) {
    let (in_n, out_n, kdim) = (g.cin * g.in_vox(), g.cout * g.out_vox(), g.kdim());
    let ov = g.out_vox();
    let plane = g.output[1] * g.output[2];
    let mut cols = Vec::new();
    for bi in 0..g.batch {
        let xb = &x[bi * in_n..(bi + 1) * in_n];
        let ob = &mut out[bi * out_n..(bi + 1) * out_n];
        for (co, row) in ob.chunks_mut(ov).enumerate() {
            row.fill(bias[co]);
        }
        if g.pointwise() {
            gemm(
                g.cout,
                g.cin,
                ov,
                T::one(),
                wt,
                Strides::row_major(g.cin),
                xb,
                Strides::row_major(ov),
                T::one(),
                ob,
                Strides::row_major(ov),
            );
            continue;
        }
        for (od0, od1) in g.slabs() {
            let ncols = (od1 - od0) * plane;
            cols.resize(kdim * ncols, T::zero());
            im2col(g, xb, od0, od1, &mut cols);
            gemm(
                g.cout,
                kdim,
                ncols,
                T::one(),
                wt,
                Strides::row_major(kdim),
                &cols,
                Strides::row_major(ncols),
                T::one(),
                &mut ob[od0 * plane..],
                Strides(ov as isize, 1),
            );
        }
    }
}

/// Accumulates d(loss)/d(weight) and d(loss)/d(bias) into `gw`/`gb`.
pub fn backward_params<T: Real>(
    g: &ConvGeom,
    x: &[T],
    gout: &[T],
    gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let (in_n, out_n, kdim) = (g.cin * g.in_vox(), g.cout * g.out_vox(), g.kdim());
    let ov = g.out_vox();
    let plane = g.output[1] * g.output[2];
    if let Some(gb) = gb {
        for bi in 0..g.batch {
            for (co, row) in gout[bi * out_n..(bi + 1) * out_n].chunks(ov).enumerate() {
                gb[co] += row.iter().copied().sum::<T>();
            }
        }
    }
    let Some(gw) = gw else { return };
    let mut cols = Vec::new();
    for bi in 0..g.batch {
        let xb = &x[bi * in_n..(bi + 1) * in_n];
        let gob = &gout[bi * out_n..(bi + 1) * out_n];
        if g.pointwise() {
            gemm(
                g.cout,
                ov,
                g.cin,
                T::one(),
                gob,
                Strides::row_major(ov),
                xb,
                Strides::transposed(ov),
                T::one(),
                gw,
                Strides::row_major(g.cin),
            );
            continue;
        }
        for (od0, od1) in g.slabs() {
            let ncols = (od1 - od0) * plane;
            cols.resize(kdim * ncols, T::zero());
            im2col(g, xb, od0, od1, &mut cols);
            gemm(
                g.cout,
                ncols,
                kdim,
                T::one(),
                &gob[od0 * plane..],
                Strides(ov as isize, 1),
                &cols,
                Strides::transposed(ncols),
                T::one(),
                gw,
                Strides::row_major(kdim),
            );
        }
    }
}

/// Accumulates d(loss)/d(input) into `gx`.
pub fn backward_input<T: Real>(g: &ConvGeom, wt: &[T], gout: &[T], gx: &mut [T]) {
    let (in_n, out_n, kdim) = (g.cin * g.in_vox(), g.cout * g.out_vox(), g.kdim());
    let ov = g.out_vox();
    let plane = g.output[1] * g.output[2];
    let mut cols = Vec::new();
    for bi in 0..g.batch {
        let gob = &gout[bi * out_n..(bi + 1) * out_n];
        let gxb = &mut gx[bi * in_n..(bi + 1) * in_n];
        if g.pointwise() {
            gemm(
                g.cin,
                g.cout,
                ov,
                T::one(),
                wt,
                Strides::transposed(g.cin),
                gob,
                Strides::row_major(ov),
                T::one(),
                gxb,
                Strides::row_major(ov),
            );
            continue;
        }
        for (od0, od1) in g.slabs() {
            let ncols = (od1 - od0) * plane;
            cols.resize(kdim * ncols, T::zero());
            gemm(
                kdim,
                g.cout,
                ncols,
                T::one(),
                wt,
                Strides::transposed(kdim),
                &gob[od0 * plane..],
                Strides(ov as isize, 1),
                T::zero(),
                &mut cols,
                Strides::row_major(ncols),
            );
            col2im(g, &cols, od0, od1, gxb);
        }
    }
}
