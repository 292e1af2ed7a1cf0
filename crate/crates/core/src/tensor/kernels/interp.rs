//! Align-corners trilinear resampling over the last three axes.

use crate::tensor::Real;

#[derive(Debug, Clone)]
struct AxisMap<T> {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<T>,
}

fn axis_map<T: Real>(src: usize, dst: usize) -> AxisMap<T> {
    let mut m = AxisMap {
        lo: Vec::with_capacity(dst),
        hi: Vec::with_capacity(dst),
        frac: Vec::with_capacity(dst),
    };
    for o in 0..dst {
        let pos = if src == 1 || dst == 1 {
            0.0
        } else {
            o as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        m.lo.push(lo);
        m.hi.push(hi);
        m.frac.push(T::lit(pos - lo as f64));
    }
    m
}

pub struct Trilinear<T> {
    src: [usize; 3],
    dst: [usize; 3],
    axes: [AxisMap<T>; 3],
}

impl<T: Real> Trilinear<T> {
    pub fn new(src: [usize; 3], dst: [usize; 3]) -> Self {
        Trilinear {
            src,
            dst,
            axes: [
                axis_map(src[0], dst[0]),
                axis_map(src[1], dst[1]),
                axis_map(src[2], dst[2]),
            ],
        }
    }

    /// Visits the eight weighted corners of every output voxel.
    fn visit(&self, planes: usize, mut f: impl FnMut(usize, usize, T)) {
        let [_, sh, sw] = self.src;
        let [dd, dh, dw] = self.dst;
        let sv = self.src.iter().product::<usize>();
        let dv = dd * dh * dw;
        let [az, ay, ax] = &self.axes;
        for p in 0..planes {
            for z in 0..dd {
                let (z0, z1, fz) = (az.lo[z], az.hi[z], az.frac[z]);
                for y in 0..dh {
                    let (y0, y1, fy) = (ay.lo[y], ay.hi[y], ay.frac[y]);
                    for x in 0..dw {
                        let (x0, x1, fx) = (ax.lo[x], ax.hi[x], ax.frac[x]);
                        let o = p * dv + (z * dh + y) * dw + x;
                        let one = T::one();
                        for (zi, wz) in [(z0, one - fz), (z1, fz)] {
                            for (yi, wy) in [(y0, one - fy), (y1, fy)] {
                                for (xi, wx) in [(x0, one - fx), (x1, fx)] {
                                    let wgt = wz * wy * wx;
                                    if wgt != T::zero() {
                                        f(o, p * sv + (zi * sh + yi) * sw + xi, wgt);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[T], planes: usize) -> Vec<T> {
        let mut out = vec![T::zero(); planes * self.dst.iter().product::<usize>()];
        self.visit(planes, |o, i, w| out[o] += w * x[i]);
        out
    }

    pub fn backward(&self, gout: &[T], planes: usize, gx: &mut [T]) {
        self.visit(planes, |o, i, w| gx[i] += w * gout[o]);
    }
}
