use crate::error::{Error, Result};
use crate::tensor::Real;

/// Output extents of a max pool; errors when the kernel exceeds an extent.
pub fn pooled_dims(dims: [usize; 3], kernel: usize, stride: usize) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for ax in 0..3 {
        if kernel > dims[ax] || kernel == 0 || stride == 0 {
            return Err(Error::KernelTooLarge {
                op: "maxpool3d",
                axis: ax + 2,
                kernel,
                extent: dims[ax],
            });
        }
        out[ax] = (dims[ax] - kernel) / stride + 1;
    }
    Ok(out)
}

/// Windowed maximum over `[planes, d, h, w]`. Returns values and the flat
/// source index of each maximum; ties keep the first index in row-major scan.
pub fn maxpool3d<T: Real>(
    x: &[T],
    planes: usize,
    dims: [usize; 3],
    out_dims: [usize; 3],
    kernel: usize,
    stride: usize,
) -> (Vec<T>, Vec<usize>) {
    let [d, h, w] = dims;
    let [od, oh, ow] = out_dims;
    let n = planes * od * oh * ow;
    let mut vals = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for p in 0..planes {
        let base = p * d * h * w;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_i = usize::MAX;
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let i = base
                                    + ((z * stride + kd) * h + y * stride + kh) * w
                                    + xx * stride
                                    + kw;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (vals, arg)
}
