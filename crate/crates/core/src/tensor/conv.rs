// Convolution and pooling geometry. Rank-2 inputs are lifted to rank 3 with
// a unit depth axis so one im2col path serves both.

use serde::{Deserialize, Serialize};

use super::Real;
use crate::error::{dim_err, Result};

/// Stride and padding of a cross-correlation, uniform across spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub rank: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(rank: usize, stride: usize, padding: usize) -> Self {
        ConvSpec {
            rank,
            stride,
            padding,
        }
    }
}

/// Per-axis extents in (depth, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Geom3 {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl Geom3 {
    pub fn build(
        rank: usize,
        spatial: &[usize],
        kernel: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if rank != 2 && rank != 3 {
            return Err(dim_err!("spatial rank must be 2 or 3, got {rank}"));
        }
        if spatial.len() != rank || kernel.len() != rank {
            return Err(dim_err!(
                "input spatial extents {spatial:?} and kernel {kernel:?} must both have rank {rank}"
            ));
        }
        if stride == 0 {
            return Err(dim_err!("stride must be positive"));
        }
        let lift = |v: &[usize], fill: usize| -> [usize; 3] {
            if rank == 2 {
                [fill, v[0], v[1]]
            } else {
                [v[0], v[1], v[2]]
            }
        };
        let input = lift(spatial, 1);
        let kernel3 = lift(kernel, 1);
        let pad3 = if rank == 2 { [0, pad, pad] } else { [pad; 3] };
        let stride3 = if rank == 2 {
            [1, stride, stride]
        } else {
            [stride; 3]
        };
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad3[a];
            if kernel3[a] == 0 || kernel3[a] > padded {
                return Err(dim_err!(
                    "kernel {kernel:?} larger than padded input {spatial:?} (padding {pad})"
                ));
            }
            output[a] = (padded - kernel3[a]) / stride3[a] + 1;
        }
        Ok(Geom3 {
            input,
            kernel: kernel3,
            stride: stride3,
            pad: pad3,
            output,
        })
    }

    pub fn out_spatial(&self, rank: usize) -> Vec<usize> {
        self.output[3 - rank..].to_vec()
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    pub fn kernel_len(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Range of output positions `o` along one axis for which
/// `o * stride + k - pad` falls inside `[0, extent)`.
fn valid_range(out: usize, stride: usize, k: usize, pad: usize, extent: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k < extent + pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let limit = extent + pad;
    let hi = if k >= limit {
        0
    } else {
        ((limit - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[C, D, H, W]` into a `[C*kd*kh*kw, od*oh*ow]` matrix.
pub(crate) fn im2col<F: Real>(x: &[F], channels: usize, g: &Geom3, cols: &mut [F]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let l = od * oh * ow;
    for c in 0..channels {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (z0, z1) = valid_range(od, g.stride[0], a, g.pad[0], d);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, g.stride[1], b, g.pad[1], h);
                for e in 0..kw {
                    let (x0, x1) = valid_range(ow, g.stride[2], e, g.pad[2], w);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let dst = &mut cols[row * l..(row + 1) * l];
                    dst.fill(F::zero());
                    for z in z0..z1 {
                        let iz = z * g.stride[0] + a - g.pad[0];
                        for y in y0..y1 {
                            let iy = y * g.stride[1] + b - g.pad[1];
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let out = &mut dst[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let sx = g.stride[2];
                            for xo in x0..x1 {
                                out[xo] = src[xo * sx + e - g.pad[2]];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx`.
pub(crate) fn col2im<F: Real>(cols: &[F], channels: usize, g: &Geom3, dx: &mut [F]) {
    let [d, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    let l = od * oh * ow;
    for c in 0..channels {
        let xc = &mut dx[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            let (z0, z1) = valid_range(od, g.stride[0], a, g.pad[0], d);
            for b in 0..kh {
                let (y0, y1) = valid_range(oh, g.stride[1], b, g.pad[1], h);
                for e in 0..kw {
                    let (x0, x1) = valid_range(ow, g.stride[2], e, g.pad[2], w);
                    let row = ((c * kd + a) * kh + b) * kw + e;
                    let src = &cols[row * l..(row + 1) * l];
                    for z in z0..z1 {
                        let iz = z * g.stride[0] + a - g.pad[0];
                        for y in y0..y1 {
                            let iy = y * g.stride[1] + b - g.pad[1];
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let col = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            let sx = g.stride[2];
                            for xo in x0..x1 {
                                dst[xo * sx + e - g.pad[2]] += col[xo];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Flat input offsets of the maxima of every pooling window of one channel
/// plane. Ties resolve to the first (lowest flat index) maximum.
pub(crate) fn pool_argmax<F: Real>(plane: &[F], g: &Geom3, out: &mut Vec<usize>) {
    let [_, h, w] = g.input;
    let [kd, kh, kw] = g.kernel;
    let [od, oh, ow] = g.output;
    for z in 0..od {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = usize::MAX;
                let mut best_val = F::neg_infinity();
                for a in 0..kd {
                    let iz = z * g.stride[0] + a;
                    for b in 0..kh {
                        let iy = y * g.stride[1] + b;
                        for e in 0..kw {
                            let ix = x * g.stride[2] + e;
                            let idx = (iz * h + iy) * w + ix;
                            let v = plane[idx];
                            if best == usize::MAX || v > best_val {
                                best = idx;
                                best_val = v;
                            }
                        }
                    }
                }
                out.push(best);
            }
        }
    }
}
