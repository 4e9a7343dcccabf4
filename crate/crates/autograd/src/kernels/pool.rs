use super::conv::out_extent;
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolCfg {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding }
    }

    fn out(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_extent(h, self.kernel, self.stride, self.padding, 1),
            out_extent(w, self.kernel, self.stride, self.padding, 1),
        )
    }
}

/// Marks an output whose maximum came from the zero padding.
pub const PAD_ARGMAX: u32 = u32::MAX;

/// Max pooling where padded positions contribute the value zero.
///
/// Returns the output and, per output element, the in-plane index of the
/// winning input (or [`PAD_ARGMAX`]).
pub fn max_pool_forward<F: Scalar>(x: &Tensor<F>, cfg: &PoolCfg) -> (Tensor<F>, Vec<u32>) {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = cfg.out(h, w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![PAD_ARGMAX; n * c * ho * wo];
    let (k, s, pad) = (cfg.kernel, cfg.stride, cfg.padding);
    // clipped window bounds along one axis
    let span = |o: usize, len: usize| {
        let lo = (o * s).saturating_sub(pad);
        let hi = (o * s + k).saturating_sub(pad).min(len);
        (lo, hi, o * s < pad || (o * s + k).saturating_sub(pad) > len)
    };
    let xs = x.data();
    let od = out.data_mut();
    for plane_idx in 0..n * c {
        let plane = &xs[plane_idx * h * w..(plane_idx + 1) * h * w];
        let base = plane_idx * ho * wo;
        for oy in 0..ho {
            let (y0, y1, ypad) = span(oy, h);
            for ox in 0..wo {
                let (x0, x1, xpad) = span(ox, w);
                let mut best = F::neg_infinity();
                let mut best_idx = PAD_ARGMAX;
                for iy in y0..y1 {
                    let row = &plane[iy * w..(iy + 1) * w];
                    for (ix, &v) in row[x0..x1].iter().enumerate() {
                        if v > best {
                            best = v;
                            best_idx = (iy * w + x0 + ix) as u32;
                        }
                    }
                }
                if (ypad || xpad) && best < F::zero() {
                    best = F::zero();
                    best_idx = PAD_ARGMAX;
                }
                od[base + oy * wo + ox] = best;
                arg[base + oy * wo + ox] = best_idx;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward<F: Scalar>(x_shape: &[usize], argmax: &[u32], gout: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x_shape);
    let (_, _, h, w) = dx.dims4();
    let per_out = gout.len() / (x_shape[0] * x_shape[1]);
    for (o, (&a, &g)) in argmax.iter().zip(gout.data()).enumerate() {
        if a != PAD_ARGMAX {
            let plane = o / per_out;
            dx.data_mut()[plane * h * w + a as usize] += g;
        }
    }
    dx
}

/// Average pooling that divides by the number of in-bounds elements only.
pub fn avg_pool_forward<F: Scalar>(x: &Tensor<F>, cfg: &PoolCfg) -> Tensor<F> {
    let (n, c, h, w) = x.dims4();
    let (ho, wo) = cfg.out(h, w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for plane_idx in 0..n * c {
        let plane = &x.data()[plane_idx * h * w..(plane_idx + 1) * h * w];
        for oy in 0..ho {
            let (ylo, yhi) = window(oy, cfg, h);
            for ox in 0..wo {
                let (xlo, xhi) = window(ox, cfg, w);
                let mut acc = F::zero();
                for iy in ylo..yhi {
                    for ix in xlo..xhi {
                        acc += plane[iy * w + ix];
                    }
                }
                let count = ((yhi - ylo) * (xhi - xlo)) as f64;
                out.data_mut()[(plane_idx * ho + oy) * wo + ox] = acc / F::of(count);
            }
        }
    }
    out
}

pub fn avg_pool_backward<F: Scalar>(x_shape: &[usize], cfg: &PoolCfg, gout: &Tensor<F>) -> Tensor<F> {
    let mut dx = Tensor::zeros(x_shape);
    let (n, c, h, w) = dx.dims4();
    let (_, _, ho, wo) = gout.dims4();
    for plane_idx in 0..n * c {
        for oy in 0..ho {
            let (ylo, yhi) = window(oy, cfg, h);
            for ox in 0..wo {
                let (xlo, xhi) = window(ox, cfg, w);
                let count = ((yhi - ylo) * (xhi - xlo)) as f64;
                let g = gout.data()[(plane_idx * ho + oy) * wo + ox] / F::of(count);
                let plane = &mut dx.data_mut()[plane_idx * h * w..(plane_idx + 1) * h * w];
                for iy in ylo..yhi {
                    for ix in xlo..xhi {
                        plane[iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

#[inline]
fn window(o: usize, cfg: &PoolCfg, len: usize) -> (usize, usize) {
    let start = (o * cfg.stride) as isize - cfg.padding as isize;
    let lo = start.max(0) as usize;
    let hi = ((start + cfg.kernel as isize).min(len as isize)).max(0) as usize;
    (lo, hi)
}
