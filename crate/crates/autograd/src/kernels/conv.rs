//! 2-D convolution: dense (`groups == 1`, im2col + gemm) and depthwise
//! (`groups == channels`, direct loops).

use crate::scalar::{matmul, Layout};
use crate::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Default for Conv2dCfg {
    fn default() -> Self {
        Self { stride: (1, 1), padding: (0, 0), dilation: (1, 1), groups: 1 }
    }
}

impl Conv2dCfg {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride: (stride, stride), padding: (padding, padding), ..Self::default() }
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = (dilation, dilation);
        self
    }

    pub fn grouped(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

/// Output extent of a sliding window along one axis.
pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let span = dilation * (kernel - 1) + 1;
    assert!(input + 2 * pad >= span, "window {span} larger than padded input {}", input + 2 * pad);
    (input + 2 * pad - span) / stride + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cfg: Conv2dCfg,
}

impl Geometry {
    fn new<F: Scalar>(x: &Tensor<F>, weight: &Tensor<F>, cfg: &Conv2dCfg) -> Self {
        let (n, cin, h, w) = x.dims4();
        let (cout, cin_g, kh, kw) = weight.dims4();
        if cfg.groups == 1 {
            assert_eq!(cin, cin_g, "conv input channels {cin} vs weight {cin_g}");
        } else {
            assert!(
                cfg.groups == cin && cout == cin && cin_g == 1,
                "only dense or depthwise (multiplier 1) convolutions are supported"
            );
        }
        let ho = out_extent(h, kh, cfg.stride.0, cfg.padding.0, cfg.dilation.0);
        let wo = out_extent(w, kw, cfg.stride.1, cfg.padding.1, cfg.dilation.1);
        Self { n, cin, h, w, cout, kh, kw, ho, wo, cfg: *cfg }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.cfg.stride == (1, 1)
            && self.cfg.padding == (0, 0)
    }

    /// Range of output indices `o` for which `o*stride + k*dil - pad` lies in `[0, len)`.
    #[inline]
    fn valid(len: usize, out: usize, k: usize, stride: usize, pad: usize, dil: usize) -> (usize, usize) {
        let off = (k * dil) as isize - pad as isize;
        // o*stride + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) as usize).div_ceil(stride) };
        // o*stride + off <= len - 1
        let top = len as isize - 1 - off;
        let hi = if top < 0 { 0 } else { (top as usize / stride + 1).min(out) };
        (lo.min(hi), hi)
    }
}

/// `dst[i] = src[i * stride]`.
#[inline]
fn gather<F: Scalar>(dst: &mut [F], src: &[F], stride: usize) {
    if stride == 1 {
        dst.copy_from_slice(&src[..dst.len()]);
    } else {
        dst.iter_mut().zip(src.iter().step_by(stride)).for_each(|(d, s)| *d = *s);
    }
}

/// `dst[i] += a * src[i * stride]`.
#[inline]
fn gather_axpy<F: Scalar>(dst: &mut [F], src: &[F], stride: usize, a: F) {
    if stride == 1 {
        let n = dst.len();
        dst.iter_mut().zip(&src[..n]).for_each(|(d, s)| *d += a * *s);
    } else {
        dst.iter_mut().zip(src.iter().step_by(stride)).for_each(|(d, s)| *d += a * *s);
    }
}

/// `dst[i * stride] += a * src[i]`.
#[inline]
fn scatter_add<F: Scalar>(dst: &mut [F], src: &[F], stride: usize, a: F) {
    if stride == 1 {
        dst[..src.len()].iter_mut().zip(src).for_each(|(d, s)| *d += a * *s);
    } else {
        dst.iter_mut().step_by(stride).zip(src).for_each(|(d, s)| *d += a * *s);
    }
}

/// `sum_i a[i] * b[i * stride]`.
#[inline]
fn strided_dot<F: Scalar>(a: &[F], b: &[F], stride: usize) -> F {
    if stride == 1 {
        a.iter().zip(&b[..a.len()]).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
    } else {
        a.iter().zip(b.iter().step_by(stride)).fold(F::zero(), |acc, (x, y)| acc + *x * *y)
    }
}

fn im2col<F: Scalar>(g: &Geometry, x: &[F], col: &mut [F]) {
    let p = g.ho * g.wo;
    let (sh, sw) = g.cfg.stride;
    let (ph, pw) = g.cfg.padding;
    let (dh, dw) = g.cfg.dilation;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = Geometry::valid(g.h, g.ho, ki, sh, ph, dh);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                let (xlo, xhi) = Geometry::valid(g.w, g.wo, kj, sw, pw, dw);
                for oy in 0..g.ho {
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if oy < ylo || oy >= yhi {
                        out_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let iy = oy * sh + ki * dh - ph;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..xlo].iter_mut().for_each(|v| *v = F::zero());
                    out_row[xhi..].iter_mut().for_each(|v| *v = F::zero());
                    let start = xlo * sw + kj * dw - pw;
                    gather(&mut out_row[xlo..xhi], &src[start..], sw);
                }
            }
        }
    }
}

fn col2im<F: Scalar>(g: &Geometry, col: &[F], dx: &mut [F]) {
    let p = g.ho * g.wo;
    let (sh, sw) = g.cfg.stride;
    let (ph, pw) = g.cfg.padding;
    let (dh, dw) = g.cfg.dilation;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = Geometry::valid(g.h, g.ho, ki, sh, ph, dh);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                let (xlo, xhi) = Geometry::valid(g.w, g.wo, kj, sw, pw, dw);
                for oy in ylo..yhi {
                    let iy = oy * sh + ki * dh - ph;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * g.wo..(oy + 1) * g.wo];
                    if xlo < xhi {
                        let start = xlo * sw + kj * dw - pw;
                        scatter_add(&mut dst[start..], &s[xlo..xhi], sw, F::one());
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    cfg: &Conv2dCfg,
) -> Tensor<F> {
    let g = Geometry::new(x, weight, cfg);
    let p = g.ho * g.wo;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.ho, g.wo]);
    if cfg.groups == 1 {
        let k = g.cin * g.kh * g.kw;
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
        for n in 0..g.n {
            let xs = x.sample(n);
            let os = &mut out.data_mut()[n * g.cout * p..(n + 1) * g.cout * p];
            let rhs: &[F] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut col);
                &col
            };
            matmul(g.cout, k, p, weight.data(), Layout::Normal, rhs, Layout::Normal, os, F::zero());
        }
    } else {
        depthwise_forward(&g, x.data(), weight.data(), out.data_mut());
    }
    if let Some(b) = bias {
        let bd = b.data();
        // planes enumerate (n, c) in order
        for (idx, plane) in out.data_mut().chunks_mut(p).enumerate() {
            let c = idx % g.cout;
            plane.iter_mut().for_each(|v| *v += bd[c]);
        }
    }
    out
}

fn depthwise_forward<F: Scalar>(g: &Geometry, x: &[F], w: &[F], out: &mut [F]) {
    let (sh, sw) = g.cfg.stride;
    let (ph, pw) = g.cfg.padding;
    let (dh, dw) = g.cfg.dilation;
    let kk = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let o = &mut out[(n * g.cin + c) * g.ho * g.wo..][..g.ho * g.wo];
            let wc = &w[c * kk..(c + 1) * kk];
            for ki in 0..g.kh {
                let (ylo, yhi) = Geometry::valid(g.h, g.ho, ki, sh, ph, dh);
                for kj in 0..g.kw {
                    let wv = wc[ki * g.kw + kj];
                    let (xlo, xhi) = Geometry::valid(g.w, g.wo, kj, sw, pw, dw);
                    for oy in ylo..yhi {
                        let iy = oy * sh + ki * dh - ph;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let dst = &mut o[oy * g.wo..(oy + 1) * g.wo];
                        if xlo < xhi {
                            let start = xlo * sw + kj * dw - pw;
                            gather_axpy(&mut dst[xlo..xhi], &src[start..], sw, wv);
                        }
                    }
                }
            }
        }
    }
}

/// `(dx, dweight, dbias)`.
pub type ConvGrads<F> = (Option<Tensor<F>>, Option<Tensor<F>>, Option<Tensor<F>>);

/// Gradients of a convolution, each computed only when requested.
pub fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    weight: &Tensor<F>,
    cfg: &Conv2dCfg,
    gout: &Tensor<F>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<F> {
    let g = Geometry::new(x, weight, cfg);
    let p = g.ho * g.wo;
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let db = need_db.then(|| {
        let mut db = Tensor::zeros(&[g.cout]);
        for (idx, plane) in gout.data().chunks(p).enumerate() {
            db.data_mut()[idx % g.cout] += plane.iter().copied().sum::<F>();
        }
        db
    });
    if cfg.groups == 1 {
        let k = g.cin * g.kh * g.kw;
        let pointwise = g.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![F::zero(); k * p] };
        let mut dcol = if pointwise || !need_dx { Vec::new() } else { vec![F::zero(); k * p] };
        for n in 0..g.n {
            let go = gout.sample(n);
            if let Some(dw) = dw.as_mut() {
                let rhs: &[F] = if pointwise {
                    x.sample(n)
                } else {
                    im2col(&g, x.sample(n), &mut col);
                    &col
                };
                // dW (cout x k) += gout (cout x p) · col^T (p x k)
                matmul(g.cout, p, k, go, Layout::Normal, rhs, Layout::Transposed, dw.data_mut(), F::one());
            }
            if let Some(dx) = dx.as_mut() {
                let per = g.cin * g.h * g.w;
                let dxs = &mut dx.data_mut()[n * per..(n + 1) * per];
                if pointwise {
                    matmul(k, g.cout, p, weight.data(), Layout::Transposed, go, Layout::Normal, dxs, F::one());
                } else {
                    matmul(k, g.cout, p, weight.data(), Layout::Transposed, go, Layout::Normal, &mut dcol, F::zero());
                    col2im(&g, &dcol, dxs);
                }
            }
        }
    } else {
        depthwise_backward(&g, x.data(), weight.data(), gout.data(), dx.as_mut(), dw.as_mut());
    }
    (dx, dw, db)
}

fn depthwise_backward<F: Scalar>(
    g: &Geometry,
    x: &[F],
    w: &[F],
    gout: &[F],
    mut dx: Option<&mut Tensor<F>>,
    mut dw: Option<&mut Tensor<F>>,
) {
    let (sh, sw) = g.cfg.stride;
    let (ph, pw) = g.cfg.padding;
    let (dh, dwl) = g.cfg.dilation;
    let kk = g.kh * g.kw;
    for n in 0..g.n {
        for c in 0..g.cin {
            let base_in = (n * g.cin + c) * g.h * g.w;
            let base_out = (n * g.cin + c) * g.ho * g.wo;
            let go = &gout[base_out..base_out + g.ho * g.wo];
            for ki in 0..g.kh {
                let (ylo, yhi) = Geometry::valid(g.h, g.ho, ki, sh, ph, dh);
                for kj in 0..g.kw {
                    let (xlo, xhi) = Geometry::valid(g.w, g.wo, kj, sw, pw, dwl);
                    let widx = c * kk + ki * g.kw + kj;
                    if let Some(dw) = dw.as_deref_mut() {
                        let plane = &x[base_in..base_in + g.h * g.w];
                        let mut acc = F::zero();
                        for oy in ylo..yhi {
                            let iy = oy * sh + ki * dh - ph;
                            let src = &plane[iy * g.w..(iy + 1) * g.w];
                            let gr = &go[oy * g.wo..(oy + 1) * g.wo];
                            if xlo < xhi {
                                let start = xlo * sw + kj * dwl - pw;
                                acc += strided_dot(&gr[xlo..xhi], &src[start..], sw);
                            }
                        }
                        dw.data_mut()[widx] += acc;
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let wv = w[widx];
                        let plane = &mut dx.data_mut()[base_in..base_in + g.h * g.w];
                        for oy in ylo..yhi {
                            let iy = oy * sh + ki * dh - ph;
                            let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                            let gr = &go[oy * g.wo..(oy + 1) * g.wo];
                            if xlo < xhi {
                                let start = xlo * sw + kj * dwl - pw;
                                scatter_add(&mut dst[start..], &gr[xlo..xhi], sw, wv);
                            }
                        }
                    }
                }
            }
        }
    }
}
