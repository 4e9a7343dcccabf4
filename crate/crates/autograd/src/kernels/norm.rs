use crate::{Scalar, Tensor};

/// Per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Biased variance, used for normalization.
    pub var: Vec<F>,
    pub inv_std: Vec<F>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

impl<F: Scalar> BatchStats<F> {
    /// Unbiased variance, the running-statistics convention.
    pub fn unbiased_var(&self, c: usize) -> F {
        if self.count > 1 {
            self.var[c] * F::of(self.count as f64 / (self.count - 1) as f64)
        } else {
            self.var[c]
        }
    }
}

/// `(batch, channels, elements per channel plane)`.
fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

pub fn batch_norm_train<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    eps: f64,
) -> (Tensor<F>, BatchStats<F>) {
    let (n, c, inner) = channel_layout(x.shape());
    let count = n * inner;
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            let plane = &x.data()[(b * c + ch) * inner..][..inner];
            s += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0f64;
        for b in 0..n {
            let plane = &x.data()[(b * c + ch) * inner..][..inner];
            ss += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
        }
        mean[ch] = F::of(m);
        var[ch] = F::of(ss / count as f64);
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            let src = &x.data()[off..off + inner];
            let dst = &mut y.data_mut()[off..off + inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * scale + shift;
            }
        }
    }
    (y, BatchStats { mean, var, inv_std, count })
}

/// Returns `(dx, dgamma, dbeta)` for a training-mode batch norm.
pub fn batch_norm_train_backward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    stats: &BatchStats<F>,
    gout: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let (n, c, inner) = channel_layout(x.shape());
    let m = F::of(stats.count as f64);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let (mu, inv) = (stats.mean[ch], stats.inv_std[ch]);
        let mut sum_g = F::zero();
        let mut sum_gx = F::zero();
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for (&g, &xv) in gout.data()[off..off + inner].iter().zip(&x.data()[off..off + inner]) {
                sum_g += g;
                sum_gx += g * (xv - mu) * inv;
            }
        }
        dgamma[ch] = sum_gx;
        dbeta[ch] = sum_g;
        let k = gamma[ch] * inv / m;
        for b in 0..n {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                let xhat = (x.data()[i] - mu) * inv;
                dx.data_mut()[i] = k * (m * gout.data()[i] - sum_g - xhat * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn batch_norm_eval<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
    eps: f64,
) -> Tensor<F> {
    let (n, c, inner) = channel_layout(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let scale = gamma[ch] / (running_var[ch] + F::of(eps)).sqrt();
            let shift = beta[ch] - running_mean[ch] * scale;
            for i in off..off + inner {
                y.data_mut()[i] = x.data()[i] * scale + shift;
            }
        }
    }
    y
}
