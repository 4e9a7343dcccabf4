//! First-order optimizers over a [`ParamStore`].
//!
//! Only trainable parameters that received a gradient since the last
//! `zero_grad` are touched, so weight decay never moves unused weights.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::{ParamId, ParamKind, ParamStore, Scalar};

pub trait Optimizer<F: Scalar> {
    fn step(&mut self, store: &mut ParamStore<F>);
    fn lr(&self) -> f64;
    fn set_lr(&mut self, lr: f64);
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<ParamId, Vec<F>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, buffers: HashMap::new() }
    }
}

impl<F: Scalar> Optimizer<F> for Sgd<F> {
    fn step(&mut self, store: &mut ParamStore<F>) {
        let (lr, m, wd) = (F::of(self.lr), F::of(self.momentum), F::of(self.weight_decay));
        for (id, p) in store.iter_mut() {
            if p.kind != ParamKind::Trainable || !p.has_grad {
                continue;
            }
            let first = !self.buffers.contains_key(&id);
            let buf = self.buffers.entry(id).or_insert_with(|| vec![F::zero(); p.value.len()]);
            let grad = p.grad.data();
            for ((w, &g), b) in p.value.data_mut().iter_mut().zip(grad).zip(buf.iter_mut()) {
                let d = g + wd * *w;
                *b = if first { d } else { m * *b + d };
                *w -= lr * *b;
            }
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    state: HashMap<ParamId, (u64, Vec<F>, Vec<F>)>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64) -> Self {
        Self { lr, beta1: betas.0, beta2: betas.1, eps: 1e-8, weight_decay, state: HashMap::new() }
    }
}

impl<F: Scalar> Optimizer<F> for Adam<F> {
    fn step(&mut self, store: &mut ParamStore<F>) {
        for (id, p) in store.iter_mut() {
            if p.kind != ParamKind::Trainable || !p.has_grad {
                continue;
            }
            let n = p.value.len();
            let (t, m, v) = self.state.entry(id).or_insert_with(|| (0, vec![F::zero(); n], vec![F::zero(); n]));
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
            let step = F::of(self.lr / bc1);
            let bc2_sqrt = F::of(bc2.sqrt());
            let eps = F::of(self.eps);
            let wd = F::of(self.weight_decay);
            let grad = p.grad.data();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i] + wd * *w;
                m[i] = b1 * m[i] + (F::one() - b1) * g;
                v[i] = b2 * v[i] + (F::one() - b2) * g * g;
                *w -= step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
    }

    fn lr(&self) -> f64 {
        self.lr
    }

    fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }
}

/// Cosine annealing from `base` at `epoch = 0` to `min` at `epoch = total`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch.min(total) as f64 / total as f64;
    min + 0.5 * (base - min) * (1.0 + (PI * t).cos())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable && p.has_grad)
        .map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = F::of(max_norm / (total + 1e-6));
        for (_, p) in store.iter_mut() {
            if p.kind == ParamKind::Trainable && p.has_grad {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
    }
    total
}
