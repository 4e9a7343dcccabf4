//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough context to
//! push gradients back to its inputs. A node requires gradient iff one of its
//! inputs does; nodes that do not are stored as plain constants, so frozen
//! sub-graphs cost nothing in [`Tape::backward`].

use crate::kernels::conv::{self, Conv2dCfg};
use crate::kernels::norm::{self, BatchStats};
use crate::kernels::pool::{self, PoolCfg};
use crate::scalar::{matmul, Layout};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Relu6,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Swish,
}

enum Op<F> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg },
    BnTrain { x: Var, gamma: Var, beta: Var, stats: BatchStats<F> },
    BnEval { x: Var, gamma: Var, beta: Var, mean: Vec<F>, inv_std: Vec<F> },
    Act { x: Var, kind: Activation },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, cfg: PoolCfg },
    Lin { terms: Vec<(Var, F)> },
    Mix { xs: Vec<Var>, w: Var },
    Softmax { x: Var },
    Concat { xs: Vec<Var> },
    Crop { x: Var, offset: usize },
    GlobalAvgPool { x: Var },
    SumAll { x: Var },
    Reshape { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    ChannelScale { x: Var, s: Var },
    SampleScale { x: Var, scale: Vec<F> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
    SoftTarget { student: Var, teacher: Var, temperature: F, p: Vec<F>, q: Vec<F>, kl: Vec<F> },
}

impl<F> Op<F> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::BnTrain { x, gamma, beta, .. } | Op::BnEval { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Act { x, .. }
            | Op::MaxPool { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Softmax { x }
            | Op::Crop { x, .. }
            | Op::GlobalAvgPool { x }
            | Op::SumAll { x }
            | Op::Reshape { x }
            | Op::SampleScale { x, .. } => vec![*x],
            Op::Lin { terms } => terms.iter().map(|t| t.0).collect(),
            Op::Mix { xs, w } => {
                let mut v = xs.clone();
                v.push(*w);
                v
            }
            Op::Concat { xs } => xs.clone(),
            Op::ChannelScale { x, s } => vec![*x, *s],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::SoftTarget { student, teacher, .. } => vec![*student, *teacher],
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], available for leaf nodes.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, cfg: Conv2dCfg) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &cfg);
        self.push(out, Op::Conv { x, w, b, cfg })
    }

    /// Training-mode batch norm; also returns the batch statistics so the
    /// caller can maintain running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, BatchStats<F>) {
        let (y, stats) = norm::batch_norm_train(self.value(x), self.value(gamma).data(), self.value(beta).data(), eps);
        let out = self.push(y, Op::BnTrain { x, gamma, beta, stats: stats.clone() });
        (out, stats)
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Var {
        let y = norm::batch_norm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            running_mean,
            running_var,
            eps,
        );
        let inv_std = running_var.iter().map(|&v| F::one() / (v + F::of(eps)).sqrt()).collect();
        self.push(y, Op::BnEval { x, gamma, beta, mean: running_mean.to_vec(), inv_std })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let y = match kind {
            Activation::Relu => xv.map(|v| v.max(F::zero())),
            Activation::Relu6 => xv.map(|v| v.max(F::zero()).min(F::of(6.0))),
            Activation::LeakyRelu(slope) => xv.map(|v| if v > F::zero() { v } else { v * F::of(slope) }),
            Activation::Sigmoid => xv.map(sigmoid),
            Activation::Tanh => xv.map(|v| v.tanh()),
            Activation::Swish => xv.map(|v| v * sigmoid(v)),
        };
        self.push(y, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn max_pool(&mut self, x: Var, cfg: PoolCfg) -> Var {
        let (y, argmax) = pool::max_pool_forward(self.value(x), &cfg);
        self.push(y, Op::MaxPool { x, argmax })
    }

    pub fn avg_pool(&mut self, x: Var, cfg: PoolCfg) -> Var {
        let y = pool::avg_pool_forward(self.value(x), &cfg);
        self.push(y, Op::AvgPool { x, cfg })
    }

    /// `Σ coef_i · x_i` over same-shaped inputs.
    pub fn linear_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty(), "empty linear combination");
        let shape = self.value(terms[0].0).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for &(v, c) in terms {
            let x = self.value(v);
            assert_eq!(x.shape(), &shape[..], "linear_comb shape mismatch");
            out.axpy(F::of(c), x);
        }
        let terms = terms.iter().map(|&(v, c)| (v, F::of(c))).collect();
        self.push(out, Op::Lin { terms })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.linear_comb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sum(&mut self, xs: &[Var]) -> Var {
        let terms: Vec<(Var, f64)> = xs.iter().map(|&v| (v, 1.0)).collect();
        self.linear_comb(&terms)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.linear_comb(&[(x, c)])
    }

    /// `Σ w[i] · x_i` where `w` is a rank-1 node of length `xs.len()`.
    pub fn mix(&mut self, xs: &[Var], w: Var) -> Var {
        let wv = self.value(w);
        assert_eq!(wv.len(), xs.len(), "mixture weight length {} vs {} inputs", wv.len(), xs.len());
        let shape = self.value(xs[0]).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        let weights = wv.data().to_vec();
        for (&x, &wi) in xs.iter().zip(&weights) {
            let xv = self.value(x);
            assert_eq!(xv.shape(), &shape[..], "mixture input shape mismatch");
            out.axpy(wi, xv);
        }
        self.push(out, Op::Mix { xs: xs.to_vec(), w })
    }

    /// Softmax over all elements of `x` (used on rank-1 vectors).
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = softmax_slice(self.value(x).data());
        let shape = self.value(x).shape().to_vec();
        self.push(Tensor::from_vec(&shape, y).expect("softmax keeps shape"), Op::Softmax { x })
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "empty concat");
        let first = self.value(xs[0]).shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for &x in xs {
            let s = self.value(x).shape();
            assert!(s[0] == n && s[2..] == first[2..], "concat shape mismatch {s:?} vs {first:?}");
            total_c += s[1];
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let mut out = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &x in xs {
                let v = self.value(x);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        self.push(Tensor::from_vec(&shape, out).expect("concat length"), Op::Concat { xs: xs.to_vec() })
    }

    /// `x[:, :, offset:, offset:]`.
    pub fn crop(&mut self, x: Var, offset: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h - offset, w - offset);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for y in offset..h {
                let row = &xv[(plane * h + y) * w..(plane * h + y + 1) * w];
                out.extend_from_slice(&row[offset..]);
            }
        }
        self.push(Tensor::from_vec(&[n, c, ho, wo], out).expect("crop length"), Op::Crop { x, offset })
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let inner = h * w;
        let out: Vec<F> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|p| p.iter().copied().sum::<F>() / F::of(inner as f64))
            .collect();
        self.push(Tensor::from_vec(&[n, c], out).expect("gap length"), Op::GlobalAvgPool { x })
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let y = self.value(x).clone().reshape(shape).expect("reshape keeps element count");
        self.push(y, Op::Reshape { x })
    }

    /// `x (N, in) · wᵀ (in, out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, fin) = self.value(x).dims2();
        let (fout, fin_w) = self.value(w).dims2();
        assert_eq!(fin, fin_w, "linear input features {fin} vs weight {fin_w}");
        let mut out = Tensor::zeros(&[n, fout]);
        matmul(n, fin, fout, self.value(x).data(), Layout::Normal, self.value(w).data(), Layout::Transposed, out.data_mut(), F::zero());
        if let Some(b) = b {
            let bd = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(&bd) {
                    *o += bv;
                }
            }
        }
        self.push(out, Op::Linear { x, w, b })
    }

    /// `x[n, c, ..] * s[n, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(s).shape(), &[n, c], "channel scale shape");
        let inner = h * w;
        let sd = self.value(s).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, plane) in out.data_mut().chunks_mut(inner).enumerate() {
            plane.iter_mut().for_each(|v| *v *= sd[i]);
        }
        self.push(out, Op::ChannelScale { x, s })
    }

    /// Scales every sample `n` of a batch by the constant `scale[n]`.
    pub fn sample_scale(&mut self, x: Var, scale: Vec<F>) -> Var {
        let n = self.value(x).shape()[0];
        assert_eq!(scale.len(), n, "one scale per sample");
        let mut out = self.value(x).clone();
        let per = out.len() / n;
        for (chunk, &s) in out.data_mut().chunks_mut(per).zip(&scale) {
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::SampleScale { x, scale })
    }

    /// Mean cross entropy of `(N, classes)` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = self.value(logits).dims2();
        assert_eq!(labels.len(), n, "one label per row");
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0f64;
        for (row, &y) in self.value(logits).data().chunks(k).zip(labels) {
            assert!(y < k, "label {y} out of range for {k} classes");
            loss -= log_softmax_at(row, y);
            probs.extend(softmax_slice(row));
        }
        let value = Tensor::scalar(F::of(loss / n as f64));
        self.push(value, Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Temperature-scaled distillation term
    /// `(T²/N) Σ_i Σ_c p log(p/q)` with `p = softmax(teacher/T)`, `q = softmax(student/T)`.
    pub fn soft_target_ce(&mut self, student: Var, teacher: Var, temperature: f64) -> Var {
        let (n, k) = self.value(student).dims2();
        assert_eq!(self.value(teacher).shape(), &[n, k], "student/teacher logits shape");
        let (value, p, q, kl) = soft_target_parts(self.value(student).data(), self.value(teacher).data(), n, k, temperature);
        let op = Op::SoftTarget { student, teacher, temperature: F::of(temperature), p, q, kl };
        self.push(Tensor::scalar(F::of(value)), op)
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<F>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn need(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => grads[i] = Some(g),
            Op::Conv { x, w, b, cfg } => {
                let (dx, dw, db) = conv::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    cfg,
                    &g,
                    self.need(*x),
                    self.need(*w),
                    b.is_some_and(|b| self.need(b)),
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BnTrain { x, gamma, beta, stats } => {
                let gv = self.value(*gamma);
                let (dx, dgamma, dbeta) = norm::batch_norm_train_backward(self.value(*x), gv.data(), stats, &g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_vec(gv.shape(), dgamma).expect("gamma shape"));
                self.accumulate(grads, *beta, Tensor::from_vec(gv.shape(), dbeta).expect("beta shape"));
            }
            Op::BnEval { x, gamma, beta, mean, inv_std } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let c = mean.len();
                let inner = xv.len() / (xv.shape()[0] * c);
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                for (plane, (gp, xp)) in g.data().chunks(inner).zip(xv.data().chunks(inner)).enumerate() {
                    let ch = plane % c;
                    let scale = gv.data()[ch] * inv_std[ch];
                    let dxp = &mut dx.data_mut()[plane * inner..(plane + 1) * inner];
                    for ((d, &gi), &xi) in dxp.iter_mut().zip(gp).zip(xp) {
                        *d = gi * scale;
                        dgamma[ch] += gi * (xi - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gi;
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_vec(gv.shape(), dgamma).expect("gamma shape"));
                self.accumulate(grads, *beta, Tensor::from_vec(gv.shape(), dbeta).expect("beta shape"));
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let yv = &node.value;
                let zero = F::zero();
                let mut dx = g;
                let d = dx.data_mut();
                match *kind {
                    Activation::Relu => {
                        for (d, &xi) in d.iter_mut().zip(xv.data()) {
                            if xi <= zero {
                                *d = zero;
                            }
                        }
                    }
                    Activation::Relu6 => {
                        for (d, &xi) in d.iter_mut().zip(xv.data()) {
                            if xi <= zero || xi >= F::of(6.0) {
                                *d = zero;
                            }
                        }
                    }
                    Activation::LeakyRelu(slope) => {
                        for (d, &xi) in d.iter_mut().zip(xv.data()) {
                            if xi <= zero {
                                *d *= F::of(slope);
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for (d, &yi) in d.iter_mut().zip(yv.data()) {
                            *d *= yi * (F::one() - yi);
                        }
                    }
                    Activation::Tanh => {
                        for (d, &yi) in d.iter_mut().zip(yv.data()) {
                            *d *= F::one() - yi * yi;
                        }
                    }
                    Activation::Swish => {
                        for (d, &xi) in d.iter_mut().zip(xv.data()) {
                            let s = sigmoid(xi);
                            *d *= s * (F::one() + xi * (F::one() - s));
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let dx = pool::max_pool_backward(self.value(*x).shape(), argmax, &g);
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, cfg } => {
                let dx = pool::avg_pool_backward(self.value(*x).shape(), cfg, &g);
                self.accumulate(grads, *x, dx);
            }
            Op::Lin { terms } => {
                for &(v, c) in terms {
                    if self.need(v) {
                        let dv = if c == F::one() { g.clone() } else { g.map(|x| x * c) };
                        self.accumulate(grads, v, dv);
                    }
                }
            }
            Op::Mix { xs, w } => {
                let wv = self.value(*w).data();
                let mut dw = vec![F::zero(); xs.len()];
                for (k, &x) in xs.iter().enumerate() {
                    if self.need(*w) {
                        dw[k] = g.data().iter().zip(self.value(x).data()).map(|(&a, &b)| a * b).sum();
                    }
                    if self.need(x) {
                        let wk = wv[k];
                        self.accumulate(grads, x, g.map(|v| v * wk));
                    }
                }
                if self.need(*w) {
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::from_vec(&shape, dw).expect("mix weight shape"));
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let dot: F = y.iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                let dx = Tensor::from_fn(node.value.shape(), |k| y[k] * (g.data()[k] - dot));
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { xs } => {
                let shape = node.value.shape();
                let n = shape[0];
                let inner: usize = shape[2..].iter().product();
                let total_c = shape[1];
                let mut c_off = 0;
                for &x in xs {
                    let xs_shape = self.value(x).shape().to_vec();
                    let c = xs_shape[1];
                    if self.need(x) {
                        let mut dx = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let start = (b * total_c + c_off) * inner;
                            dx.extend_from_slice(&g.data()[start..start + c * inner]);
                        }
                        self.accumulate(grads, x, Tensor::from_vec(&xs_shape, dx).expect("concat grad"));
                    }
                    c_off += c;
                }
            }
            Op::Crop { x, offset } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let wo = w - offset;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for plane in 0..n * c {
                    for y in *offset..h {
                        let src = &g.data()[(plane * (h - offset) + y - offset) * wo..][..wo];
                        let dst = &mut dx.data_mut()[(plane * h + y) * w + offset..][..wo];
                        dst.copy_from_slice(src);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                let shape = self.value(*x).shape().to_vec();
                let inner = shape[2] * shape[3];
                let scale = F::one() / F::of(inner as f64);
                let gd = g.data();
                let dx = Tensor::from_fn(&shape, |i| gd[i / inner] * scale);
                self.accumulate(grads, *x, dx);
            }
            Op::SumAll { x } => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.reshape(&shape).expect("reshape grad"));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = self.value(*x).dims2();
                let fout = g.shape()[1];
                if self.need(*x) {
                    let mut dx = Tensor::zeros(&[n, fin]);
                    matmul(n, fout, fin, g.data(), Layout::Normal, self.value(*w).data(), Layout::Normal, dx.data_mut(), F::zero());
                    self.accumulate(grads, *x, dx);
                }
                if self.need(*w) {
                    let mut dw = Tensor::zeros(&[fout, fin]);
                    matmul(fout, n, fin, g.data(), Layout::Transposed, self.value(*x).data(), Layout::Normal, dw.data_mut(), F::zero());
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.need(*b) {
                        let mut db = Tensor::zeros(&[fout]);
                        for row in g.data().chunks(fout) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::ChannelScale { x, s } => {
                let xv = self.value(*x);
                let (_, _, h, w) = xv.dims4();
                let inner = h * w;
                let sd = self.value(*s).data();
                if self.need(*x) {
                    let mut dx = g.clone();
                    for (i, plane) in dx.data_mut().chunks_mut(inner).enumerate() {
                        plane.iter_mut().for_each(|v| *v *= sd[i]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.need(*s) {
                    let ds: Vec<F> = g
                        .data()
                        .chunks(inner)
                        .zip(xv.data().chunks(inner))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::from_vec(&shape, ds).expect("scale grad"));
                }
            }
            Op::SampleScale { x, scale } => {
                let mut dx = g;
                let per = dx.len() / scale.len();
                for (chunk, &s) in dx.data_mut().chunks_mut(per).zip(scale) {
                    chunk.iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g.item() / F::of(n as f64);
                let mut dl = Tensor::from_vec(&[n, k], probs.clone()).expect("probs shape");
                for (row, &y) in dl.data_mut().chunks_mut(k).zip(labels) {
                    row[y] -= F::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::SoftTarget { student, teacher, temperature, p, q, kl } => {
                let shape = self.value(*student).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.item() * *temperature / F::of(n as f64);
                if self.need(*student) {
                    let ds = Tensor::from_fn(&shape, |i| scale * (q[i] - p[i]));
                    self.accumulate(grads, *student, ds);
                }
                if self.need(*teacher) {
                    let dt = Tensor::from_fn(&shape, |i| {
                        let row = i / k;
                        let gap = p[i].ln() - q[i].ln();
                        scale * p[i] * (gap - kl[row])
                    });
                    self.accumulate(grads, *teacher, dt);
                }
            }
        }
    }
}

#[inline]
fn sigmoid<F: Scalar>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

fn log_softmax_at<F: Scalar>(row: &[F], y: usize) -> f64 {
    let m = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
    row[y].as_f64() - lse
}

/// Numerically stable softmax of a slice.
pub fn softmax_slice<F: Scalar>(x: &[F]) -> Vec<F> {
    let m = x.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Value and saved probabilities of the distillation term, computed in f64.
fn soft_target_parts<F: Scalar>(
    student: &[F],
    teacher: &[F],
    n: usize,
    k: usize,
    temperature: f64,
) -> (f64, Vec<F>, Vec<F>, Vec<F>) {
    let mut total = 0.0;
    let mut p_all = Vec::with_capacity(n * k);
    let mut q_all = Vec::with_capacity(n * k);
    let mut kl_all = Vec::with_capacity(n);
    for (s_row, t_row) in student.chunks(k).zip(teacher.chunks(k)) {
        let lp = log_softmax_scaled(t_row, temperature);
        let lq = log_softmax_scaled(s_row, temperature);
        let kl: f64 = lp.iter().zip(&lq).map(|(&a, &b)| a.exp() * (a - b)).sum();
        total += kl;
        kl_all.push(F::of(kl));
        p_all.extend(lp.iter().map(|v| F::of(v.exp())));
        q_all.extend(lq.iter().map(|v| F::of(v.exp())));
    }
    (temperature * temperature * total / n as f64, p_all, q_all, kl_all)
}

fn log_softmax_scaled<F: Scalar>(row: &[F], temperature: f64) -> Vec<f64> {
    let z: Vec<f64> = row.iter().map(|v| v.as_f64() / temperature).collect();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.into_iter().map(|v| v - lse).collect()
}

/// The distillation term on plain logits; see [`Tape::soft_target_ce`].
pub fn soft_target_ce_value<F: Scalar>(student: &Tensor<F>, teacher: &Tensor<F>, temperature: f64) -> f64 {
    let (n, k) = student.dims2();
    assert_eq!(teacher.shape(), student.shape(), "student/teacher logits shape");
    soft_target_parts(student.data(), teacher.data(), n, k, temperature).0
}
