//! Layer primitives shared by candidate operations, cells and heads.
//!
//! Parameters live in a [`ParamStore`]; layers only hold [`ParamId`]s. A
//! forward pass runs inside a [`Ctx`], which binds parameters onto the tape
//! on first use.

use icdarts_autograd::{
    Activation, Binding, Conv2dCfg, ParamId, ParamKind, ParamStore, PoolCfg, Scalar, Tape, Tensor, Var,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are refreshed only if `update_stats`.
    Train { update_stats: bool },
    /// Running statistics, no stochastic layers.
    Eval,
}

pub struct Ctx<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a mut ParamStore<F>,
    pub binding: &'a mut Binding,
    pub mode: Mode,
    pub rng: &'a mut ChaCha8Rng,
    /// Drop-path probability used by discrete cells while training.
    pub drop_prob: f64,
}

impl<F: Scalar> Ctx<'_, F> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.binding.bind(self.tape, self.store, id)
    }

    pub fn training(&self) -> bool {
        matches!(self.mode, Mode::Train { .. })
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Init<'a, F: Scalar> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Scalar> Init<'_, F> {
    /// He-uniform weights, bound `sqrt(6 / fan_in)`.
    pub fn conv_weight(&mut self, name: &str, cout: usize, cin_per_group: usize, kh: usize, kw: usize) -> ParamId {
        let fan_in = (cin_per_group * kh * kw) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[cout, cin_per_group, kh, kw], |_| F::of(self.rng.random_range(-bound..bound)));
        self.store.add(name, w, ParamKind::Trainable)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: (usize, usize), cfg: Conv2dCfg) -> Conv {
        let per_group = cin / cfg.groups;
        let weight = self.conv_weight(&format!("{name}.w"), cout, per_group, kernel.0, kernel.1);
        Conv { weight, bias: None, cfg }
    }

    pub fn batch_norm(&mut self, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: self.store.add(format!("{name}.gamma"), Tensor::ones(&[c]), ParamKind::Trainable),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Trainable),
            running_mean: self.store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            running_var: self.store.add(format!("{name}.running_var"), Tensor::ones(&[c]), ParamKind::Buffer),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` for weights and bias.
    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        let bound = 1.0 / (fin as f64).sqrt();
        let w = Tensor::from_fn(&[fout, fin], |_| F::of(self.rng.random_range(-bound..bound)));
        let b = Tensor::from_fn(&[fout], |_| F::of(self.rng.random_range(-bound..bound)));
        Linear {
            weight: self.store.add(format!("{name}.w"), w, ParamKind::Trainable),
            bias: self.store.add(format!("{name}.b"), b, ParamKind::Trainable),
        }
    }

    pub fn factorized_reduce(&mut self, name: &str, cin: usize, cout: usize) -> FactorizedReduce {
        let half = cout / 2;
        FactorizedReduce {
            a: self.conv(&format!("{name}.a"), cin, half, (1, 1), Conv2dCfg::new(2, 0)),
            b: self.conv(&format!("{name}.b"), cin, cout - half, (1, 1), Conv2dCfg::new(2, 0)),
            bn: self.batch_norm(&format!("{name}.bn"), cout),
        }
    }

    /// ReLU → 1×1 conv → batch norm.
    pub fn relu_conv_bn(&mut self, name: &str, cin: usize, cout: usize, stride: usize) -> Seq {
        Seq(vec![
            Layer::Act(Activation::Relu),
            Layer::Conv(self.conv(&format!("{name}.conv"), cin, cout, (1, 1), Conv2dCfg::new(stride, 0))),
            Layer::Bn(self.batch_norm(&format!("{name}.bn"), cout)),
        ])
    }

    pub fn squeeze_excite(&mut self, name: &str, channels: usize, squeezed: usize) -> SqueezeExcite {
        SqueezeExcite {
            reduce: self.linear(&format!("{name}.reduce"), channels, squeezed),
            expand: self.linear(&format!("{name}.expand"), squeezed, channels),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cfg: Conv2dCfg,
}

impl Conv {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.cfg)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train { update_stats } => {
                let (y, stats) = ctx.tape.batch_norm_train(x, gamma, beta, BN_EPS);
                if update_stats {
                    let m = F::of(BN_MOMENTUM);
                    let keep = F::one() - m;
                    let rm = ctx.store.value_mut(self.running_mean).data_mut();
                    for (r, &b) in rm.iter_mut().zip(&stats.mean) {
                        *r = keep * *r + m * b;
                    }
                    let rv = ctx.store.value_mut(self.running_var).data_mut();
                    for (c, r) in rv.iter_mut().enumerate() {
                        *r = keep * *r + m * stats.unbiased_var(c);
                    }
                }
                y
            }
            Mode::Eval => {
                let rm = ctx.store.value(self.running_mean).data().to_vec();
                let rv = ctx.store.value(self.running_var).data().to_vec();
                ctx.tape.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

/// Halves resolution with two stride-2 1×1 convs on pixel grids offset by
/// one, concatenated along channels.
#[derive(Clone, Debug)]
pub struct FactorizedReduce {
    pub a: Conv,
    pub b: Conv,
    pub bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        let x = ctx.tape.relu(x);
        let ya = self.a.forward(ctx, x);
        let shifted = ctx.tape.crop(x, 1);
        let yb = self.b.forward(ctx, shifted);
        let y = ctx.tape.concat(&[ya, yb]);
        self.bn.forward(ctx, y)
    }
}

/// Channel attention: pooled features → reduce → swish → expand → sigmoid gate.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        let s = ctx.tape.global_avg_pool(x);
        let h = self.reduce.forward(ctx, s);
        let h = ctx.tape.activation(h, Activation::Swish);
        let g = self.expand.forward(ctx, h);
        let g = ctx.tape.activation(g, Activation::Sigmoid);
        ctx.tape.channel_scale(x, g)
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Act(Activation),
    Conv(Conv),
    Bn(BatchNorm),
    MaxPool(PoolCfg),
    AvgPool(PoolCfg),
    FactorizedReduce(FactorizedReduce),
    SqueezeExcite(SqueezeExcite),
}

impl Layer {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, x: Var) -> Var {
        match self {
            Layer::Act(a) => ctx.tape.activation(x, *a),
            Layer::Conv(c) => c.forward(ctx, x),
            Layer::Bn(bn) => bn.forward(ctx, x),
            Layer::MaxPool(cfg) => ctx.tape.max_pool(x, *cfg),
            Layer::AvgPool(cfg) => ctx.tape.avg_pool(x, *cfg),
            Layer::FactorizedReduce(fr) => fr.forward(ctx, x),
            Layer::SqueezeExcite(se) => se.forward(ctx, x),
        }
    }
}

/// Layers applied in order.
#[derive(Clone, Debug, Default)]
pub struct Seq(pub Vec<Layer>);

impl Seq {
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, mut x: Var) -> Var {
        for layer in &self.0 {
            x = layer.forward(ctx, x);
        }
        x
    }
}
