//! The cyclic search loop: pre-training the search network, periodically
//! regenerating the evaluation network from the discretized alphas, and
//! joint updates of the three parameter families under a loss preset.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use icdarts_autograd::{clip_grad_norm, cosine_lr, Adam, Binding, Optimizer, Sgd, Tape, Tensor, Var};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{AlphaTable, EdgeKey, Genotype};
use crate::discretize::{apply_zero_config, discretize, DiscretizerKind, ZeroConfig};
use crate::error::{Error, Result};
use crate::harness::augment::{make_batch, Augment, BatchStream, Normalizer};
use crate::harness::data::Dataset;
use crate::network::{build_eval_network, build_search_network, classification_loss, save_checkpoint, Network, NetworkTemplate};
use crate::nn::Mode;
use crate::ops::{self, Phase, SpaceId};

/// A loss term: search-network CE, evaluation-network CE, or the soft-target
/// coupling between them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    S,
    E,
    SE,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateSpec {
    pub terms: Vec<Term>,
    pub split: Split,
}

impl UpdateSpec {
    fn new(terms: &[Term], split: Split) -> Self {
        Self { terms: terms.to_vec(), split }
    }

    pub fn has(&self, t: Term) -> bool {
        self.terms.contains(&t)
    }
}

/// Which terms update which family, on which split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub name: String,
    pub alpha: UpdateSpec,
    pub ws: UpdateSpec,
    pub we: UpdateSpec,
    /// Weight of the soft-target term.
    pub lambda: f64,
    pub temperature: f64,
}

pub const PRESETS: [&str; 9] =
    ["cdarts", "icdarts", "routeA1", "routeA2", "routeA3", "routeA3_literal", "routeB1", "routeB2", "routeB3"];

impl LossConfig {
    pub fn cdarts() -> Self {
        use Term::*;
        Self {
            name: "cdarts".into(),
            alpha: UpdateSpec::new(&[S, E, SE], Split::Val),
            ws: UpdateSpec::new(&[S], Split::Train),
            we: UpdateSpec::new(&[E, SE], Split::Val),
            lambda: 1.0,
            temperature: 2.0,
        }
    }

    pub fn icdarts() -> Self {
        use Term::*;
        Self {
            name: "icdarts".into(),
            alpha: UpdateSpec::new(&[S, SE], Split::Val),
            ws: UpdateSpec::new(&[S, SE], Split::Train),
            we: UpdateSpec::new(&[E], Split::Train),
            lambda: 1.0,
            temperature: 2.0,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let route = |r, s| select_route_preset(r, s).map(|c| c.named(name));
        match name {
            "cdarts" => Ok(Self::cdarts()),
            "icdarts" => Ok(Self::icdarts()),
            "routeA1" => route(Route::A, 1),
            "routeA2" => route(Route::A, 2),
            "routeA3" => route(Route::A, 3),
            "routeB1" => route(Route::B, 1),
            "routeB2" => route(Route::B, 2),
            "routeB3" => route(Route::B, 3),
            "routeA3_literal" => {
                let mut c = select_route_preset(Route::A, 2)?;
                c.we = UpdateSpec::new(&[Term::SE], Split::Train);
                Ok(c.named(name))
            }
            _ => Err(Error::config(format!("unknown loss preset `{name}` (known: {})", PRESETS.join(", ")))),
        }
    }

    fn named(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.split != Split::Val {
            return Err(Error::config("alphas are only ever updated on the validation split"));
        }
        if self.ws.split != Split::Train || self.ws.has(Term::E) {
            return Err(Error::config("search weights use S/SE terms on the training split"));
        }
        for spec in [&self.alpha, &self.ws, &self.we] {
            if spec.terms.is_empty() {
                return Err(Error::config("every family needs at least one loss term"));
            }
        }
        let valid = self.lambda >= 0.0 && self.temperature > 0.0;
        if !valid {
            return Err(Error::config("lambda must be nonnegative and temperature positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Route {
    A,
    B,
}

impl FromStr for Route {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Route::A),
            "B" | "b" => Ok(Route::B),
            _ => Err(Error::config(format!("unknown route `{s}`"))),
        }
    }
}

/// Cumulative ablation stage: stage 0 is the cdarts preset, stage 3 the icdarts one.
pub fn select_route_preset(route: Route, stage: usize) -> Result<LossConfig> {
    use Term::*;
    if stage > 3 {
        return Err(Error::config(format!("unknown ablation stage {stage}")));
    }
    let mut c = LossConfig::cdarts();
    for s in 1..=stage {
        match (route, s) {
            (Route::A, 1) => c.ws = UpdateSpec::new(&[S, SE], Split::Train),
            (Route::A, 2) => c.we = UpdateSpec::new(&[E], Split::Val),
            (Route::A, 3) => c.we = UpdateSpec::new(&[E], Split::Train),
            (Route::B, 1) => c.we = UpdateSpec::new(&[E, SE], Split::Train),
            (Route::B, 2) => c.we = UpdateSpec::new(&[E], Split::Train),
            (Route::B, 3) => c.ws = UpdateSpec::new(&[S, SE], Split::Train),
            _ => unreachable!(),
        }
    }
    if stage == 3 {
        // The endpoint of both routes is the icdarts objective, alpha terms included.
        c.alpha = LossConfig::icdarts().alpha;
    }
    c.name = if stage == 0 { "cdarts".into() } else { format!("route{route:?}{stage}") };
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Alpha,
    SearchWeights,
    EvalWeights,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Alpha => "alpha",
            Family::SearchWeights => "w_S",
            Family::EvalWeights => "w_E",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub seed: u64,
    pub space: SpaceId,
    pub zero_config: ZeroConfig,
    pub discretizer: DiscretizerKind,
    pub template: NetworkTemplate,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    /// Warm-up steps of each freshly generated evaluation network.
    pub warmup_steps: usize,
    /// Steps between evaluation-network regenerations; `None` means once per epoch.
    pub update_every: Option<usize>,
    /// Caps the steps per epoch; `None` means one pass over the smaller split.
    pub steps_per_epoch: Option<usize>,
    pub w_lr: f64,
    pub w_lr_min: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    pub alpha_lr: f64,
    pub alpha_betas: (f64, f64),
    pub alpha_weight_decay: f64,
    pub grad_clip: f64,
    /// Copy name- and shape-compatible weights into each regenerated evaluation network.
    pub we_inherit: bool,
    /// Drop-path rate of the intermediate evaluation networks.
    pub eval_drop_path: f64,
    /// Hash the untouched families around every sub-update and fail on a write.
    pub check_isolation: bool,
    /// Samples used for the per-epoch accuracy probes.
    pub eval_samples: usize,
    pub augment: Augment,
    /// Per-edge-group op lists keyed by `kind:dst:src`; replaces the curated space.
    pub pools: Option<BTreeMap<String, Vec<String>>>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            space: SpaceId::One,
            zero_config: ZeroConfig::V1,
            discretizer: DiscretizerKind::default(),
            template: NetworkTemplate::default(),
            loss: LossConfig::icdarts(),
            batch_size: 64,
            pretrain_epochs: 1,
            epochs: 5,
            warmup_steps: 10,
            update_every: None,
            steps_per_epoch: None,
            w_lr: 0.08,
            w_lr_min: 0.001,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            alpha_lr: 3e-4,
            alpha_betas: (0.5, 0.999),
            alpha_weight_decay: 0.0,
            grad_clip: 5.0,
            we_inherit: false,
            eval_drop_path: 0.0,
            check_isolation: false,
            eval_samples: 512,
            augment: Augment { crop_pad: 2, flip: true, cutout: 0 },
            pools: None,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        self.template.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.update_every == Some(0) || self.steps_per_epoch == Some(0) {
            return Err(Error::config("update_every and steps_per_epoch must be positive"));
        }
        if !(0.0..1.0).contains(&self.eval_drop_path) {
            return Err(Error::config("eval_drop_path must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Builds the alpha table for the configured space or pools.
    pub fn init_alphas(&self) -> Result<AlphaTable> {
        let n = self.template.n_nodes;
        let seed = self.seed ^ 0xa1fa;
        match &self.pools {
            None => AlphaTable::init(n, &ops::resolve_names(self.space, self.zero_config, Phase::Search), seed),
            Some(pools) => {
                let special = self.zero_config.slot(Phase::Search).op_name();
                let mut missing = None;
                let table = AlphaTable::with_pools(
                    n,
                    |key: EdgeKey| {
                        let mut ops = pools.get(&key.to_string()).cloned().unwrap_or_else(|| {
                            missing.get_or_insert(key);
                            Vec::new()
                        });
                        ops.extend(special.map(str::to_string));
                        ops
                    },
                    seed,
                );
                if let Some(key) = missing {
                    return Err(Error::config(format!("no pool for edge group {key}")));
                }
                let table = table?;
                for g in table.groups() {
                    if let Some(op) = g.ops.iter().find(|o| ops::op_spec(o).is_none()) {
                        return Err(Error::config(format!("pool op `{op}` is not in the catalog")));
                    }
                }
                Ok(table)
            }
        }
    }
}

/// Train/val halves of the training set plus an optional test set.
#[derive(Clone, Debug)]
pub struct SearchData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Option<Dataset>,
    pub norm: Normalizer,
}

impl SearchData {
    pub fn new(train: Dataset, val: Dataset, test: Option<Dataset>) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::data("search needs non-empty train and val splits"));
        }
        let norm = Normalizer::fit(&train);
        Ok(Self { train, val, test, norm })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub search_loss: f64,
    pub eval_val_acc: f64,
    pub eval_test_acc: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub genotype: Genotype,
    pub metrics: Vec<EpochMetrics>,
    /// Genotype discretized at each evaluation-network generation.
    pub history: Vec<Genotype>,
    pub generations: usize,
    pub final_val_acc: f64,
    pub update_log: Vec<(Family, Split)>,
    /// Architecture weights at the end of the search.
    pub alphas: AlphaTable,
}

/// Everything mutable during a search.
pub struct SearchState {
    pub config: SearchConfig,
    pub alphas: AlphaTable,
    pub search_net: Network,
    pub eval_net: Option<Network>,
    pub history: Vec<Genotype>,
    pub generations: usize,
    pub update_log: Vec<(Family, Split)>,
    opt_alpha: Adam<f32>,
    opt_ws: Sgd<f32>,
    opt_we: Sgd<f32>,
    train_stream: BatchStream,
    val_stream: BatchStream,
    op_rng: ChaCha8Rng,
    in_channels: usize,
    n_classes: usize,
}

type Batch = (Tensor<f32>, Vec<usize>);

/// Outputs of one loss evaluation.
struct LossParts {
    total: f64,
    terms: BTreeMap<Term, f64>,
}

impl SearchState {
    pub fn new(config: SearchConfig, data: &SearchData) -> Result<Self> {
        config.validate()?;
        let alphas = config.init_alphas()?;
        let (in_channels, n_classes) = (data.train.channels, data.train.n_classes);
        let search_net = build_search_network(&config.template, &alphas, in_channels, n_classes, config.seed ^ 0x5ea)?;
        let seed = config.seed;
        Ok(Self {
            opt_alpha: Adam::new(config.alpha_lr, config.alpha_betas, config.alpha_weight_decay),
            opt_ws: Sgd::new(config.w_lr, config.w_momentum, config.w_weight_decay),
            opt_we: Sgd::new(config.w_lr, config.w_momentum, config.w_weight_decay),
            train_stream: BatchStream::new(data.train.len(), config.batch_size, seed ^ 0x7a1),
            val_stream: BatchStream::new(data.val.len(), config.batch_size, seed ^ 0x7a2),
            op_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x0b5),
            config,
            alphas,
            search_net,
            eval_net: None,
            history: Vec::new(),
            generations: 0,
            update_log: Vec::new(),
            in_channels,
            n_classes,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        let natural = self.train_stream.batches_per_pass().min(self.val_stream.batches_per_pass()).max(1);
        self.config.steps_per_epoch.map_or(natural, |cap| cap.min(natural))
    }

    pub fn next_batch(&mut self, split: Split, data: &SearchData) -> Batch {
        let aug = self.config.augment;
        let (stream, ds) = match split {
            Split::Train => (&mut self.train_stream, &data.train),
            Split::Val => (&mut self.val_stream, &data.val),
        };
        let idx = stream.next_indices();
        make_batch(ds, &idx, &data.norm, aug, stream.rng())
    }

    /// Current discretization of the alphas.
    pub fn discretize(&self) -> Result<Genotype> {
        let space = if self.config.pools.is_some() { SpaceId::Combined } else { self.config.space };
        discretize(&self.alphas, self.config.discretizer, self.config.zero_config, space)
    }

    /// Discretizes, builds a fresh evaluation network and appends to the history.
    pub fn regenerate_eval_net(&mut self) -> Result<()> {
        let searched = self.discretize()?;
        let genotype = apply_zero_config(&searched, self.config.zero_config, Phase::Evaluation)?;
        let seed = self.config.seed ^ (0xe7a1 + self.generations as u64);
        let mut net = build_eval_network(
            &genotype,
            &self.config.template,
            self.config.zero_config,
            Phase::Evaluation,
            self.config.template.n_cells_eval,
            self.in_channels,
            self.n_classes,
            seed,
        )?;
        net.drop_path = self.config.eval_drop_path;
        if self.config.we_inherit {
            if let Some(old) = &self.eval_net {
                net.inherit_from(old);
            }
        }
        let lr = self.opt_we.lr();
        self.opt_we = Sgd::new(lr, self.config.w_momentum, self.config.w_weight_decay);
        self.eval_net = Some(net);
        self.history.push(searched);
        self.generations += 1;
        Ok(())
    }

    fn fingerprints(&self) -> [u64; 3] {
        [
            self.alphas.fingerprint(),
            self.search_net.store.fingerprint(),
            self.eval_net.as_ref().map_or(0, |n| n.store.fingerprint()),
        ]
    }

    /// Evaluates the terms of `spec` on `batch` with gradients flowing only
    /// into `family`, and applies one optimizer step to it.
    fn update(&mut self, family: Family, spec: &UpdateSpec, batch: &Batch) -> Result<LossParts> {
        let before = self.config.check_isolation.then(|| self.fingerprints());
        let (parts, grads) = self.loss_and_grads(family, &spec.terms, batch, true)?;
        let grads = grads.expect("gradients requested");
        match family {
            Family::Alpha => {
                let store = self.alphas.store_mut();
                store.zero_grad();
                store.accumulate_grads(&grads.0, &grads.1);
                self.opt_alpha.step(store);
            }
            Family::SearchWeights => {
                let store = &mut self.search_net.store;
                store.zero_grad();
                store.accumulate_grads(&grads.0, &grads.1);
                clip_grad_norm(store, self.config.grad_clip);
                self.opt_ws.step(store);
            }
            Family::EvalWeights => {
                let store = &mut self.eval_net.as_mut().expect("checked in loss").store;
                store.zero_grad();
                store.accumulate_grads(&grads.0, &grads.1);
                clip_grad_norm(store, self.config.grad_clip);
                self.opt_we.step(store);
            }
        }
        if let Some(before) = before {
            let after = self.fingerprints();
            let own = family as usize;
            for i in (0..3).filter(|&i| i != own) {
                if before[i] != after[i] {
                    return Err(Error::numerical(format!(
                        "isolation violated: {family} update changed family {i} at step {}",
                        self.update_log.len()
                    )));
                }
            }
        }
        self.update_log.push((family, spec.split));
        Ok(parts)
    }

    /// Builds the loss for `terms` on `batch`. When `want_grads`, returns the
    /// binding and gradients of `family`.
    #[allow(clippy::type_complexity)]
    fn loss_and_grads(
        &mut self,
        family: Family,
        terms: &[Term],
        batch: &Batch,
        want_grads: bool,
    ) -> Result<(LossParts, Option<(Binding, icdarts_autograd::Grads<f32>)>)> {
        let needs_s = terms.iter().any(|t| matches!(t, Term::S | Term::SE));
        let needs_e = terms.iter().any(|t| matches!(t, Term::E | Term::SE));
        if needs_e && self.eval_net.is_none() {
            return Err(Error::config("loss needs an evaluation network but none was generated"));
        }
        let (lambda, temperature) = (self.config.loss.lambda, self.config.loss.temperature);
        let mut tape = Tape::new();
        let x = tape.constant(batch.0.clone());
        let labels = &batch.1;

        let mut alpha_binding = Binding::new(self.alphas.store(), family == Family::Alpha);
        let mut ws_binding = Binding::new(&self.search_net.store, family == Family::SearchWeights);
        let mut s_logits = None;
        if needs_s {
            let weights = self.alphas.softmax_vars(&mut tape, &mut alpha_binding);
            let mode = Mode::Train { update_stats: family == Family::SearchWeights };
            let out =
                self.search_net.forward_with_aux(&mut tape, &mut ws_binding, x, Some(&weights), mode, &mut self.op_rng)?;
            s_logits = Some(out.logits);
        }
        let mut we_binding = None;
        let mut e_out = None;
        if needs_e {
            let net = self.eval_net.as_mut().expect("checked above");
            let mut b = Binding::new(&net.store, family == Family::EvalWeights);
            let mode = Mode::Train { update_stats: family == Family::EvalWeights };
            e_out = Some(net.forward_with_aux(&mut tape, &mut b, x, None, mode, &mut self.op_rng)?);
            we_binding = Some(b);
        }

        let aux_weight = self.config.template.aux_weight;
        let mut combo: Vec<(Var, f64)> = Vec::new();
        let mut vars: Vec<(Term, Var)> = Vec::new();
        for &t in terms {
            let v = match t {
                Term::S => tape.cross_entropy(s_logits.expect("built"), labels),
                Term::E => {
                    let out = e_out.expect("built");
                    let w = if family == Family::EvalWeights { aux_weight } else { 0.0 };
                    classification_loss(&mut tape, out, labels, w)
                }
                Term::SE => tape.soft_target_ce(s_logits.expect("built"), e_out.expect("built").logits, temperature),
            };
            combo.push((v, if t == Term::SE { lambda } else { 1.0 }));
            vars.push((t, v));
        }
        let loss = tape.linear_comb(&combo);
        let total = tape.value(loss).item() as f64;
        let terms_out: BTreeMap<Term, f64> = vars.iter().map(|&(t, v)| (t, tape.value(v).item() as f64)).collect();
        if !total.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite {family} loss at update {}: terms {terms_out:?}",
                self.update_log.len()
            )));
        }
        let parts = LossParts { total, terms: terms_out };
        if !want_grads {
            return Ok((parts, None));
        }
        let grads = tape.backward(loss);
        let binding = match family {
            Family::Alpha => alpha_binding,
            Family::SearchWeights => ws_binding,
            Family::EvalWeights => we_binding.expect("eval net bound"),
        };
        Ok((parts, Some((binding, grads))))
    }

    /// Gradient of the `w_E` family for `terms` on `batch`, flattened in
    /// registration order (zeros for parameters the loss does not reach).
    pub fn we_gradient(&mut self, terms: &[Term], batch: &Batch) -> Result<Vec<f32>> {
        let (_, grads) = self.loss_and_grads(Family::EvalWeights, terms, batch, true)?;
        let (binding, grads) = grads.expect("requested");
        let mut store = self.eval_net.as_ref().expect("eval net present").store.clone();
        store.zero_grad();
        store.accumulate_grads(&binding, &grads);
        Ok(store.iter().flat_map(|(_, p)| p.grad.data().to_vec()).collect())
    }

    /// Minimizes the search-network CE on the training split with alphas frozen.
    pub fn pretrain(&mut self, data: &SearchData, epochs: usize) -> Result<Vec<f64>> {
        let steps = self.steps_per_epoch();
        let mut losses = Vec::new();
        let total = self.config.pretrain_epochs + self.config.epochs;
        for e in 0..epochs {
            self.opt_ws.set_lr(cosine_lr(self.config.w_lr, self.config.w_lr_min, e, total));
            let mut sum = 0.0;
            for _ in 0..steps {
                let batch = self.next_batch(Split::Train, data);
                sum += self.update(Family::SearchWeights, &UpdateSpec::new(&[Term::S], Split::Train), &batch)?.total;
            }
            losses.push(sum / steps as f64);
        }
        Ok(losses)
    }

    /// Trains the current evaluation network on validation batches.
    pub fn warmup(&mut self, data: &SearchData, steps: usize) -> Result<Vec<f64>> {
        if self.eval_net.is_none() {
            return Err(Error::config("warm-up needs an evaluation network"));
        }
        let spec = UpdateSpec::new(&[Term::E], Split::Val);
        (0..steps)
            .map(|_| {
                let batch = self.next_batch(Split::Val, data);
                self.update(Family::EvalWeights, &spec, &batch).map(|p| p.total)
            })
            .collect()
    }

    /// One alpha, one `w_S` and one `w_E` update, in that order. Returns the
    /// `w_S` loss.
    pub fn joint_step(&mut self, data: &SearchData) -> Result<f64> {
        let loss = self.config.loss.clone();
        let val = self.next_batch(Split::Val, data);
        self.update(Family::Alpha, &loss.alpha, &val)?;
        let train = self.next_batch(Split::Train, data);
        let ws = self.update(Family::SearchWeights, &loss.ws, &train)?;
        let we_batch = match loss.we.split {
            Split::Train => train,
            Split::Val => val,
        };
        self.update(Family::EvalWeights, &loss.we, &we_batch)?;
        Ok(ws.terms.get(&Term::S).copied().unwrap_or(ws.total))
    }

    /// Accuracy of the current evaluation network (running statistics).
    pub fn eval_accuracy(&mut self, ds: &Dataset, norm: &Normalizer) -> Result<f64> {
        let net = self.eval_net.as_mut().ok_or_else(|| Error::config("no evaluation network"))?;
        let sub = ds.head(self.config.eval_samples);
        accuracy(net, None, &sub, norm, self.config.batch_size.max(64), &mut self.op_rng)
    }
}

/// Classification accuracy in evaluation mode.
pub fn accuracy(
    net: &mut Network,
    alphas: Option<&AlphaTable>,
    ds: &Dataset,
    norm: &Normalizer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::data("accuracy over an empty dataset"));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = make_batch(ds, chunk, norm, Augment::NONE, rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut binding = Binding::new(&net.store, false);
        let weights = alphas.map(|a| {
            let mut ab = Binding::new(a.store(), false);
            a.softmax_vars(&mut tape, &mut ab)
        });
        let out = net.forward_with_aux(&mut tape, &mut binding, xv, weights.as_deref(), Mode::Eval, rng)?;
        correct += argmax_rows(tape.value(out.logits)).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn argmax_rows(logits: &Tensor<f32>) -> Vec<usize> {
    let (n, k) = logits.dims2();
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Runs the full search and optionally writes the run directory.
pub fn run_search(config: &SearchConfig, data: &SearchData, out_dir: Option<&Path>) -> Result<RunRecord> {
    let mut state = SearchState::new(config.clone(), data)?;
    let steps = state.steps_per_epoch();
    let total_steps = steps * config.epochs;
    if total_steps == 0 {
        return Err(Error::config("search budget has zero steps"));
    }
    let update_every = config.update_every.unwrap_or(steps);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        std::fs::write(&p, serde_json::to_string_pretty(config)?).map_err(|e| Error::io(&p, e))?;
    }
    let started = Instant::now();
    let pre = state.pretrain(data, config.pretrain_epochs)?;
    info!("pretrain losses {pre:?}");

    let mut metrics = Vec::new();
    let mut epoch_loss = 0.0;
    let total_epochs = config.pretrain_epochs + config.epochs;
    for i in 0..total_steps {
        let epoch = i / steps;
        if i % steps == 0 {
            let lr = cosine_lr(config.w_lr, config.w_lr_min, config.pretrain_epochs + epoch, total_epochs);
            state.opt_ws.set_lr(lr);
            state.opt_we.set_lr(lr);
        }
        if i % update_every == 0 {
            state.regenerate_eval_net()?;
            state.warmup(data, config.warmup_steps)?;
        }
        epoch_loss += state.joint_step(data)?;
        if (i + 1) % steps == 0 {
            let val_acc = state.eval_accuracy(&data.val, &data.norm)?;
            let test_acc = match &data.test {
                Some(t) => state.eval_accuracy(t, &data.norm)?,
                None => f64::NAN,
            };
            let m = EpochMetrics {
                epoch,
                search_loss: epoch_loss / steps as f64,
                eval_val_acc: val_acc,
                eval_test_acc: test_acc,
                wall_time: started.elapsed().as_secs_f64(),
            };
            info!("epoch {epoch}: loss {:.4} val {:.3} test {:.3}", m.search_loss, val_acc, test_acc);
            if let Some(dir) = out_dir {
                state.discretize()?.save(&dir.join(format!("genotype_epoch_{epoch}.json")))?;
            }
            metrics.push(m);
            epoch_loss = 0.0;
        }
    }
    // Final boundary: regenerate from the converged alphas.
    state.regenerate_eval_net()?;
    state.warmup(data, config.warmup_steps)?;
    let final_val_acc = state.eval_accuracy(&data.val, &data.norm)?;
    let genotype = state.history.last().cloned().expect("generated above");

    if let Some(dir) = out_dir {
        genotype.save(&dir.join("genotype.json"))?;
        let p = dir.join(ALPHAS_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&alpha_dump(&state.alphas))?).map_err(|e| Error::io(&p, e))?;
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
        let net = state.eval_net.as_ref().expect("generated above");
        save_checkpoint(net, &dir.join("checkpoint"), config.seed, config.epochs)?;
    }
    Ok(RunRecord {
        genotype,
        metrics,
        history: state.history,
        generations: state.generations,
        final_val_acc,
        update_log: state.update_log,
        alphas: state.alphas,
    })
}

pub const ALPHAS_FILE: &str = "alphas.json";

/// One edge group's final architecture weights as written to `alphas.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaDump {
    pub key: String,
    pub ops: Vec<String>,
    pub alpha: Vec<f32>,
}

pub fn alpha_dump(alphas: &AlphaTable) -> Vec<AlphaDump> {
    alphas
        .groups()
        .iter()
        .enumerate()
        .map(|(g, group)| AlphaDump { key: group.key.to_string(), ops: group.ops.clone(), alpha: alphas.vector(g).to_vec() })
        .collect()
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Default run directory name for a config.
pub fn run_dir_name(config: &SearchConfig) -> PathBuf {
    PathBuf::from(format!(
        "{}_space{}_{}_{}_seed{}",
        config.loss.name,
        config.space,
        config.zero_config,
        config.discretizer.to_string().replace(':', "-"),
        config.seed
    ))
}
