//! Training a discovered genotype from scratch and measuring inference latency.

use std::time::Instant;

use icdarts_autograd::{clip_grad_norm, cosine_lr, Binding, Optimizer, Sgd, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{make_batch, Augment, BatchStream, Normalizer};
use super::data::Dataset;
use super::stats::{mean, sample_std};
use crate::cell::Genotype;
use crate::discretize::ZeroConfig;
use crate::error::{Error, Result};
use crate::network::{build_eval_network, classification_loss, Network, NetworkTemplate};
use crate::nn::Mode;
use crate::ops::Phase;
use crate::search::{accuracy, argmax_rows};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// `None` uses standard augmentation with a cutout of half the image side.
    pub augment: Option<Augment>,
    /// Cell count; `None` uses the template's retrain depth.
    pub n_cells: Option<usize>,
    /// Timed batches measured before training; 0 skips the measurement.
    pub latency_batches: usize,
    pub latency_batch_size: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 128,
            lr: 0.025,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            grad_clip: 5.0,
            augment: None,
            n_cells: None,
            latency_batches: 0,
            latency_batch_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainMetrics {
    pub epochs: Vec<RetrainEpoch>,
    /// Test accuracy after the last epoch.
    pub final_test_acc: f64,
    /// Seconds per batch (mean, sample stddev), measured before training.
    pub latency: Option<(f64, f64)>,
    pub n_params: usize,
}

/// Builds the retrain network from a retrain-phase genotype and trains it on
/// all of `train`, testing after every epoch.
pub fn retrain_and_evaluate(
    genotype: &Genotype,
    template: &NetworkTemplate,
    zero_config: ZeroConfig,
    train: &Dataset,
    test: &Dataset,
    cfg: &RetrainConfig,
) -> Result<(RetrainMetrics, Network)> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::data("retraining needs non-empty train and test sets"));
    }
    let n_cells = cfg.n_cells.unwrap_or(template.n_cells_retrain);
    let mut net = build_eval_network(
        genotype,
        template,
        zero_config,
        Phase::Retrain,
        n_cells,
        train.channels,
        train.n_classes,
        cfg.seed ^ 0x4e7,
    )?;
    let norm = Normalizer::fit(train);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xb07);
    let latency = if cfg.latency_batches > 0 {
        Some(measure_latency(&mut net, test, &norm, cfg.latency_batch_size, cfg.latency_batches)?)
    } else {
        None
    };
    let augment = cfg.augment.unwrap_or(Augment::standard(train.height / 2));
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut stream = BatchStream::new(train.len(), cfg.batch_size, cfg.seed ^ 0x57e);
    let steps = stream.batches_per_pass().max(1);
    let base_drop = net.drop_path;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.set_lr(cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs));
        net.drop_path = base_drop * epoch as f64 / cfg.epochs as f64;
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for _ in 0..steps {
            let idx = stream.next_indices();
            let (x, labels) = make_batch(train, &idx, &norm, augment, stream.rng());
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let mut binding = Binding::new(&net.store, true);
            let out =
                net.forward_with_aux(&mut tape, &mut binding, xv, None, Mode::Train { update_stats: true }, &mut rng)?;
            let loss = classification_loss(&mut tape, out, &labels, template.aux_weight);
            let l = tape.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(Error::numerical(format!("non-finite retrain loss at epoch {epoch}")));
            }
            correct += argmax_rows(tape.value(out.logits)).iter().zip(&labels).filter(|(p, y)| p == y).count();
            seen += labels.len();
            loss_sum += l;
            let grads = tape.backward(loss);
            net.store.zero_grad();
            net.store.accumulate_grads(&binding, &grads);
            clip_grad_norm(&mut net.store, cfg.grad_clip);
            opt.step(&mut net.store);
        }
        let test_acc = accuracy(&mut net, None, test, &norm, cfg.batch_size, &mut rng)?;
        log::info!("retrain epoch {epoch}: loss {:.4} test {:.3}", loss_sum / steps as f64, test_acc);
        epochs.push(RetrainEpoch {
            epoch,
            train_loss: loss_sum / steps as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
        });
    }
    net.drop_path = base_drop;
    let final_test_acc = match epochs.last() {
        Some(e) => e.test_acc,
        None => accuracy(&mut net, None, test, &norm, cfg.batch_size, &mut rng)?,
    };
    let n_params = net.num_params();
    Ok((RetrainMetrics { epochs, final_test_acc, latency, n_params }, net))
}

/// Wall-clock seconds per forward batch in evaluation mode, after three
/// untimed warm-up batches. Returns (mean, sample stddev).
pub fn measure_latency(
    net: &mut Network,
    ds: &Dataset,
    norm: &Normalizer,
    batch_size: usize,
    n_batches: usize,
) -> Result<(f64, f64)> {
    if n_batches < 2 {
        return Err(Error::config("latency needs at least two timed batches"));
    }
    if ds.is_empty() {
        return Err(Error::data("latency over an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = batch_size.min(ds.len()).max(1);
    let mut times = Vec::with_capacity(n_batches);
    for i in 0..3 + n_batches {
        let idx: Vec<usize> = (0..b).map(|k| (i * b + k) % ds.len()).collect();
        let (x, _) = make_batch(ds, &idx, norm, Augment::NONE, &mut rng);
        let start = Instant::now();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut binding = Binding::new(&net.store, false);
        let out = net.forward_with_aux(&mut tape, &mut binding, xv, None, Mode::Eval, &mut rng)?;
        std::hint::black_box(tape.value(out.logits));
        if i >= 3 {
            times.push(start.elapsed().as_secs_f64());
        }
    }
    Ok((mean(&times), sample_std(&times).unwrap_or(0.0)))
}
