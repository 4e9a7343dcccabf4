//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use icdarts::cell::{AlphaTable, CellKind, Genotype, GenotypeEdge};
use icdarts::discretize::{DiscretizerKind, ZeroConfig};
use icdarts::harness::data::{split_train_val, synthetic};
use icdarts::harness::retrain::RetrainConfig;
use icdarts::network::NetworkTemplate;
use icdarts::search::{SearchConfig, SearchData};

/// Toy-scale search settings: narrow network, small batches, capped epochs.
pub fn toy_search(seed: u64) -> SearchConfig {
    SearchConfig {
        seed,
        template: NetworkTemplate { init_channels: 4, aux_width: 16, ..NetworkTemplate::default() },
        batch_size: 16,
        epochs: 5,
        steps_per_epoch: Some(8),
        warmup_steps: 5,
        eval_samples: 256,
        ..SearchConfig::default()
    }
}

/// A three-cell network for fast structural tests.
pub fn tiny_search(seed: u64) -> SearchConfig {
    let mut c = toy_search(seed);
    c.template.n_cells_search = 3;
    c.template.n_cells_eval = 3;
    c.template.n_cells_retrain = 3;
    c.template.aux_heads = false;
    c.batch_size = 8;
    c.steps_per_epoch = Some(2);
    c.warmup_steps = 1;
    c.pretrain_epochs = 0;
    c.eval_samples = 32;
    c
}

pub fn toy_retrain(seed: u64, epochs: usize) -> RetrainConfig {
    RetrainConfig { seed, epochs, batch_size: 64, ..RetrainConfig::default() }
}

/// Synthetic search data split with `seed`.
pub fn toy_data(seed: u64, n_train: usize, n_test: usize) -> SearchData {
    let (train, test) = synthetic(7, n_train, n_test);
    let (tr, va) = split_train_val(&train, seed);
    SearchData::new(tr, va, Some(test)).expect("non-empty splits")
}

/// Softmax written out directly, independent of the library helper.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Whether `op` may be selected under `zc`: special ops only when the
/// evaluation phase has a slot for them.
pub fn oracle_eligible(op: &str, zc: ZeroConfig) -> bool {
    let special = op == "zero" || op == "random";
    !special || !matches!(zc, ZeroConfig::V0 | ZeroConfig::V1)
}

/// Repeated-scan selection of the `k` largest weights; ties go to the
/// smallest `(src, op)`.
fn take_k_by_scan(mut cands: Vec<(f64, usize, usize)>, k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, c) in cands.iter().enumerate() {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let bc = cands[b];
                    if c.0 > bc.0 || (c.0 == bc.0 && (c.1, c.2) < (bc.1, bc.2)) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let b = best.expect("enough candidates");
        out.push((cands[b].1, cands[b].2));
        cands.remove(b);
    }
    out
}

/// Brute-force counterpart of every discretizer.
pub fn oracle_discretize(alphas: &AlphaTable, kind: DiscretizerKind, zc: ZeroConfig) -> (Vec<GenotypeEdge>, Vec<GenotypeEdge>) {
    let mut cells = Vec::new();
    for cell in [CellKind::Normal, CellKind::Reduce] {
        let mut edges = Vec::new();
        for dst in 0..alphas.n_nodes() {
            let groups: Vec<usize> = (0..alphas.groups().len())
                .filter(|&g| alphas.groups()[g].key.kind == cell && alphas.groups()[g].key.dst == dst)
                .collect();
            let picks = match kind {
                DiscretizerKind::Darts { k } => {
                    let mut per_src = Vec::new();
                    for &g in &groups {
                        let a: Vec<f64> = alphas.vector(g).iter().map(|&v| v as f64).collect();
                        let w = softmax(&a);
                        let ops = &alphas.groups()[g].ops;
                        let mut best: Option<(f64, usize)> = None;
                        for o in 0..ops.len() {
                            if oracle_eligible(&ops[o], zc) && best.is_none_or(|(bw, _)| w[o] > bw) {
                                best = Some((w[o], o));
                            }
                        }
                        if let Some((bw, bo)) = best {
                            per_src.push((bw, alphas.groups()[g].key.src, bo));
                        }
                    }
                    take_k_by_scan(per_src, k)
                }
                DiscretizerKind::Idarts { .. } | DiscretizerKind::Xdarts { .. } => {
                    let k = match kind {
                        DiscretizerKind::Idarts { k } => k,
                        DiscretizerKind::Xdarts { count_cell_inputs: true } => dst + 2,
                        _ => dst.max(1),
                    };
                    let mut pairs = Vec::new();
                    let mut logits = Vec::new();
                    for &g in &groups {
                        for (o, op) in alphas.groups()[g].ops.iter().enumerate() {
                            if oracle_eligible(op, zc) {
                                pairs.push((alphas.groups()[g].key.src, o));
                                logits.push(alphas.vector(g)[o] as f64);
                            }
                        }
                    }
                    let p = softmax(&logits);
                    take_k_by_scan(pairs.iter().zip(&p).map(|(&(s, o), &w)| (w, s, o)).collect(), k)
                }
            };
            for (src, o) in picks {
                let g = groups.iter().copied().find(|&g| alphas.groups()[g].key.src == src).expect("source");
                edges.push(GenotypeEdge { dst, src, op: alphas.groups()[g].ops[o].clone() });
            }
        }
        edges.sort();
        cells.push(edges);
    }
    let reduce = cells.pop().expect("two cells");
    (cells.pop().expect("two cells"), reduce)
}

pub fn special_ops(g: &Genotype) -> Vec<&str> {
    g.normal.iter().chain(&g.reduce).map(|e| e.op.as_str()).filter(|o| *o == "zero" || *o == "random").collect()
}
