//! Turning continuous architecture weights into a discrete genotype, and the
//! per-phase substitution of the special `zero`/`random` slot.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use icdarts_autograd::Scalar;
use serde::{Deserialize, Serialize};

use crate::cell::{softmax_f64, AlphaTable, CellKind, Genotype, GenotypeEdge, GENOTYPE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::ops::{self, Phase, SpaceId};

/// What the special op slot holds in a given phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Zero,
    Random,
    Absent,
}

impl Slot {
    pub fn op_name(self) -> Option<&'static str> {
        match self {
            Slot::Zero => Some(ops::ZERO),
            Slot::Random => Some(ops::RANDOM),
            Slot::Absent => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ZeroConfig {
    V0,
    V1,
    V2,
    V3,
    V4,
}

impl ZeroConfig {
    pub const ALL: [ZeroConfig; 5] = [ZeroConfig::V0, ZeroConfig::V1, ZeroConfig::V2, ZeroConfig::V3, ZeroConfig::V4];

    /// (search, evaluation, retrain) slots.
    pub fn slots(self) -> (Slot, Slot, Slot) {
        use Slot::*;
        match self {
            ZeroConfig::V0 => (Zero, Absent, Absent),
            ZeroConfig::V1 => (Absent, Absent, Absent),
            ZeroConfig::V2 => (Random, Random, Random),
            ZeroConfig::V3 => (Random, Random, Zero),
            ZeroConfig::V4 => (Random, Zero, Zero),
        }
    }

    pub fn slot(self, phase: Phase) -> Slot {
        let (s, e, r) = self.slots();
        match phase {
            Phase::Search => s,
            Phase::Evaluation => e,
            Phase::Retrain => r,
        }
    }

    /// Whether a search-space op may be picked at discretization. The special
    /// op is masked when the evaluation phase has no slot for it.
    pub fn eligible(self, op: &str) -> bool {
        !ops::is_special(op) || self.slot(Phase::Evaluation) != Slot::Absent
    }
}

impl fmt::Display for ZeroConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ZeroConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ZeroConfig::ALL
            .into_iter()
            .find(|z| z.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown zero config `{s}` (expected V0..V4)")))
    }
}

fn default_k() -> usize {
    2
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DiscretizerKind {
    Darts {
        #[serde(default = "default_k")]
        k: usize,
    },
    Idarts {
        #[serde(default = "default_k")]
        k: usize,
    },
    Xdarts {
        /// Count the two cell inputs among a node's predecessors.
        #[serde(default = "default_true")]
        count_cell_inputs: bool,
    },
}

impl Default for DiscretizerKind {
    fn default() -> Self {
        DiscretizerKind::Darts { k: 2 }
    }
}

impl fmt::Display for DiscretizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscretizerKind::Darts { k } => write!(f, "darts:{k}"),
            DiscretizerKind::Idarts { k } => write!(f, "idarts:{k}"),
            DiscretizerKind::Xdarts { count_cell_inputs: true } => write!(f, "xdarts"),
            DiscretizerKind::Xdarts { count_cell_inputs: false } => write!(f, "xdarts:nodes"),
        }
    }
}

/// Accepts `darts`, `darts:K`, `idarts`, `idarts:K`, `xdarts` and `xdarts:nodes`.
impl FromStr for DiscretizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("unknown discretizer `{s}`"));
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let k = || -> Result<usize> {
            match arg {
                None => Ok(2),
                Some(a) => a.parse().ok().filter(|&k| k > 0).ok_or_else(bad),
            }
        };
        match name.to_ascii_lowercase().as_str() {
            "darts" => Ok(DiscretizerKind::Darts { k: k()? }),
            "idarts" => Ok(DiscretizerKind::Idarts { k: k()? }),
            "xdarts" => match arg {
                None => Ok(DiscretizerKind::Xdarts { count_cell_inputs: true }),
                Some("nodes") => Ok(DiscretizerKind::Xdarts { count_cell_inputs: false }),
                Some(_) => Err(bad()),
            },
            _ => Err(bad()),
        }
    }
}

/// Candidate weights of one incoming edge of a node.
#[derive(Clone, Debug)]
pub struct EdgeCandidates {
    pub src: usize,
    pub alpha: Vec<f64>,
    pub eligible: Vec<bool>,
}

/// A chosen (source, op index) pair.
pub type Pick = (usize, usize);

fn by_weight_then_index(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
}

/// Per-edge softmax; strength is the best eligible weight; keep the `k`
/// strongest distinct sources.
pub fn select_darts(edges: &[EdgeCandidates], k: usize) -> Result<Vec<Pick>> {
    let mut ranked = Vec::new();
    for e in edges {
        let w = softmax_f64(&e.alpha);
        let best = (0..w.len())
            .filter(|&o| e.eligible[o])
            .map(|o| (w[o], e.src, o))
            .min_by(by_weight_then_index);
        if let Some(b) = best {
            ranked.push(b);
        }
    }
    if k == 0 || k > ranked.len() {
        return Err(Error::config(format!("k={k} but only {} candidate edges", ranked.len())));
    }
    ranked.sort_by(by_weight_then_index);
    Ok(ranked.into_iter().take(k).map(|(_, s, o)| (s, o)).collect())
}

/// One softmax over all eligible (source, op) pairs of a node; keep the `k` most probable.
pub fn select_pooled(edges: &[EdgeCandidates], k: usize) -> Result<Vec<Pick>> {
    let mut pairs = Vec::new();
    let mut logits = Vec::new();
    for e in edges {
        for (o, &a) in e.alpha.iter().enumerate() {
            if e.eligible[o] {
                pairs.push((e.src, o));
                logits.push(a);
            }
        }
    }
    if k == 0 || k > pairs.len() {
        return Err(Error::config(format!("k={k} but only {} eligible pairs", pairs.len())));
    }
    let p = softmax_f64(&logits);
    let mut ranked: Vec<(f64, usize, usize)> = pairs.iter().zip(&p).map(|(&(s, o), &w)| (w, s, o)).collect();
    ranked.sort_by(by_weight_then_index);
    Ok(ranked.into_iter().take(k).map(|(_, s, o)| (s, o)).collect())
}

/// Inputs kept at node `dst` under XDARTS.
pub fn xdarts_count(dst: usize, count_cell_inputs: bool) -> usize {
    if count_cell_inputs {
        dst + 2
    } else {
        dst.max(1)
    }
}

/// Candidates feeding node `dst` of `kind`, with the eligibility mask applied.
pub fn node_candidates<F: Scalar>(
    alphas: &AlphaTable<F>,
    kind: CellKind,
    dst: usize,
    eligible: &dyn Fn(&str) -> bool,
) -> Vec<EdgeCandidates> {
    alphas
        .node_groups(kind, dst)
        .into_iter()
        .map(|g| {
            let group = &alphas.groups()[g];
            EdgeCandidates {
                src: group.key.src,
                alpha: alphas.vector(g).iter().map(|v| v.as_f64()).collect(),
                eligible: group.ops.iter().map(|o| eligible(o)).collect(),
            }
        })
        .collect()
}

/// Discretizes both cell kinds of `alphas`.
pub fn discretize<F: Scalar>(
    alphas: &AlphaTable<F>,
    kind: DiscretizerKind,
    zero_config: ZeroConfig,
    space_id: SpaceId,
) -> Result<Genotype> {
    let n = alphas.n_nodes();
    let eligible = |op: &str| zero_config.eligible(op);
    let mut cells = Vec::new();
    for cell in [CellKind::Normal, CellKind::Reduce] {
        let mut edges = Vec::new();
        for dst in 0..n {
            let cands = node_candidates(alphas, cell, dst, &eligible);
            let picks = match kind {
                DiscretizerKind::Darts { k } => select_darts(&cands, k),
                DiscretizerKind::Idarts { k } => select_pooled(&cands, k),
                DiscretizerKind::Xdarts { count_cell_inputs } => {
                    select_pooled(&cands, xdarts_count(dst, count_cell_inputs))
                }
            }
            .map_err(|e| Error::config(format!("{} node n{dst}: {e}", cell.as_str())))?;
            for (src, o) in picks {
                let g = alphas.node_groups(cell, dst).into_iter().find(|&g| alphas.groups()[g].key.src == src);
                let op = alphas.groups()[g.expect("picked source exists")].ops[o].clone();
                edges.push(GenotypeEdge { dst, src, op });
            }
        }
        edges.sort();
        cells.push(edges);
    }
    let reduce = cells.pop().expect("two cells");
    let normal = cells.pop().expect("two cells");
    Ok(Genotype {
        schema_version: GENOTYPE_SCHEMA_VERSION,
        normal,
        reduce,
        concat: (2..n + 2).collect(),
        space_id,
        zero_config,
        discretizer: kind,
    })
}

/// Rewrites the special slot of a searched genotype for the evaluation or
/// retraining phase.
pub fn apply_zero_config(genotype: &Genotype, config: ZeroConfig, target: Phase) -> Result<Genotype> {
    if target == Phase::Search {
        return Err(Error::config("zero-config substitution targets evaluation or retrain"));
    }
    let has_special = genotype.normal.iter().chain(&genotype.reduce).any(|e| ops::is_special(&e.op));
    if matches!(config, ZeroConfig::V0 | ZeroConfig::V1) {
        if has_special {
            return Err(Error::config(format!("{config} genotype contains a special op; masking failed upstream")));
        }
        return Ok(genotype.clone());
    }
    let replacement = config.slot(target).op_name().expect("V2-V4 have a slot in every phase");
    let mut out = genotype.clone();
    for cell in [CellKind::Normal, CellKind::Reduce] {
        let edges = out.edges_mut(cell);
        for e in edges.iter_mut() {
            if ops::is_special(&e.op) {
                e.op = replacement.to_string();
            }
        }
        edges.sort();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_config_rows() {
        use Slot::*;
        assert_eq!(ZeroConfig::V0.slots(), (Zero, Absent, Absent));
        assert_eq!(ZeroConfig::V1.slots(), (Absent, Absent, Absent));
        assert_eq!(ZeroConfig::V2.slots(), (Random, Random, Random));
        assert_eq!(ZeroConfig::V3.slots(), (Random, Random, Zero));
        assert_eq!(ZeroConfig::V4.slots(), (Random, Zero, Zero));
    }

    #[test]
    fn discretizer_kind_parses() {
        for s in ["darts:2", "idarts:3", "xdarts", "xdarts:nodes"] {
            assert_eq!(s.parse::<DiscretizerKind>().unwrap().to_string(), s);
        }
        assert_eq!("darts".parse::<DiscretizerKind>().unwrap(), DiscretizerKind::Darts { k: 2 });
        assert!("darts:0".parse::<DiscretizerKind>().is_err());
        assert!("gdas".parse::<DiscretizerKind>().is_err());
        let json = serde_json::to_string(&DiscretizerKind::Idarts { k: 2 }).unwrap();
        assert_eq!(json, r#"{"kind":"idarts","k":2}"#);
    }

    #[test]
    fn xdarts_counts() {
        assert_eq!((0..4).map(|j| xdarts_count(j, true)).sum::<usize>(), 14);
        assert_eq!(xdarts_count(0, false), 1);
        assert_eq!(xdarts_count(3, false), 3);
    }

    #[test]
    fn v0_masks_zero() {
        assert!(!ZeroConfig::V0.eligible("zero"));
        assert!(ZeroConfig::V0.eligible("conv_3"));
        assert!(ZeroConfig::V4.eligible("random"));
    }
}
