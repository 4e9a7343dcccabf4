//! Search cells: the DAG of softmax-mixed edges, the architecture
//! parameters that weight them, and the discretized genotype.
//!
//! State indexing inside a cell: `0` is `c_{k-2}`, `1` is `c_{k-1}` and
//! `2 + j` is intermediate node `n_j`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use icdarts_autograd::{Binding, ParamId, ParamKind, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::discretize::{DiscretizerKind, ZeroConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Layer, Seq};
use crate::ops::{self, Operation, SpaceId};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;
pub const ALPHA_INIT_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Normal,
    Reduce,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduce => "reduce",
        }
    }
}

/// One (destination node, source state) edge group of a cell kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EdgeKey {
    pub kind: CellKind,
    pub dst: usize,
    pub src: usize,
}

impl fmt::Display for EdgeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.kind.as_str(), self.dst, self.src)
    }
}

impl FromStr for EdgeKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed edge key `{s}`"));
        let mut parts = s.split(':');
        let kind = match parts.next() {
            Some("normal") => CellKind::Normal,
            Some("reduce") => CellKind::Reduce,
            _ => return Err(bad()),
        };
        let dst = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let src = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        if parts.next().is_some() || src >= dst + 2 {
            return Err(bad());
        }
        Ok(EdgeKey { kind, dst, src })
    }
}

/// Edge keys of one cell kind in evaluation order (by destination, then source).
pub fn edge_keys(kind: CellKind, n_nodes: usize) -> Vec<EdgeKey> {
    (0..n_nodes).flat_map(|dst| (0..dst + 2).map(move |src| EdgeKey { kind, dst, src })).collect()
}

/// `Σ_{j<N} (j + 2)`.
pub fn groups_per_kind(n_nodes: usize) -> usize {
    (0..n_nodes).map(|j| j + 2).sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AlphaGroup {
    pub key: EdgeKey,
    pub ops: Vec<String>,
}

/// Architecture parameters: one trainable vector per edge group, normal
/// groups first. Groups may carry different op lists.
#[derive(Clone, Debug)]
pub struct AlphaTable<F: Scalar = f32> {
    n_nodes: usize,
    groups: Vec<AlphaGroup>,
    ids: Vec<ParamId>,
    store: ParamStore<F>,
}

impl<F: Scalar> AlphaTable<F> {
    /// Every group gets the same op list.
    pub fn init(n_nodes: usize, ops: &[String], seed: u64) -> Result<Self> {
        Self::with_pools(n_nodes, |_| ops.to_vec(), seed)
    }

    /// `pools` chooses the op list of each edge group.
    pub fn with_pools(n_nodes: usize, mut pools: impl FnMut(EdgeKey) -> Vec<String>, seed: u64) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::config("cells need at least one node"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, ALPHA_INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        let mut groups = Vec::new();
        let mut ids = Vec::new();
        for kind in [CellKind::Normal, CellKind::Reduce] {
            for key in edge_keys(kind, n_nodes) {
                let ops = pools(key);
                if ops.is_empty() {
                    return Err(Error::config(format!("edge group {key} has no candidate ops")));
                }
                let v = Tensor::from_fn(&[ops.len()], |_| F::of(normal.sample(&mut rng)));
                ids.push(store.add(key.to_string(), v, ParamKind::Trainable));
                groups.push(AlphaGroup { key, ops });
            }
        }
        Ok(Self { n_nodes, groups, ids, store })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn groups(&self) -> &[AlphaGroup] {
        &self.groups
    }

    pub fn group_index(&self, key: EdgeKey) -> Option<usize> {
        self.groups.iter().position(|g| g.key == key)
    }

    /// Indices of the groups feeding node `dst` of `kind`, in source order.
    pub fn node_groups(&self, kind: CellKind, dst: usize) -> Vec<usize> {
        (0..dst + 2).filter_map(|src| self.group_index(EdgeKey { kind, dst, src })).collect()
    }

    pub fn vector(&self, group: usize) -> &[F] {
        self.store.value(self.ids[group]).data()
    }

    pub fn vector_mut(&mut self, group: usize) -> &mut [F] {
        self.store.value_mut(self.ids[group]).data_mut()
    }

    /// Softmax of one group's vector, computed in f64.
    pub fn softmax(&self, group: usize) -> Vec<f64> {
        softmax_f64(&self.vector(group).iter().map(|v| v.as_f64()).collect::<Vec<_>>())
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    /// Binds every vector onto `tape` and returns the per-group softmax weights.
    pub fn softmax_vars(&self, tape: &mut Tape<F>, binding: &mut Binding) -> Vec<Var> {
        self.ids
            .iter()
            .map(|&id| {
                let v = binding.bind(tape, &self.store, id);
                tape.softmax(v)
            })
            .collect()
    }

    /// Whether every group has the same op list.
    pub fn is_uniform(&self) -> bool {
        self.groups.windows(2).all(|w| w[0].ops == w[1].ops)
    }

    pub fn cast<G: Scalar>(&self) -> AlphaTable<G> {
        let mut store = ParamStore::new();
        let ids = self
            .store
            .iter()
            .map(|(_, p)| store.add(p.name.clone(), p.value.cast(), p.kind))
            .collect();
        AlphaTable { n_nodes: self.n_nodes, groups: self.groups.clone(), ids, store }
    }
}

/// `init_alphas` over a shared op list, in the default f32 precision.
pub fn init_alphas(n_nodes: usize, ops: &[String], seed: u64) -> Result<AlphaTable> {
    AlphaTable::init(n_nodes, ops, seed)
}

pub fn softmax_f64(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GenotypeEdge {
    pub dst: usize,
    pub src: usize,
    pub op: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Genotype {
    pub schema_version: u32,
    pub normal: Vec<GenotypeEdge>,
    pub reduce: Vec<GenotypeEdge>,
    /// State indices concatenated into the cell output.
    pub concat: Vec<usize>,
    pub space_id: SpaceId,
    pub zero_config: ZeroConfig,
    pub discretizer: DiscretizerKind,
}

impl Genotype {
    pub fn edges(&self, kind: CellKind) -> &[GenotypeEdge] {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduce => &self.reduce,
        }
    }

    pub fn edges_mut(&mut self, kind: CellKind) -> &mut Vec<GenotypeEdge> {
        match kind {
            CellKind::Normal => &mut self.normal,
            CellKind::Reduce => &mut self.reduce,
        }
    }

    /// Number of intermediate nodes implied by the edges and concat set.
    pub fn n_nodes(&self) -> usize {
        let from_edges = self.normal.iter().chain(&self.reduce).map(|e| e.dst + 1).max().unwrap_or(0);
        let from_concat = self.concat.iter().map(|&c| c.saturating_sub(1)).max().unwrap_or(0);
        from_edges.max(from_concat)
    }

    pub fn contains_op(&self, op: &str) -> bool {
        self.normal.iter().chain(&self.reduce).any(|e| e.op == op)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `Σ_o softmax(alpha)_o · o(x)`.
pub fn edge_mixture<F: Scalar>(ctx: &mut Ctx<F>, x: Var, alpha: Var, ops: &[Operation]) -> Result<Var> {
    let n = ctx.tape.value(alpha).len();
    if n != ops.len() {
        return Err(Error::config(format!("{} mixture weights for {} ops", n, ops.len())));
    }
    let w = ctx.tape.softmax(alpha);
    Ok(mix_weighted(ctx, x, w, ops))
}

/// Mixture with precomputed (already normalized) weights.
pub fn mix_weighted<F: Scalar>(ctx: &mut Ctx<F>, x: Var, weights: Var, ops: &[Operation]) -> Var {
    let outs: Vec<Var> = ops.iter().map(|op| op.forward(ctx, x)).collect();
    ctx.tape.mix(&outs, weights)
}

/// Elementwise sum of same-shaped edge outputs.
pub fn node_output<F: Scalar>(tape: &mut Tape<F>, inputs: &[Var]) -> Result<Var> {
    let first = inputs.first().ok_or_else(|| Error::config("node without inputs"))?;
    let shape = tape.value(*first).shape().to_vec();
    for v in inputs {
        if tape.value(*v).shape() != shape.as_slice() {
            return Err(Error::config(format!(
                "node input shapes differ: {:?} vs {:?}",
                tape.value(*v).shape(),
                shape
            )));
        }
    }
    if inputs.len() == 1 {
        return Ok(*first);
    }
    Ok(tape.sum(inputs))
}

fn preprocessors<F: Scalar>(
    init: &mut Init<F>,
    prefix: &str,
    c_pp: usize,
    c_p: usize,
    c: usize,
    reduction_prev: bool,
) -> (Seq, Seq) {
    let pre0 = if reduction_prev {
        Seq(vec![Layer::FactorizedReduce(init.factorized_reduce(&format!("{prefix}.pre0"), c_pp, c))])
    } else {
        init.relu_conv_bn(&format!("{prefix}.pre0"), c_pp, c, 1)
    };
    let pre1 = init.relu_conv_bn(&format!("{prefix}.pre1"), c_p, c, 1);
    (pre0, pre1)
}

fn edge_stride(kind: CellKind, src: usize) -> usize {
    if kind == CellKind::Reduce && src < 2 {
        2
    } else {
        1
    }
}

/// Shape information shared by both cell flavours.
#[derive(Clone, Copy, Debug)]
pub struct CellShape {
    pub kind: CellKind,
    pub n_nodes: usize,
    /// Channels of `c_{k-2}` and `c_{k-1}`.
    pub c_pp: usize,
    pub c_p: usize,
    /// Node width.
    pub c: usize,
    pub reduction_prev: bool,
}

#[derive(Clone, Debug)]
pub struct MixedEdge {
    pub key: EdgeKey,
    /// Index into the alpha table.
    pub group: usize,
    pub ops: Vec<Operation>,
}

/// A cell whose every edge mixes all of its group's candidate ops.
#[derive(Clone, Debug)]
pub struct ContinuousCell {
    pub shape: CellShape,
    pre0: Seq,
    pre1: Seq,
    pub edges: Vec<MixedEdge>,
}

impl ContinuousCell {
    pub fn new<F: Scalar>(
        shape: CellShape,
        alphas: &AlphaTable<F>,
        init: &mut Init<F>,
        prefix: &str,
        random_high: f64,
    ) -> Result<Self> {
        if alphas.n_nodes() != shape.n_nodes {
            return Err(Error::config(format!(
                "alpha table has {} nodes, cell needs {}",
                alphas.n_nodes(),
                shape.n_nodes
            )));
        }
        let (pre0, pre1) = preprocessors(init, prefix, shape.c_pp, shape.c_p, shape.c, shape.reduction_prev);
        let mut edges = Vec::new();
        for key in edge_keys(shape.kind, shape.n_nodes) {
            let group = alphas.group_index(key).ok_or_else(|| Error::config(format!("no alphas for edge {key}")))?;
            let stride = edge_stride(shape.kind, key.src);
            let ops = alphas.groups()[group]
                .ops
                .iter()
                .enumerate()
                .map(|(i, name)| {
                    let p = format!("{prefix}.e{}_{}.{i}", key.dst, key.src);
                    ops::instantiate_named(name, shape.c, shape.c, stride, init, &p, random_high)
                })
                .collect::<Result<Vec<_>>>()?;
            edges.push(MixedEdge { key, group, ops });
        }
        Ok(Self { shape, pre0, pre1, edges })
    }

    pub fn out_channels(&self) -> usize {
        self.shape.n_nodes * self.shape.c
    }

    /// `weights[g]` is the softmax of alpha group `g`.
    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, s0: Var, s1: Var, weights: &[Var]) -> Var {
        let s0 = self.pre0.forward(ctx, s0);
        let s1 = self.pre1.forward(ctx, s1);
        let mut states = vec![s0, s1];
        let mut edges = self.edges.iter().peekable();
        for dst in 0..self.shape.n_nodes {
            let mut outs = Vec::with_capacity(dst + 2);
            while let Some(edge) = edges.next_if(|e| e.key.dst == dst) {
                outs.push(mix_weighted(ctx, states[edge.key.src], weights[edge.group], &edge.ops));
            }
            let node = node_output(ctx.tape, &outs).expect("edges of one node share a shape");
            states.push(node);
        }
        ctx.tape.concat(&states[2..])
    }
}

/// A cell with fixed edges from a genotype.
#[derive(Clone, Debug)]
pub struct DiscreteCell {
    pub shape: CellShape,
    pre0: Seq,
    pre1: Seq,
    pub edges: Vec<(GenotypeEdge, Operation)>,
    pub concat: Vec<usize>,
}

/// Checks that every node has an input, sources precede destinations and
/// the concat set names intermediate nodes.
pub fn validate_cell(edges: &[GenotypeEdge], concat: &[usize], n_nodes: usize) -> Result<()> {
    for e in edges {
        if e.dst >= n_nodes || e.src >= e.dst + 2 {
            return Err(Error::config(format!("edge {} -> n{} is not topologically ordered", e.src, e.dst)));
        }
    }
    for j in 0..n_nodes {
        if !edges.iter().any(|e| e.dst == j) {
            return Err(Error::config(format!("node n{j} has no incoming edge")));
        }
    }
    if concat.is_empty() || concat.iter().any(|&c| c < 2 || c >= n_nodes + 2) {
        return Err(Error::config(format!("concat set {concat:?} must name intermediate nodes")));
    }
    Ok(())
}

impl DiscreteCell {
    pub fn new<F: Scalar>(
        shape: CellShape,
        edges: &[GenotypeEdge],
        concat: &[usize],
        init: &mut Init<F>,
        prefix: &str,
        random_high: f64,
    ) -> Result<Self> {
        validate_cell(edges, concat, shape.n_nodes)?;
        let (pre0, pre1) = preprocessors(init, prefix, shape.c_pp, shape.c_p, shape.c, shape.reduction_prev);
        let mut sorted = edges.to_vec();
        sorted.sort_by_key(|e| e.dst);
        let built = sorted
            .into_iter()
            .map(|e| {
                let stride = edge_stride(shape.kind, e.src);
                let p = format!("{prefix}.n{}_{}.{}", e.dst, e.src, e.op);
                let op = ops::instantiate_named(&e.op, shape.c, shape.c, stride, init, &p, random_high)?;
                Ok((e, op))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { shape, pre0, pre1, edges: built, concat: concat.to_vec() })
    }

    pub fn out_channels(&self) -> usize {
        self.concat.len() * self.shape.c
    }

    pub fn forward<F: Scalar>(&self, ctx: &mut Ctx<F>, s0: Var, s1: Var) -> Var {
        let s0 = self.pre0.forward(ctx, s0);
        let s1 = self.pre1.forward(ctx, s1);
        let mut states = vec![s0, s1];
        let drop = ctx.training() && ctx.drop_prob > 0.0;
        let mut edges = self.edges.iter().peekable();
        for dst in 0..self.shape.n_nodes {
            let mut outs = Vec::new();
            while let Some((e, op)) = edges.next_if(|(e, _)| e.dst == dst) {
                let mut y = op.forward(ctx, states[e.src]);
                if drop && !op.is_identity() {
                    y = drop_path(ctx, y);
                }
                outs.push(y);
            }
            let node = node_output(ctx.tape, &outs).expect("edges of one node share a shape");
            states.push(node);
        }
        let picked: Vec<Var> = self.concat.iter().map(|&i| states[i]).collect();
        if picked.len() == 1 {
            picked[0]
        } else {
            ctx.tape.concat(&picked)
        }
    }
}

/// Zeroes whole samples with probability `ctx.drop_prob`, rescaling survivors.
fn drop_path<F: Scalar>(ctx: &mut Ctx<F>, x: Var) -> Var {
    let keep = 1.0 - ctx.drop_prob;
    let n = ctx.tape.value(x).shape()[0];
    let scale = (0..n)
        .map(|_| if ctx.rng.random::<f64>() < keep { F::of(1.0 / keep) } else { F::zero() })
        .collect();
    ctx.tape.sample_scale(x, scale)
}
