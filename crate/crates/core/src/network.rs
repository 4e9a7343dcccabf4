//! Search and evaluation networks: stem, cell stack with reductions,
//! auxiliary head and classifier, plus checkpoint files.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use icdarts_autograd::{Binding, Conv2dCfg, ParamKind, ParamStore, PoolCfg, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{AlphaTable, CellKind, CellShape, ContinuousCell, DiscreteCell, Genotype};
use crate::discretize::ZeroConfig;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Layer, Linear, Mode, Seq};
use crate::ops::{self, Phase};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    #[default]
    Conv3Bn,
    Identity,
    Conv1Bn,
    ConcatInputs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReduceKind {
    #[default]
    SearchedCell,
    AvgPool,
    MaxPool,
    Conv1S2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkTemplate {
    pub n_cells_search: usize,
    pub n_cells_eval: usize,
    pub n_cells_retrain: usize,
    pub init_channels: usize,
    pub n_nodes: usize,
    /// Stem width as a multiple of `init_channels`.
    pub stem_multiplier: usize,
    /// Explicit reduction cell indices; `None` uses `{⌊L/3⌋, ⌊2L/3⌋}`.
    pub reduction_positions: Option<Vec<usize>>,
    pub stem_kind: StemKind,
    pub reduce_kind: ReduceKind,
    pub aux_heads: bool,
    pub aux_weight: f64,
    /// Adapter width of each auxiliary branch.
    pub aux_width: usize,
    /// Drop-path rate of retrain networks.
    pub drop_path: f64,
    /// Upper bound of the uniform values emitted by the `random` op.
    pub random_high: f64,
}

impl Default for NetworkTemplate {
    fn default() -> Self {
        Self {
            n_cells_search: 8,
            n_cells_eval: 8,
            n_cells_retrain: 10,
            init_channels: 16,
            n_nodes: 4,
            stem_multiplier: 3,
            reduction_positions: None,
            stem_kind: StemKind::Conv3Bn,
            reduce_kind: ReduceKind::SearchedCell,
            aux_heads: true,
            aux_weight: 0.4,
            aux_width: 32,
            drop_path: 0.3,
            random_high: 1.0,
        }
    }
}

impl NetworkTemplate {
    pub fn reductions(&self, n_cells: usize) -> Result<Vec<usize>> {
        let r = match &self.reduction_positions {
            Some(p) => p.iter().copied().collect::<BTreeSet<_>>().into_iter().collect(),
            None => {
                let set: BTreeSet<usize> = [n_cells / 3, 2 * n_cells / 3].into_iter().collect();
                set.into_iter().collect::<Vec<_>>()
            }
        };
        if r.iter().any(|&i| i >= n_cells) {
            return Err(Error::config(format!("reduction positions {r:?} exceed {n_cells} cells")));
        }
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells_search == 0 || self.n_cells_eval == 0 || self.n_cells_retrain == 0 {
            return Err(Error::config("cell counts must be positive"));
        }
        if self.init_channels == 0 || self.n_nodes == 0 || self.stem_multiplier == 0 {
            return Err(Error::config("channels and nodes must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("drop_path must lie in [0, 1)"));
        }
        if self.aux_width == 0 || self.aux_weight < 0.0 {
            return Err(Error::config("aux_width must be positive and aux_weight nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Search,
    Eval,
}

#[derive(Clone, Debug)]
enum Stem {
    Layers(Seq),
    Identity,
    Concat,
}

#[derive(Clone, Debug)]
enum Block {
    Continuous(ContinuousCell),
    Discrete(DiscreteCell),
    Reducer(Seq),
}

#[derive(Clone, Debug)]
struct AuxHead {
    /// Cell indices whose outputs feed the head.
    taps: Vec<usize>,
    branches: Vec<Seq>,
    classifier: Linear,
}

/// Main and optional auxiliary logits.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub logits: Var,
    pub aux: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Network<F: Scalar = f32> {
    pub kind: NetKind,
    pub template: NetworkTemplate,
    pub store: ParamStore<F>,
    pub genotype: Option<Genotype>,
    pub n_classes: usize,
    pub in_channels: usize,
    /// Drop-path rate applied while training discrete cells.
    pub drop_path: f64,
    pub reductions: Vec<usize>,
    stem: Stem,
    blocks: Vec<Block>,
    aux: Option<AuxHead>,
    classifier: Linear,
}

/// What fills each cell slot of a stack under construction.
enum Filler<'a, F: Scalar> {
    Search(&'a AlphaTable<F>),
    Eval(&'a Genotype),
}

impl<F: Scalar> Network<F> {
    #[allow(clippy::too_many_arguments)]
    fn build(
        kind: NetKind,
        template: &NetworkTemplate,
        filler: Filler<'_, F>,
        n_cells: usize,
        in_channels: usize,
        n_classes: usize,
        seed: u64,
        with_aux: bool,
    ) -> Result<Self> {
        template.validate()?;
        if n_classes < 2 || in_channels == 0 {
            return Err(Error::config("need at least two classes and one input channel"));
        }
        let reductions = template.reductions(n_cells)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        let c = template.init_channels;
        let c_stem = template.stem_multiplier * c;

        let (stem, stem_out) = match template.stem_kind {
            StemKind::Conv3Bn => (
                Stem::Layers(Seq(vec![
                    Layer::Conv(init.conv("stem.conv", in_channels, c_stem, (3, 3), Conv2dCfg::new(1, 1))),
                    Layer::Bn(init.batch_norm("stem.bn", c_stem)),
                ])),
                c_stem,
            ),
            StemKind::Conv1Bn => (
                Stem::Layers(Seq(vec![
                    Layer::Conv(init.conv("stem.conv", in_channels, c_stem, (1, 1), Conv2dCfg::new(1, 0))),
                    Layer::Bn(init.batch_norm("stem.bn", c_stem)),
                ])),
                c_stem,
            ),
            StemKind::Identity => (Stem::Identity, in_channels),
            StemKind::ConcatInputs => (Stem::Concat, 2 * in_channels),
        };

        let mut c_pp = stem_out;
        let mut c_p = stem_out;
        let mut c_curr = c;
        let mut reduction_prev = false;
        let mut blocks = Vec::with_capacity(n_cells);
        let mut widths = Vec::with_capacity(n_cells);
        for i in 0..n_cells {
            let reduction = reductions.contains(&i);
            if reduction {
                c_curr *= 2;
            }
            let cell_kind = if reduction { CellKind::Reduce } else { CellKind::Normal };
            let prefix = format!("cell{i}");
            let shape = CellShape { kind: cell_kind, n_nodes: template.n_nodes, c_pp, c_p, c: c_curr, reduction_prev };
            let (block, out) = if reduction && template.reduce_kind != ReduceKind::SearchedCell {
                reducer(template.reduce_kind, &mut init, &prefix, c_p, template.n_nodes * c_curr)
            } else {
                match &filler {
                    Filler::Search(alphas) => {
                        let cell = ContinuousCell::new(shape, *alphas, &mut init, &prefix, template.random_high)?;
                        let out = cell.out_channels();
                        (Block::Continuous(cell), out)
                    }
                    Filler::Eval(g) => {
                        let cell = DiscreteCell::new(
                            shape,
                            g.edges(cell_kind),
                            &g.concat,
                            &mut init,
                            &prefix,
                            template.random_high,
                        )?;
                        let out = cell.out_channels();
                        (Block::Discrete(cell), out)
                    }
                }
            };
            blocks.push(block);
            widths.push(out);
            reduction_prev = reduction;
            c_pp = c_p;
            c_p = out;
        }

        let aux = if with_aux {
            let last_normal = (0..n_cells)
                .rev()
                .find(|i| !reductions.contains(i))
                .ok_or_else(|| Error::config("auxiliary head needs a normal cell"))?;
            let mut taps: Vec<usize> = reductions.clone();
            taps.push(last_normal);
            taps.sort_unstable();
            taps.dedup();
            let branches = taps
                .iter()
                .map(|&t| init.relu_conv_bn(&format!("aux.branch{t}"), widths[t], template.aux_width, 1))
                .collect();
            let classifier = init.linear("aux.classifier", taps.len() * template.aux_width, n_classes);
            Some(AuxHead { taps, branches, classifier })
        } else {
            None
        };
        let classifier = init.linear("classifier", c_p, n_classes);
        let genotype = match filler {
            Filler::Eval(g) => Some(g.clone()),
            Filler::Search(_) => None,
        };
        Ok(Self {
            kind,
            template: template.clone(),
            store,
            genotype,
            n_classes,
            in_channels,
            drop_path: 0.0,
            reductions,
            stem,
            blocks,
            aux,
            classifier,
        })
    }

    pub fn has_aux(&self) -> bool {
        self.aux.is_some()
    }

    pub fn n_cells(&self) -> usize {
        self.blocks.len()
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Runs the network on `x` (shape `(B, C, H, W)`). Search networks need the
    /// per-group softmax weights of the alpha table.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_with_aux(
        &mut self,
        tape: &mut Tape<F>,
        binding: &mut Binding,
        x: Var,
        alpha_weights: Option<&[Var]>,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Outputs> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::config(format!("expected (B, {}, H, W) input, got {shape:?}", self.in_channels)));
        }
        let min_side = shape[2].min(shape[3]) >> self.reductions.len();
        if self.aux.is_some() && min_side < 4 {
            return Err(Error::config(format!(
                "auxiliary head needs at least 4x4 features at the last cell, got {min_side}x{min_side}"
            )));
        }
        if self.kind == NetKind::Search && alpha_weights.is_none() {
            return Err(Error::config("search network forward needs alpha weights"));
        }
        let drop_prob = if self.kind == NetKind::Eval { self.drop_path } else { 0.0 };
        let mut ctx = Ctx { tape, store: &mut self.store, binding, mode, rng, drop_prob };
        let (mut s0, mut s1) = match &self.stem {
            Stem::Layers(seq) => {
                let s = seq.forward(&mut ctx, x);
                (s, s)
            }
            Stem::Identity => (x, x),
            Stem::Concat => {
                let s = ctx.tape.concat(&[x, x]);
                (s, s)
            }
        };
        let mut tapped = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let out = match block {
                Block::Continuous(cell) => cell.forward(&mut ctx, s0, s1, alpha_weights.expect("checked above")),
                Block::Discrete(cell) => cell.forward(&mut ctx, s0, s1),
                Block::Reducer(seq) => seq.forward(&mut ctx, s1),
            };
            if self.aux.as_ref().is_some_and(|a| a.taps.contains(&i)) {
                tapped.push(out);
            }
            s0 = s1;
            s1 = out;
        }
        let pooled = ctx.tape.global_avg_pool(s1);
        let logits = self.classifier.forward(&mut ctx, pooled);
        let aux = match &self.aux {
            Some(head) => {
                let feats: Vec<Var> = head
                    .branches
                    .iter()
                    .zip(&tapped)
                    .map(|(branch, &t)| {
                        let y = branch.forward(&mut ctx, t);
                        ctx.tape.global_avg_pool(y)
                    })
                    .collect();
                let joined = ctx.tape.concat(&feats);
                Some(head.classifier.forward(&mut ctx, joined))
            }
            None => None,
        };
        Ok(Outputs { logits, aux })
    }

    /// Copies every parameter whose name and shape match one in `other`.
    /// Returns the number of tensors copied.
    pub fn inherit_from(&mut self, other: &Network<F>) -> usize {
        let mut copied = 0;
        for (_, p) in self.store.iter_mut() {
            if let Some(id) = other.store.id(&p.name) {
                let src = other.store.value(id);
                if src.shape() == p.value.shape() {
                    p.value = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

fn reducer<F: Scalar>(kind: ReduceKind, init: &mut Init<F>, prefix: &str, c_in: usize, c_out: usize) -> (Block, usize) {
    let pool = PoolCfg::new(3, 2, 1);
    match kind {
        ReduceKind::AvgPool => (Block::Reducer(Seq(vec![Layer::AvgPool(pool)])), c_in),
        ReduceKind::MaxPool => (Block::Reducer(Seq(vec![Layer::MaxPool(pool)])), c_in),
        ReduceKind::Conv1S2 => (Block::Reducer(init.relu_conv_bn(&format!("{prefix}.reduce"), c_in, c_out, 2)), c_out),
        ReduceKind::SearchedCell => unreachable!("searched reductions are cells"),
    }
}

/// Shallow stack of continuous cells sharing `alphas` across cells of a kind.
pub fn build_search_network<F: Scalar>(
    template: &NetworkTemplate,
    alphas: &AlphaTable<F>,
    in_channels: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Network<F>> {
    if alphas.n_nodes() != template.n_nodes {
        return Err(Error::config(format!(
            "alpha table has {} nodes, template needs {}",
            alphas.n_nodes(),
            template.n_nodes
        )));
    }
    Network::build(
        NetKind::Search,
        template,
        Filler::Search(alphas),
        template.n_cells_search,
        in_channels,
        n_classes,
        seed,
        false,
    )
}

/// Stack of `n_cells` discrete cells built from `genotype`, which must only
/// use ops of the `phase` space.
#[allow(clippy::too_many_arguments)]
pub fn build_eval_network<F: Scalar>(
    genotype: &Genotype,
    template: &NetworkTemplate,
    zero_config: ZeroConfig,
    phase: Phase,
    n_cells: usize,
    in_channels: usize,
    n_classes: usize,
    seed: u64,
) -> Result<Network<F>> {
    let space = ops::resolve_names(genotype.space_id, zero_config, phase);
    for e in genotype.normal.iter().chain(&genotype.reduce) {
        if !space.contains(&e.op) {
            return Err(Error::config(format!(
                "genotype op `{}` is not in the {:?} space of {} under {zero_config}",
                e.op, phase, genotype.space_id
            )));
        }
    }
    if genotype.n_nodes() > template.n_nodes {
        return Err(Error::config(format!(
            "genotype uses {} nodes, template allows {}",
            genotype.n_nodes(),
            template.n_nodes
        )));
    }
    let mut net = Network::build(
        NetKind::Eval,
        template,
        Filler::<F>::Eval(genotype),
        n_cells,
        in_channels,
        n_classes,
        seed,
        template.aux_heads,
    )?;
    if phase == Phase::Retrain {
        net.drop_path = template.drop_path;
    }
    Ok(net)
}

/// `CE(logits) + aux_weight · CE(aux)`.
pub fn classification_loss<F: Scalar>(tape: &mut Tape<F>, out: Outputs, labels: &[usize], aux_weight: f64) -> Var {
    let main = tape.cross_entropy(out.logits, labels);
    match out.aux {
        Some(aux) if aux_weight > 0.0 => {
            let a = tape.cross_entropy(aux, labels);
            tape.linear_comb(&[(main, 1.0), (a, aux_weight)])
        }
        _ => main,
    }
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "checkpoint.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub template: NetworkTemplate,
    pub genotype: Option<Genotype>,
    pub seed: u64,
    pub epoch: usize,
    pub n_classes: usize,
    pub in_channels: usize,
    pub tensors: Vec<TensorEntry>,
}

/// Writes the manifest and the little-endian f32 blob of every parameter and buffer.
pub fn save_checkpoint<F: Scalar>(net: &Network<F>, dir: &Path, seed: u64, epoch: usize) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (_, p) in net.store.iter() {
        tensors.push(TensorEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset });
        offset += p.value.len();
        for v in p.value.data() {
            blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        template: net.template.clone(),
        genotype: net.genotype.clone(),
        seed,
        epoch,
        n_classes: net.n_classes,
        in_channels: net.in_channels,
        tensors,
    };
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(CHECKPOINT_BLOB);
    let mut f = std::fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

/// Loads a checkpoint into a network of the same architecture.
pub fn load_checkpoint<F: Scalar>(net: &mut Network<F>, dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let bpath = dir.join(CHECKPOINT_BLOB);
    let mut bytes = Vec::new();
    std::fs::File::open(&bpath)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data(format!("{} is not a whole number of f32 values", bpath.display())));
    }
    let floats: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if manifest.tensors.len() != net.store.len() {
        return Err(Error::data(format!(
            "checkpoint has {} tensors, network has {}",
            manifest.tensors.len(),
            net.store.len()
        )));
    }
    for entry in &manifest.tensors {
        let id = net
            .store
            .id(&entry.name)
            .ok_or_else(|| Error::data(format!("checkpoint tensor `{}` unknown to network", entry.name)))?;
        let dst = net.store.value_mut(id);
        if dst.shape() != entry.shape.as_slice() {
            return Err(Error::data(format!("shape mismatch for `{}`", entry.name)));
        }
        let src = floats
            .get(entry.offset..entry.offset + dst.len())
            .ok_or_else(|| Error::data(format!("checkpoint blob truncated at `{}`", entry.name)))?;
        *dst = Tensor::from_fn(&entry.shape, |i| F::of(src[i] as f64));
    }
    Ok(manifest)
}
