//! Tournament over random op pools: leaf runs search over seeded subsets of
//! the master space, survivors of each run are the top half by alpha, and
//! pairs of runs merge their survivors for the next tier up.
//!
//! Tiers are numbered from the leaves (`T`, with `2^(T-1)` runs) down to the
//! root (`1`, one run).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::{edge_keys, AlphaTable, CellKind, Genotype};
use crate::error::{Error, Result};
use crate::harness::stats::{genotype_stats, GenotypeStats};
use crate::ops::{self, SpaceId};
use crate::search::{run_search, SearchConfig, SearchData};

/// Op list per edge group, keyed by `kind:dst:src`.
pub type Pools = BTreeMap<String, Vec<String>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TournamentConfig {
    /// Number of tiers `T`.
    pub tiers: usize,
    pub o_max: usize,
    pub seed: u64,
    /// Search settings shared by every run; `pools`, `seed` and `epochs` are set per run.
    pub search: SearchConfig,
    /// Search epochs of each run; `None` uses a third of `search.epochs` (at least one).
    pub tier_epochs: Option<usize>,
    /// Master op list; `None` uses the combined space.
    pub master: Option<Vec<String>>,
}

impl Default for TournamentConfig {
    fn default() -> Self {
        Self { tiers: 3, o_max: 8, seed: 0, search: SearchConfig::default(), tier_epochs: None, master: None }
    }
}

impl TournamentConfig {
    pub fn master_space(&self) -> Vec<String> {
        self.master.clone().unwrap_or_else(|| ops::combined_space().into_iter().map(|s| s.name).collect())
    }

    pub fn epochs_per_run(&self) -> usize {
        self.tier_epochs.unwrap_or((self.search.epochs / 3).max(1))
    }

    fn validate(&self) -> Result<()> {
        if self.tiers == 0 {
            return Err(Error::config("a tournament needs at least one tier"));
        }
        if self.o_max == 0 {
            return Err(Error::config("o_max must be positive"));
        }
        let master = self.master_space();
        if let Some(op) = master.iter().find(|o| ops::op_spec(o).is_none() || ops::is_special(o)) {
            return Err(Error::config(format!("master space op `{op}` is not a regular catalog op")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub tier: usize,
    pub run: usize,
    pub seed: u64,
    pub pools: Pools,
    pub survivors: Option<Pools>,
    pub genotype: Option<Genotype>,
    pub record_dir: Option<PathBuf>,
}

impl RunEntry {
    pub fn done(&self) -> bool {
        self.genotype.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierStats {
    pub tier: usize,
    pub op_counts: BTreeMap<String, usize>,
    pub depths: Vec<usize>,
}

/// Persistent bracket: every run of every tier started so far.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TierState {
    pub config: TournamentConfig,
    /// Runs grouped by tier, leaves first.
    pub tiers: Vec<Vec<RunEntry>>,
    pub stats: Vec<TierStats>,
    pub final_genotype: Option<Genotype>,
}

impl TierState {
    pub fn runs_completed(&self) -> usize {
        self.tiers.iter().flatten().filter(|r| r.done()).count()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

/// Uniform `o_max`-subsets of `master` for every edge group of every leaf run,
/// listed in master order.
pub fn spawn_leaf_pools(master: &[String], o_max: usize, n_runs: usize, n_nodes: usize, seed: u64) -> Result<Vec<Pools>> {
    if o_max > master.len() {
        return Err(Error::config(format!("o_max {o_max} exceeds the {} master ops", master.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let mut pools = Pools::new();
        for kind in [CellKind::Normal, CellKind::Reduce] {
            for key in edge_keys(kind, n_nodes) {
                let mut idx = sample(&mut rng, master.len(), o_max).into_vec();
                idx.sort_unstable();
                pools.insert(key.to_string(), idx.into_iter().map(|i| master[i].clone()).collect());
            }
        }
        runs.push(pools);
    }
    Ok(runs)
}

/// Keeps the `⌈n/2⌉` ops of `pool` with the largest weights; ties go to the
/// earlier op. Survivors keep their pool order.
pub fn prune_pool(pool: &[String], weights: &[f64]) -> Result<Vec<String>> {
    if pool.len() != weights.len() {
        return Err(Error::config(format!("{} weights for a pool of {}", weights.len(), pool.len())));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = order.into_iter().take(pool.len().div_ceil(2)).collect();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| pool[i].clone()).collect())
}

/// Prunes every group of a finished run. The alpha vector of a group is its
/// pool followed by any special op, which never survives.
pub fn prune_top_half(alphas: &AlphaTable, pools: &Pools) -> Result<Pools> {
    let mut out = Pools::new();
    for (g, group) in alphas.groups().iter().enumerate() {
        let key = group.key.to_string();
        let pool = pools.get(&key).ok_or_else(|| Error::config(format!("no pool for edge group {key}")))?;
        if group.ops.len() < pool.len() || group.ops[..pool.len()] != pool[..] {
            return Err(Error::config(format!("alpha ops of {key} do not extend its pool")));
        }
        let softmax = alphas.softmax(g);
        out.insert(key, prune_pool(pool, &softmax[..pool.len()])?);
    }
    Ok(out)
}

/// Per-group union: left entries in order, then unseen right entries.
pub fn merge_pools(left: &Pools, right: &Pools) -> Result<Pools> {
    if !left.keys().eq(right.keys()) {
        return Err(Error::config("merged pools cover different edge groups"));
    }
    Ok(left
        .iter()
        .map(|(k, l)| {
            let mut merged = l.clone();
            for op in &right[k] {
                if !merged.contains(op) {
                    merged.push(op.clone());
                }
            }
            (k.clone(), merged)
        })
        .collect())
}

fn run_seed(base: u64, tier: usize, run: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add((tier as u64) << 20).wrapping_add(run as u64)
}

/// Result of one `run_tournament` call.
#[derive(Clone, Debug)]
pub struct TournamentOutcome {
    pub state: TierState,
    /// Set once the root run has finished.
    pub genotype: Option<Genotype>,
}

/// Fresh bracket with the leaf tier populated.
pub fn init_state(config: &TournamentConfig) -> Result<TierState> {
    config.validate()?;
    let n_leaves = 1usize << (config.tiers - 1);
    let pools = spawn_leaf_pools(
        &config.master_space(),
        config.o_max,
        n_leaves,
        config.search.template.n_nodes,
        config.seed,
    )?;
    let leaves = pools
        .into_iter()
        .enumerate()
        .map(|(r, pools)| RunEntry {
            tier: config.tiers,
            run: r,
            seed: run_seed(config.seed, config.tiers, r),
            pools,
            survivors: None,
            genotype: None,
            record_dir: None,
        })
        .collect();
    Ok(TierState { config: config.clone(), tiers: vec![leaves], stats: Vec::new(), final_genotype: None })
}

/// Runs the bracket from leaves to root. With `dir`, state is persisted to
/// `dir/tournament.json` after every run and resumed from there if present.
/// `max_runs` bounds how many searches this call may execute.
pub fn run_tournament(
    config: &TournamentConfig,
    data: &SearchData,
    dir: Option<&Path>,
    max_runs: Option<usize>,
) -> Result<TournamentOutcome> {
    let state_path = dir.map(|d| d.join("tournament.json"));
    let mut state = match &state_path {
        Some(p) if p.exists() => {
            let s = TierState::load(p)?;
            if s.config != *config {
                return Err(Error::config(format!("{} was written by a different configuration", p.display())));
            }
            s
        }
        _ => init_state(config)?,
    };
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let persist = |s: &TierState| -> Result<()> {
        match &state_path {
            Some(p) => s.save(p),
            None => Ok(()),
        }
    };
    persist(&state)?;
    let mut budget = max_runs.unwrap_or(usize::MAX);

    loop {
        let level = state.tiers.len() - 1;
        let tier = config.tiers - level;
        for r in 0..state.tiers[level].len() {
            if state.tiers[level][r].done() {
                continue;
            }
            if budget == 0 {
                return Ok(TournamentOutcome { state, genotype: None });
            }
            budget -= 1;
            let entry = &state.tiers[level][r];
            let mut sc = config.search.clone();
            sc.seed = entry.seed;
            sc.epochs = config.epochs_per_run();
            sc.space = SpaceId::Combined;
            sc.pools = Some(entry.pools.clone());
            let run_dir = dir.map(|d| d.join(format!("tier{tier}_run{r}")));
            info!("tournament tier {tier} run {r}");
            let record = run_search(&sc, data, run_dir.as_deref())?;
            let survivors = prune_top_half(&record.alphas, &entry.pools)?;
            let entry = &mut state.tiers[level][r];
            entry.survivors = Some(survivors);
            entry.genotype = Some(record.genotype);
            entry.record_dir = run_dir;
            persist(&state)?;
        }

        let runs = &state.tiers[level];
        if state.stats.len() <= level {
            state.stats.push(tier_stats(tier, runs, config)?);
        }
        if tier == 1 {
            let g = runs[0].genotype.clone().expect("root finished");
            state.final_genotype = Some(g.clone());
            persist(&state)?;
            return Ok(TournamentOutcome { state, genotype: Some(g) });
        }
        let next = (0..runs.len() / 2)
            .map(|r| {
                let left = runs[2 * r].survivors.as_ref().expect("tier finished");
                let right = runs[2 * r + 1].survivors.as_ref().expect("tier finished");
                Ok(RunEntry {
                    tier: tier - 1,
                    run: r,
                    seed: run_seed(config.seed, tier - 1, r),
                    pools: merge_pools(left, right)?,
                    survivors: None,
                    genotype: None,
                    record_dir: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        state.tiers.push(next);
        persist(&state)?;
    }
}

fn tier_stats(tier: usize, runs: &[RunEntry], config: &TournamentConfig) -> Result<TierStats> {
    let mut op_counts = BTreeMap::new();
    let mut depths = Vec::new();
    let t = &config.search.template;
    for g in runs.iter().filter_map(|r| r.genotype.as_ref()) {
        let GenotypeStats { op_counts: c, normal_depth, reduce_depth } = genotype_stats(g, t, t.n_cells_retrain)?;
        for (op, n) in c {
            *op_counts.entry(op).or_insert(0) += n;
        }
        depths.push(normal_depth);
        depths.push(reduce_depth);
    }
    Ok(TierStats { tier, op_counts, depths })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn prune_keeps_ceiling_half() {
        let pool = names(&["a", "b", "c", "d"]);
        assert_eq!(prune_pool(&pool, &[4.0, 3.0, 2.0, 1.0]).unwrap(), names(&["a", "b"]));
        let five = names(&["a", "b", "c", "d", "e"]);
        assert_eq!(prune_pool(&five, &[0.0; 5]).unwrap(), names(&["a", "b", "c"]));
        assert!(prune_pool(&pool, &[1.0]).is_err());
    }

    #[test]
    fn merge_is_ordered_union() {
        let mut l = Pools::new();
        let mut r = Pools::new();
        l.insert("k".into(), names(&["a", "b", "c", "d"]));
        r.insert("k".into(), names(&["d", "e", "f", "g"]));
        assert_eq!(merge_pools(&l, &r).unwrap()["k"], names(&["a", "b", "c", "d", "e", "f", "g"]));
        assert_eq!(merge_pools(&l, &l).unwrap()["k"].len(), 4);
        r.insert("other".into(), vec![]);
        assert!(merge_pools(&l, &r).is_err());
    }

    #[test]
    fn leaf_pools_are_seeded_subsets() {
        let master: Vec<String> = ops::combined_space().into_iter().map(|s| s.name).collect();
        let a = spawn_leaf_pools(&master, 8, 2, 4, 5).unwrap();
        assert_eq!(a, spawn_leaf_pools(&master, 8, 2, 4, 5).unwrap());
        for p in a.iter().flat_map(|r| r.values()) {
            let mut d = p.clone();
            d.dedup();
            assert_eq!(d.len(), 8);
        }
        let full = spawn_leaf_pools(&master, master.len(), 1, 2, 0).unwrap();
        assert!(full[0].values().all(|p| *p == master));
        assert!(spawn_leaf_pools(&master, master.len() + 1, 1, 2, 0).is_err());
    }
}
