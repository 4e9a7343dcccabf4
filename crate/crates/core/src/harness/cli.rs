//! Command-line front end: `search`, `retrain`, `tournament`, `report` and `ablate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use super::data::{load_dataset, split_train_val, Dataset, DatasetKind, DatasetSpec};
use super::report::{compare_stability, report, CONFIG_FILE, GENOTYPE_FILE, RETRAIN_FILE};
use super::retrain::{retrain_and_evaluate, RetrainConfig};
use crate::cell::Genotype;
use crate::discretize::{apply_zero_config, DiscretizerKind, ZeroConfig};
use crate::error::{Error, Result};
use crate::ops::{Phase, SpaceId};
use crate::search::{run_dir_name, run_search, select_route_preset, LossConfig, Route, SearchConfig, SearchData};
use crate::tournament::{run_tournament, TournamentConfig};

/// Full experiment description; every section is optional in the JSON file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub search: SearchConfig,
    pub retrain: RetrainConfig,
    /// Bracket settings; its `search` section is replaced by the top-level one.
    pub tournament: TournamentConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Parser)]
#[command(name = "icdarts", version, about = "Cyclic differentiable architecture search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for a genotype.
    Search(Common),
    /// Retrain a searched genotype from scratch and evaluate it.
    Retrain {
        #[command(flatten)]
        common: Common,
        /// Run directory holding genotype.json (and optionally config.json).
        #[arg(long)]
        run: PathBuf,
        /// Timed inference batches measured before training.
        #[arg(long, default_value_t = 0)]
        latency_batches: usize,
    },
    /// Run the op-pool tournament over the combined space.
    Tournament {
        #[command(flatten)]
        common: Common,
        /// Stop after this many searches; rerun to resume.
        #[arg(long)]
        max_runs: Option<usize>,
    },
    /// Aggregate run directories into tables and plots.
    Report {
        /// Run directories, each holding metrics.csv.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Search and retrain several presets over several seeds, then report.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Loss presets to compare; ignored when `--route` is given.
        #[arg(long, value_delimiter = ',', default_value = "icdarts,cdarts")]
        presets: Vec<String>,
        /// Number of seeds per preset, starting at `--seed`.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Retrain epochs per run.
        #[arg(long)]
        retrain_epochs: Option<usize>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment JSON file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for search, retrain and tournament.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// cifar10, cifar100 or synthetic.
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    /// Operation space: 1, 2, 3, 4 or combined.
    #[arg(long)]
    pub space: Option<SpaceId>,
    /// Zero/random slot per phase: V0 to V4.
    #[arg(long)]
    pub zero_config: Option<ZeroConfig>,
    /// darts[:k], idarts[:k], xdarts or xdarts:nodes.
    #[arg(long)]
    pub discretizer: Option<DiscretizerKind>,
    /// Ablation route A or B; needs `--stage`.
    #[arg(long, requires = "stage")]
    pub route: Option<Route>,
    /// Ablation stage 0 to 3 along `--route`.
    #[arg(long, requires = "route")]
    pub stage: Option<usize>,
    /// Cell count of the network being trained by this command.
    #[arg(long)]
    pub cells: Option<usize>,
    /// Epochs of the training loop run by this command.
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl Common {
    /// Loads the config file (or defaults) and applies command-line overrides.
    /// `cells` and `epochs` land on the search or the retrain section per `target`.
    pub fn resolve(&self, target: Phase) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.search.seed = s;
            cfg.retrain.seed = s;
            cfg.tournament.seed = s;
        }
        if let Some(d) = self.dataset {
            cfg.dataset.kind = d;
        }
        if let Some(s) = self.space {
            cfg.search.space = s;
        }
        if let Some(z) = self.zero_config {
            cfg.search.zero_config = z;
        }
        if let Some(d) = self.discretizer {
            cfg.search.discretizer = d;
        }
        if let (Some(r), Some(st)) = (self.route, self.stage) {
            cfg.search.loss = select_route_preset(r, st)?;
        }
        match target {
            Phase::Retrain => {
                if self.cells.is_some() {
                    cfg.retrain.n_cells = self.cells;
                }
                if let Some(e) = self.epochs {
                    cfg.retrain.epochs = e;
                }
            }
            _ => {
                if let Some(c) = self.cells {
                    cfg.search.template.n_cells_search = c;
                }
                if let Some(e) = self.epochs {
                    cfg.search.epochs = e;
                }
            }
        }
        cfg.search.validate()?;
        Ok(cfg)
    }
}

/// Train (split into train and val) and test sets for a search.
pub fn search_data(spec: &DatasetSpec, seed: u64) -> Result<SearchData> {
    let (train, test) = load_dataset(spec)?;
    let (tr, va) = split_train_val(&train, seed);
    SearchData::new(tr, va, Some(test))
}

/// Retrains the genotype in `run`, writing `retrain.json` and the retrain
/// genotype into `out`.
pub fn retrain_run(
    run: &Path,
    out: &Path,
    cfg: &ExperimentConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<super::retrain::RetrainMetrics> {
    let gpath = run.join(GENOTYPE_FILE);
    let searched = Genotype::load(&gpath)?;
    let cpath = run.join(CONFIG_FILE);
    let template = if cpath.is_file() {
        let s = std::fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        serde_json::from_str::<SearchConfig>(&s)?.template
    } else {
        cfg.search.template.clone()
    };
    let genotype = apply_zero_config(&searched, searched.zero_config, Phase::Retrain)?;
    let (metrics, _) = retrain_and_evaluate(&genotype, &template, searched.zero_config, train, test, &cfg.retrain)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    genotype.save(&out.join("retrain_genotype.json"))?;
    let p = out.join(RETRAIN_FILE);
    std::fs::write(&p, serde_json::to_string_pretty(&metrics)?).map_err(|e| Error::io(&p, e))?;
    Ok(metrics)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Search(common) => {
            let cfg = common.resolve(Phase::Search)?;
            let data = search_data(&cfg.dataset, cfg.search.seed)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs")).join(run_dir_name(&cfg.search));
            let record = run_search(&cfg.search, &data, Some(&out))?;
            println!("{}", record.genotype.to_json());
            info!("run written to {}", out.display());
        }
        Command::Retrain { common, run, latency_batches } => {
            let mut cfg = common.resolve(Phase::Retrain)?;
            cfg.retrain.latency_batches = latency_batches;
            let (train, test) = load_dataset(&cfg.dataset)?;
            let out = common.out.clone().unwrap_or_else(|| run.clone());
            let m = retrain_run(&run, &out, &cfg, &train, &test)?;
            println!("final test accuracy {:.4}", m.final_test_acc);
            if let Some((mean, sd)) = m.latency {
                println!("latency {mean:.6} s/batch (stddev {sd:.6})");
            }
        }
        Command::Tournament { common, max_runs } => {
            let cfg = common.resolve(Phase::Search)?;
            let mut tc = cfg.tournament.clone();
            tc.search = cfg.search.clone();
            let data = search_data(&cfg.dataset, tc.seed)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("tournament"));
            let outcome = run_tournament(&tc, &data, Some(&out), max_runs)?;
            match outcome.genotype {
                Some(g) => {
                    g.save(&out.join(GENOTYPE_FILE))?;
                    println!("{}", g.to_json());
                }
                None => println!("{} runs completed; rerun to resume", outcome.state.runs_completed()),
            }
        }
        Command::Report { runs, out } => {
            let r = report(&runs, &out)?;
            for g in &r.groups {
                println!("{}: {} over {} runs", g.label, g.cell, g.n_runs);
            }
        }
        Command::Ablate { common, presets, seeds, retrain_epochs } => {
            let base = common.resolve(Phase::Search)?;
            let losses: Vec<LossConfig> = match (common.route, common.stage) {
                (Some(r), Some(_)) => (0..=3).map(|s| select_route_preset(r, s)).collect::<Result<_>>()?,
                _ => presets.iter().map(|p| LossConfig::preset(p)).collect::<Result<_>>()?,
            };
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("ablation"));
            let dirs = ablate(&base, &losses, seeds, retrain_epochs, &out)?;
            let r = report(&dirs, &out.join("report"))?;
            for g in &r.groups {
                println!("{}: {} over {} runs", g.label, g.cell, g.n_runs);
            }
            if let [a, b, ..] = r.groups.as_slice() {
                println!("{} vs {}: {}", a.label, b.label, compare_stability(a, b));
            }
        }
    }
    Ok(())
}

/// Searches and retrains every loss preset for `seeds` consecutive seeds.
/// Returns the run directories.
pub fn ablate(
    base: &ExperimentConfig,
    losses: &[LossConfig],
    seeds: u64,
    retrain_epochs: Option<usize>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (train, test) = load_dataset(&base.dataset)?;
    let mut dirs = Vec::new();
    for loss in losses {
        for s in 0..seeds {
            let mut cfg = base.clone();
            cfg.search.seed = base.search.seed + s;
            cfg.retrain.seed = cfg.search.seed;
            cfg.search.loss = loss.clone();
            if let Some(e) = retrain_epochs {
                cfg.retrain.epochs = e;
            }
            let (tr, va) = split_train_val(&train, cfg.search.seed);
            let data = SearchData::new(tr, va, Some(test.clone()))?;
            let dir = out.join(run_dir_name(&cfg.search));
            run_search(&cfg.search, &data, Some(&dir))?;
            retrain_run(&dir, &dir, &cfg, &train, &test)?;
            dirs.push(dir);
        }
    }
    Ok(dirs)
}
