//! Aggregation of run directories into CSV tables and SVG figures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use super::retrain::RetrainMetrics;
use super::stats::{ci95_half_width, format_mean_std, genotype_stats, mean, sample_std};
use crate::cell::Genotype;
use crate::error::{Error, Result};
use crate::network::NetworkTemplate;
use crate::search::{read_metrics, EpochMetrics, SearchConfig};

pub const METRICS_FILE: &str = "metrics.csv";
pub const GENOTYPE_FILE: &str = "genotype.json";
pub const CONFIG_FILE: &str = "config.json";
pub const RETRAIN_FILE: &str = "retrain.json";

/// Everything the report reads from one run directory.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    /// Group label: the loss preset name when a config is present.
    pub label: String,
    pub metrics: Vec<EpochMetrics>,
    pub genotype: Option<Genotype>,
    pub retrain: Option<RetrainMetrics>,
    pub template: NetworkTemplate,
}

impl RunSummary {
    /// Final accuracy: retrain test accuracy when retrained, else the last
    /// search-epoch test accuracy.
    pub fn final_accuracy(&self) -> f64 {
        match &self.retrain {
            Some(r) => r.final_test_acc,
            None => self.metrics.last().map_or(f64::NAN, |m| m.eval_test_acc),
        }
    }

    /// Per-epoch test accuracy curve, from retraining when available.
    pub fn curve(&self) -> Vec<f64> {
        match &self.retrain {
            Some(r) if !r.epochs.is_empty() => r.epochs.iter().map(|e| e.test_acc).collect(),
            _ => self.metrics.iter().map(|m| m.eval_test_acc).collect(),
        }
    }
}

pub fn load_run(dir: &Path) -> Result<RunSummary> {
    let mpath = dir.join(METRICS_FILE);
    if !mpath.is_file() {
        return Err(Error::data(format!("{} is missing", mpath.display())));
    }
    let metrics = read_metrics(&mpath)?;
    let read_json = |name: &str| -> Result<Option<String>> {
        let p = dir.join(name);
        if p.is_file() {
            std::fs::read_to_string(&p).map(Some).map_err(|e| Error::io(&p, e))
        } else {
            Ok(None)
        }
    };
    let config: Option<SearchConfig> = read_json(CONFIG_FILE)?.map(|s| serde_json::from_str(&s)).transpose()?;
    let genotype = read_json(GENOTYPE_FILE)?.map(|s| Genotype::from_json(&s)).transpose()?;
    let retrain: Option<RetrainMetrics> = read_json(RETRAIN_FILE)?.map(|s| serde_json::from_str(&s)).transpose()?;
    let label = match &config {
        Some(c) => c.loss.name.clone(),
        None => dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned()),
    };
    let template = config.map(|c| c.template).unwrap_or_default();
    Ok(RunSummary { dir: dir.to_path_buf(), label, metrics, genotype, retrain, template })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: String,
    pub n_runs: usize,
    /// Final accuracies in percent.
    pub final_acc: Vec<f64>,
    /// `"mean (stddev)"` over `final_acc`.
    pub cell: String,
    pub std: Option<f64>,
    pub ci95: Option<f64>,
    /// Inference latency in seconds per batch, per run that measured it.
    pub latency: Vec<f64>,
}

/// Outcome of comparing final-accuracy spread between two presets.
#[derive(Clone, Debug, PartialEq)]
pub enum Stability {
    /// The first group's stddev is at most the second's.
    NotWorse { first: f64, second: f64 },
    /// The first group's stddev is significantly larger (one-sided F-test at 5%).
    Worse { first: f64, second: f64 },
    /// A stddev is undefined, or the first is larger but not significantly so.
    Inconclusive { first: Option<f64>, second: Option<f64> },
}

impl std::fmt::Display for Stability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<f64>| v.map_or("—".to_string(), |v| format!("{v:.2}"));
        match self {
            Stability::NotWorse { first, second } => write!(f, "stddev {first:.2} <= {second:.2}"),
            Stability::Worse { first, second } => write!(f, "stddev {first:.2} > {second:.2}"),
            Stability::Inconclusive { first, second } => {
                write!(f, "inconclusive: stddev {} vs {}", show(*first), show(*second))
            }
        }
    }
}

pub fn compare_stability(first: &GroupSummary, second: &GroupSummary) -> Stability {
    match (first.std, second.std) {
        (Some(a), Some(b)) if a <= b => Stability::NotWorse { first: a, second: b },
        (Some(a), Some(b)) if variance_ratio_p(a, first.n_runs, b, second.n_runs) < 0.05 => {
            Stability::Worse { first: a, second: b }
        }
        (a, b) => Stability::Inconclusive { first: a, second: b },
    }
}

/// One-sided p-value of `a^2 / b^2` under equal variances.
fn variance_ratio_p(a: f64, na: usize, b: f64, nb: usize) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    match FisherSnedecor::new((na - 1) as f64, (nb - 1) as f64) {
        Ok(f) => f.sf(a * a / (b * b)),
        Err(_) => 1.0,
    }
}

#[derive(Clone, Debug)]
pub struct Report {
    pub runs: Vec<RunSummary>,
    pub groups: Vec<GroupSummary>,
    pub files: Vec<PathBuf>,
}

pub fn summarize_groups(runs: &[RunSummary]) -> Vec<GroupSummary> {
    let mut by_label: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        by_label.entry(&r.label).or_default().push(r);
    }
    by_label
        .into_iter()
        .map(|(label, rs)| {
            let final_acc: Vec<f64> = rs.iter().map(|r| 100.0 * r.final_accuracy()).collect();
            let latency = rs.iter().filter_map(|r| r.retrain.as_ref()?.latency.map(|l| l.0)).collect();
            GroupSummary {
                label: label.to_string(),
                n_runs: rs.len(),
                cell: format_mean_std(&final_acc),
                std: sample_std(&final_acc),
                ci95: ci95_half_width(&final_acc),
                final_acc,
                latency,
            }
        })
        .collect()
}

/// Loads every run directory and writes the report bundle into `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<Report> {
    if run_dirs.is_empty() {
        return Err(Error::config("report needs at least one run directory"));
    }
    let runs = run_dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let groups = summarize_groups(&runs);
    let mut files = Vec::new();

    let p = out.join("all_metrics.csv");
    write_all_metrics(&p, &runs)?;
    files.push(p);

    let p = out.join("accuracy_table.csv");
    write_text(&p, &accuracy_table(&groups))?;
    files.push(p);

    let p = out.join("latency_table.csv");
    write_text(&p, &latency_table(&groups))?;
    files.push(p);

    let p = out.join("accuracy_curves.svg");
    plot_curves(&p, &runs)?;
    files.push(p);

    let (freqs, depths) = genotype_totals(&runs)?;
    let p = out.join("layer_frequencies.svg");
    plot_bars(&p, "Per network layer type frequencies", &freqs)?;
    files.push(p);

    let depth_bars: Vec<(String, usize)> = depths.iter().map(|(d, n)| (d.to_string(), *n)).collect();
    let p = out.join("cell_depths.svg");
    plot_bars(&p, "Per network cell depth frequencies", &depth_bars)?;
    files.push(p);

    Ok(Report { runs, groups, files })
}

fn write_text(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    run: &'a str,
    label: &'a str,
    epoch: usize,
    search_loss: f64,
    eval_val_acc: f64,
    eval_test_acc: f64,
    wall_time: f64,
}

fn write_all_metrics(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    for r in runs {
        let run = r.dir.display().to_string();
        for m in &r.metrics {
            w.serialize(MetricsRow {
                run: &run,
                label: &r.label,
                epoch: m.epoch,
                search_loss: m.search_loss,
                eval_val_acc: m.eval_val_acc,
                eval_test_acc: m.eval_test_acc,
                wall_time: m.wall_time,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// `label,runs,accuracy` with accuracy as `"mean (stddev)"` in percent.
pub fn accuracy_table(groups: &[GroupSummary]) -> String {
    let mut s = String::from("label,runs,accuracy\n");
    for g in groups {
        let _ = writeln!(s, "{},{},\"{}\"", g.label, g.n_runs, g.cell);
    }
    s
}

/// `label,runs,seconds_per_batch` as `"mean (stddev)"`.
pub fn latency_table(groups: &[GroupSummary]) -> String {
    let mut s = String::from("label,runs,seconds_per_batch\n");
    for g in groups.iter().filter(|g| !g.latency.is_empty()) {
        let cell = match sample_std(&g.latency) {
            Some(sd) => format!("{:.4} ({:.4})", mean(&g.latency), sd),
            None => format!("{:.4} (—)", mean(&g.latency)),
        };
        let _ = writeln!(s, "{},{},\"{}\"", g.label, g.latency.len(), cell);
    }
    s
}

/// Op frequencies and a cell-depth histogram summed over every run's genotype.
type OpFrequencies = Vec<(String, usize)>;
type DepthHistogram = BTreeMap<usize, usize>;

fn genotype_totals(runs: &[RunSummary]) -> Result<(OpFrequencies, DepthHistogram)> {
    let mut freqs: BTreeMap<String, usize> = BTreeMap::new();
    let mut depths = BTreeMap::new();
    for r in runs {
        let Some(g) = &r.genotype else { continue };
        let st = genotype_stats(g, &r.template, r.template.n_cells_retrain)?;
        for (op, n) in st.op_counts {
            *freqs.entry(op).or_insert(0) += n;
        }
        *depths.entry(st.normal_depth).or_insert(0) += 1;
        *depths.entry(st.reduce_depth).or_insert(0) += 1;
    }
    Ok((freqs.into_iter().collect(), depths))
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::data(format!("plotting failed: {e}"))
}

fn plot_curves(path: &Path, runs: &[RunSummary]) -> Result<()> {
    let mut by_label: BTreeMap<&str, Vec<Vec<f64>>> = BTreeMap::new();
    for r in runs {
        by_label.entry(&r.label).or_default().push(r.curve());
    }
    let max_len = runs.iter().map(|r| r.curve().len()).max().unwrap_or(0).max(2);
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Test accuracy curves", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..(max_len - 1) as f64, 0f64..100f64)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc("accuracy (%)").draw().map_err(plot_err)?;
    for (i, (label, curves)) in by_label.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let len = curves.iter().map(Vec::len).min().unwrap_or(0);
        let mut centre = Vec::with_capacity(len);
        let mut band = Vec::with_capacity(len);
        for e in 0..len {
            let vals: Vec<f64> = curves.iter().map(|c| 100.0 * c[e]).collect();
            let m = mean(&vals);
            let hw = ci95_half_width(&vals).unwrap_or(0.0);
            centre.push((e as f64, m));
            band.push((e as f64, m - hw, m + hw));
        }
        let polygon: Vec<(f64, f64)> =
            band.iter().map(|&(x, lo, _)| (x, lo)).chain(band.iter().rev().map(|&(x, _, hi)| (x, hi))).collect();
        chart.draw_series(std::iter::once(Polygon::new(polygon, color.mix(0.2)))).map_err(plot_err)?;
        chart
            .draw_series(LineSeries::new(centre, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(label.to_string())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn plot_bars(path: &Path, title: &str, bars: &[(String, usize)]) -> Result<()> {
    let n = bars.len().max(1);
    let top = bars.iter().map(|b| b.1).max().unwrap_or(1).max(1) as f64 * 1.1;
    let root = SVGBackend::new(path, (900, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(90)
        .y_label_area_size(48)
        .build_cartesian_2d(0f64..n as f64, 0f64..top)
        .map_err(plot_err)?;
    let names: Vec<String> = bars.iter().map(|b| b.0.clone()).collect();
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_labels(n)
        .x_label_formatter(&|x| names.get(x.floor() as usize).cloned().unwrap_or_default())
        .y_desc("count")
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(bars.iter().enumerate().map(|(i, (_, c))| {
            Rectangle::new([(i as f64 + 0.1, 0.0), (i as f64 + 0.9, *c as f64)], BLUE.mix(0.6).filled())
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
