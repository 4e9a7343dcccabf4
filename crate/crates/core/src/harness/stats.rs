//! Genotype statistics (op frequencies, cell depth) and summary statistics
//! across runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cell::{CellKind, Genotype, GenotypeEdge};
use crate::error::Result;
use crate::network::{NetworkTemplate, ReduceKind};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenotypeStats {
    /// Op name to total occurrences over the whole network.
    pub op_counts: BTreeMap<String, usize>,
    pub normal_depth: usize,
    pub reduce_depth: usize,
}

/// Edges on the longest path from a cell input to any node in `concat`.
pub fn cell_depth(edges: &[GenotypeEdge], concat: &[usize]) -> usize {
    let n = edges.iter().map(|e| e.dst + 1).max().unwrap_or(0);
    let mut depth = vec![0usize; n + 2];
    for j in 0..n {
        depth[j + 2] = edges.iter().filter(|e| e.dst == j).map(|e| depth[e.src] + 1).max().unwrap_or(0);
    }
    concat.iter().map(|&c| depth.get(c).copied().unwrap_or(0)).max().unwrap_or(0)
}

/// Counts of (normal, reduce) cells in a network of `n_cells`.
pub fn cell_counts(template: &NetworkTemplate, n_cells: usize) -> Result<(usize, usize)> {
    let r = template.reductions(n_cells)?.len();
    let searched_reduce = if template.reduce_kind == ReduceKind::SearchedCell { r } else { 0 };
    Ok((n_cells - r, searched_reduce))
}

/// Op frequencies weighted by the number of cells of each kind, and cell depths.
pub fn genotype_stats(genotype: &Genotype, template: &NetworkTemplate, n_cells: usize) -> Result<GenotypeStats> {
    let (normal, reduce) = cell_counts(template, n_cells)?;
    let mut op_counts = BTreeMap::new();
    for (kind, mult) in [(CellKind::Normal, normal), (CellKind::Reduce, reduce)] {
        for e in genotype.edges(kind) {
            *op_counts.entry(e.op.clone()).or_insert(0) += mult;
        }
    }
    op_counts.retain(|_, c| *c > 0);
    Ok(GenotypeStats {
        op_counts,
        normal_depth: cell_depth(&genotype.normal, &genotype.concat),
        reduce_depth: cell_depth(&genotype.reduce, &genotype.concat),
    })
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; `None` below two values.
pub fn sample_std(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some((v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt())
}

/// Half-width of the two-sided 95% Student-t confidence interval of the mean.
pub fn ci95_half_width(v: &[f64]) -> Option<f64> {
    let s = sample_std(v)?;
    let dof = (v.len() - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, dof).ok()?.inverse_cdf(0.975);
    Some(t * s / (v.len() as f64).sqrt())
}

/// `"mean (stddev)"` with two decimals; a single value shows `—` for the stddev.
pub fn format_mean_std(v: &[f64]) -> String {
    if v.is_empty() {
        return "—".into();
    }
    match sample_std(v) {
        Some(s) => format!("{:.2} ({:.2})", mean(v), s),
        None => format!("{:.2} (—)", mean(v)),
    }
}
