//! Exact interventional SHAP values for boosted tree ensembles.
//!
//! For a foreground row `x` and a background row `r`, each tree is walked once.
//! At a split on a feature not yet seen on the path, `x` and `r` either agree
//! (one child, no change) or disagree, in which case the walk forks: the child
//! taken by `x` records the feature as coming from `x`, the other child as
//! coming from `r`. A leaf reached with `a` features from `x` and `b` from `r`
//! contributes `v (a-1)! b! / (a+b)!` to each `x` feature and
//! `-v a! (b-1)! / (a+b)!` to each `r` feature. Attributions are in margin
//! space and averaged over the background rows.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::ColumnSource;
use crate::error::{PhaseError, Result};
use crate::gbm::{Forest, Tree, TreeNode};
use crate::rng::substream;

pub const DEFAULT_BACKGROUND: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundSet {
    pub rows: Array2<f64>,
    pub seed: u64,
}

impl BackgroundSet {
    pub fn new(rows: Array2<f64>, seed: u64) -> Result<Self> {
        if rows.nrows() == 0 {
            return Err(PhaseError::data("background set is empty"));
        }
        Ok(BackgroundSet { rows, seed })
    }

    /// Up to `size` rows drawn uniformly without replacement.
    pub fn sample(x: ArrayView2<f64>, size: usize, seed: u64) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || size == 0 {
            return Err(PhaseError::data("background set is empty"));
        }
        let mut rng = substream(seed, "background", 0);
        let mut idx = sample(&mut rng, n, size.min(n)).into_vec();
        idx.sort_unstable();
        Self::new(x.select(Axis(0), &idx), seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRow {
    pub phi: Vec<f64>,
    /// Mean model margin over the background.
    pub expected_value: f64,
    /// Model margin at the explained row.
    pub output: f64,
}

/// `w[a][b] = (a-1)! b! / (a+b)!` for `a >= 1`.
struct ShapleyWeights {
    w: Vec<Vec<f64>>,
}

impl ShapleyWeights {
    fn new(max: usize) -> Self {
        let fact: Vec<f64> = (0..=2 * max + 2).scan(1.0, |acc, k| {
            if k > 0 {
                *acc *= k as f64;
            }
            Some(*acc)
        }).collect();
        let w = (0..=max + 1)
            .map(|a| {
                (0..=max + 1)
                    .map(|b| if a == 0 { 0.0 } else { fact[a - 1] * fact[b] / fact[a + b] })
                    .collect()
            })
            .collect();
        ShapleyWeights { w }
    }
}

struct Walk<'a> {
    tree: &'a Tree,
    x: ArrayView1<'a, f64>,
    r: ArrayView1<'a, f64>,
    weights: &'a ShapleyWeights,
    from_x: Vec<usize>,
    from_r: Vec<usize>,
}

fn goes_left(v: f64, threshold: f64, missing_left: bool) -> bool {
    if v.is_nan() {
        missing_left
    } else {
        v < threshold
    }
}

impl Walk<'_> {
    fn visit(&mut self, at: usize, phi: &mut [f64]) {
        match self.tree.nodes[at] {
            TreeNode::Leaf { weight } => {
                let (a, b) = (self.from_x.len(), self.from_r.len());
                if a > 0 {
                    let pos = weight * self.weights.w[a][b];
                    for &j in &self.from_x {
                        phi[j] += pos;
                    }
                }
                if b > 0 {
                    let neg = weight * self.weights.w[b][a];
                    for &j in &self.from_r {
                        phi[j] -= neg;
                    }
                }
            }
            TreeNode::Split {
                feature,
                threshold,
                missing_left,
                left,
                right,
            } => {
                let child = |v: f64| if goes_left(v, threshold, missing_left) { left } else { right };
                if self.from_x.contains(&feature) {
                    self.visit(child(self.x[feature]), phi);
                } else if self.from_r.contains(&feature) {
                    self.visit(child(self.r[feature]), phi);
                } else {
                    let (cx, cr) = (child(self.x[feature]), child(self.r[feature]));
                    if cx == cr {
                        self.visit(cx, phi);
                    } else {
                        self.from_x.push(feature);
                        self.visit(cx, phi);
                        self.from_x.pop();
                        self.from_r.push(feature);
                        self.visit(cr, phi);
                        self.from_r.pop();
                    }
                }
            }
        }
    }
}

/// Interventional SHAP values of `row` against every background row.
pub fn shap_interventional(forest: &Forest, row: ArrayView1<f64>, background: &BackgroundSet) -> Result<AttributionRow> {
    let width = forest.n_features;
    if row.len() != width {
        return Err(PhaseError::shape("explained row width", width, row.len()));
    }
    if background.rows.nrows() == 0 {
        return Err(PhaseError::data("background set is empty"));
    }
    if background.rows.ncols() != width {
        return Err(PhaseError::shape("background width", width, background.rows.ncols()));
    }
    let trees = forest.active_trees();
    let max_depth = trees.iter().map(Tree::depth).max().unwrap_or(0);
    let weights = ShapleyWeights::new(max_depth);
    let mut phi = vec![0.0; width];
    let mut expected = 0.0;
    let mut per_bg = vec![0.0; width];
    for r in background.rows.outer_iter() {
        per_bg.fill(0.0);
        for tree in trees {
            let mut walk = Walk {
                tree,
                x: row,
                r,
                weights: &weights,
                from_x: Vec::with_capacity(max_depth),
                from_r: Vec::with_capacity(max_depth),
            };
            walk.visit(0, &mut per_bg);
        }
        for (p, v) in phi.iter_mut().zip(&per_bg) {
            *p += v;
        }
        expected += forest.predict_margin_row(r)?;
    }
    let n = background.rows.nrows() as f64;
    for p in &mut phi {
        *p /= n;
    }
    Ok(AttributionRow {
        phi,
        expected_value: expected / n,
        output: forest.predict_margin_row(row)?,
    })
}

/// Explains many rows in parallel; results keep row order.
pub fn shap_rows(forest: &Forest, x: ArrayView2<f64>, background: &BackgroundSet) -> Result<Vec<AttributionRow>> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| shap_interventional(forest, x.row(i), background))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalAttribution {
    /// Per-signal sums, in order of first column appearance.
    pub signals: Vec<(String, f64)>,
    pub statics: Vec<(String, f64)>,
}

impl SignalAttribution {
    pub fn total(&self) -> f64 {
        self.signals.iter().chain(&self.statics).map(|(_, v)| v).sum()
    }
}

/// Sums attributions of all columns that belong to the same signal.
pub fn aggregate_by_signal(attr: &AttributionRow, provenance: &[ColumnSource]) -> Result<SignalAttribution> {
    if provenance.len() != attr.phi.len() {
        return Err(PhaseError::shape("provenance map", attr.phi.len(), provenance.len()));
    }
    let mut out = SignalAttribution {
        signals: Vec::new(),
        statics: Vec::new(),
    };
    for (source, &phi) in provenance.iter().zip(&attr.phi) {
        let bucket = match source {
            ColumnSource::Signal(_) => &mut out.signals,
            ColumnSource::Static(_) => &mut out.statics,
        };
        match bucket.iter_mut().find(|(n, _)| n == source.name()) {
            Some((_, total)) => *total += phi,
            None => bucket.push((source.name().to_string(), phi)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFeature {
    pub rank: usize,
    pub column: usize,
    pub name: String,
    pub mean_abs_phi: f64,
    pub phi: Vec<f64>,
    pub values: Vec<f64>,
}

/// The `k` features with the largest mean |phi|, ties by column index.
pub fn summary_data(rows: &[AttributionRow], values: ArrayView2<f64>, names: &[String], k: usize) -> Result<Vec<SummaryFeature>> {
    if k == 0 {
        return Err(PhaseError::config("summary.k", "must be at least 1"));
    }
    let width = names.len();
    if values.nrows() != rows.len() || values.ncols() != width {
        return Err(PhaseError::shape(
            "summary inputs",
            format!("{}x{width}", rows.len()),
            format!("{}x{}", values.nrows(), values.ncols()),
        ));
    }
    if let Some(r) = rows.iter().find(|r| r.phi.len() != width) {
        return Err(PhaseError::shape("attribution width", width, r.phi.len()));
    }
    let k = if k > width {
        log::warn!("requested top {k} features but only {width} exist; showing {width}");
        width
    } else {
        k
    };
    let n = rows.len().max(1) as f64;
    let mean_abs: Vec<f64> = (0..width).map(|j| rows.iter().map(|r| r.phi[j].abs()).sum::<f64>() / n).collect();
    let mut order: Vec<usize> = (0..width).collect();
    order.sort_by(|&a, &b| mean_abs[b].total_cmp(&mean_abs[a]).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(rank, j)| SummaryFeature {
            rank: rank + 1,
            column: j,
            name: names[j].clone(),
            mean_abs_phi: mean_abs[j],
            phi: rows.iter().map(|r| r.phi[j]).collect(),
            values: values.column(j).to_vec(),
        })
        .collect())
}

fn csv_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Long format: `row_id, feature, phi, value`.
pub fn write_explain_csv(path: &Path, row_ids: &[String], rows: &[AttributionRow], values: ArrayView2<f64>, names: &[String]) -> Result<()> {
    if row_ids.len() != rows.len() || values.nrows() != rows.len() {
        return Err(PhaseError::shape("explain rows", rows.len(), row_ids.len()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["row_id", "feature", "phi", "value"])?;
    for ((id, attr), vals) in row_ids.iter().zip(rows).zip(values.outer_iter()) {
        for (j, name) in names.iter().enumerate() {
            w.write_record([id.as_str(), name.as_str(), &format!("{}", attr.phi[j]), &csv_value(vals[j])])?;
        }
    }
    w.flush().map_err(|e| PhaseError::io(path, e))
}

/// Long format: `rank, feature, column, mean_abs_phi, sample, phi, value`.
pub fn write_summary_csv(path: &Path, summary: &[SummaryFeature]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "feature", "column", "mean_abs_phi", "sample", "phi", "value"])?;
    for f in summary {
        for (i, (phi, v)) in f.phi.iter().zip(&f.values).enumerate() {
            w.write_record([
                f.rank.to_string(),
                f.name.clone(),
                f.column.to_string(),
                format!("{}", f.mean_abs_phi),
                i.to_string(),
                format!("{phi}"),
                csv_value(*v),
            ])?;
        }
    }
    w.flush().map_err(|e| PhaseError::io(path, e))
}
