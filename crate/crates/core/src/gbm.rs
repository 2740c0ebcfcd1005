//! Second-order gradient-boosted trees with a logistic objective.
//!
//! Splits are exact: every midpoint between distinct sorted feature values is
//! scored. Rows whose value is missing (NaN) follow a default direction
//! learned per split.

use std::cmp::Ordering;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::Task;
use crate::error::{PhaseError, Result};
use crate::neuralnet::{bce_from_logit, sigmoid};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbmConfig {
    pub learning_rate: f64,
    pub max_depth: usize,
    pub subsample_rate: f64,
    pub max_rounds: usize,
    pub early_stopping_rounds: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbmConfig {
    fn default() -> Self {
        GbmConfig {
            learning_rate: 0.1,
            max_depth: 6,
            subsample_rate: 0.5,
            max_rounds: 500,
            early_stopping_rounds: 5,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl GbmConfig {
    /// Hypoxemia uses a learning rate of 0.02, every other task 0.1.
    pub fn for_task(task: Task, seed: u64) -> Self {
        GbmConfig {
            learning_rate: if task == Task::Hypoxemia { 0.02 } else { 0.1 },
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(PhaseError::config("gbm.learning_rate", "must be positive"));
        }
        if self.max_depth == 0 {
            return Err(PhaseError::config("gbm.max_depth", "must be at least 1"));
        }
        if !(self.subsample_rate > 0.0 && self.subsample_rate <= 1.0) {
            return Err(PhaseError::config("gbm.subsample_rate", "must lie in (0, 1]"));
        }
        if self.max_rounds == 0 {
            return Err(PhaseError::config("gbm.max_rounds", "must be at least 1"));
        }
        if self.early_stopping_rounds == 0 {
            return Err(PhaseError::config("gbm.early_stopping_rounds", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !(self.gamma >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(PhaseError::config("gbm.lambda/gamma/min_child_weight", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        missing_left: bool,
        left: usize,
        right: usize,
    },
    Leaf {
        weight: f64,
    },
}

/// Nodes in an arena; the root is node 0. Rows with `x < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(weight: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { weight }],
        }
    }

    /// Index of the leaf that `row` lands in.
    pub fn route(&self, row: impl Fn(usize) -> f64) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { .. } => return at,
                TreeNode::Split {
                    feature,
                    threshold,
                    missing_left,
                    left,
                    right,
                } => {
                    let v = row(feature);
                    let go_left = if v.is_nan() { missing_left } else { v < threshold };
                    at = if go_left { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, row: impl Fn(usize) -> f64) -> f64 {
        match self.nodes[self.route(row)] {
            TreeNode::Leaf { weight } => weight,
            TreeNode::Split { .. } => unreachable!("route ends at a leaf"),
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Features used by any split.
    pub fn features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub base_margin: f64,
    pub trees: Vec<Tree>,
    pub n_features: usize,
    /// Number of leading trees used for prediction.
    pub best_round: usize,
    /// Validation log-loss after each round, when a validation set was given.
    #[serde(default)]
    pub valid_loss: Vec<f64>,
}

impl Forest {
    pub fn empty(base_margin: f64, n_features: usize) -> Self {
        Forest {
            base_margin,
            trees: Vec::new(),
            n_features,
            best_round: 0,
            valid_loss: Vec::new(),
        }
    }

    pub fn active_trees(&self) -> &[Tree] {
        &self.trees[..self.best_round.min(self.trees.len())]
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.n_features {
            return Err(PhaseError::shape("forest input width", self.n_features, width));
        }
        Ok(())
    }

    pub fn predict_margin_row(&self, row: ArrayView1<f64>) -> Result<f64> {
        self.check_width(row.len())?;
        Ok(self.base_margin + self.active_trees().iter().map(|t| t.predict(|j| row[j])).sum::<f64>())
    }

    pub fn predict_proba_row(&self, row: ArrayView1<f64>) -> Result<f64> {
        self.predict_margin_row(row).map(sigmoid)
    }

    pub fn predict_margin(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        self.check_width(x.ncols())?;
        Ok((0..x.nrows())
            .into_par_iter()
            .map(|r| x.row(r))
            .map(|row| self.base_margin + self.active_trees().iter().map(|t| t.predict(|j| row[j])).sum::<f64>())
            .collect())
    }

    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(self.predict_margin(x)?.into_iter().map(sigmoid).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| PhaseError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PhaseError::io(path, e))?;
        let forest: Forest = serde_json::from_str(&text)?;
        for tree in &forest.trees {
            for node in &tree.nodes {
                match *node {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                        ..
                    } => {
                        if feature >= forest.n_features
                            || !threshold.is_finite()
                            || left >= tree.nodes.len()
                            || right >= tree.nodes.len()
                        {
                            return Err(PhaseError::Format(format!("corrupt split node in {}", path.display())));
                        }
                    }
                    TreeNode::Leaf { weight } if !weight.is_finite() => {
                        return Err(PhaseError::Format(format!("non-finite leaf in {}", path.display())));
                    }
                    TreeNode::Leaf { .. } => {}
                }
            }
        }
        Ok(forest)
    }
}

/// Gradient and hessian of the logistic loss at `margin`.
pub fn logistic_grad_hess(margin: f64, label: f64) -> (f64, f64) {
    let p = sigmoid(margin);
    (p - label, p * (1.0 - p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams {
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
}

impl From<&GbmConfig> for SplitParams {
    fn from(c: &GbmConfig) -> Self {
        SplitParams {
            lambda: c.lambda,
            gamma: c.gamma,
            min_child_weight: c.min_child_weight,
        }
    }
}

/// Second-order gain of splitting a node into (G_L, H_L) and (G_R, H_R).
pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr) * (gl + gr) / (hl + hr + lambda)) - gamma
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
    pub missing_left: bool,
}

/// Orders candidates: higher gain, then smaller threshold, then missing-left,
/// then smaller feature index.
fn better(a: &SplitChoice, b: &SplitChoice) -> bool {
    match a.gain.partial_cmp(&b.gain).unwrap_or(Ordering::Equal) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => (a.threshold, !a.missing_left, a.feature) < (b.threshold, !b.missing_left, b.feature),
    }
}

fn best_of(a: Option<SplitChoice>, b: Option<SplitChoice>) -> Option<SplitChoice> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if better(&y, &x) { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// Best split of one feature. `sorted` holds the `(value, row)` pairs of the
/// rows with a present value in ascending value order; `present` is their
/// (G, H) and `missing` the (G, H) of rows with a missing value.
fn scan_feature(
    feature: usize,
    sorted: &[(f64, u32)],
    g: &[f64],
    h: &[f64],
    present: (f64, f64),
    missing: (f64, f64),
    params: SplitParams,
) -> Option<SplitChoice> {
    let (gm, hm) = missing;
    let (gp, hp) = present;
    let (mut gl, mut hl) = (0.0, 0.0);
    let mut best: Option<SplitChoice> = None;
    for pair in sorted.windows(2) {
        let ((v, r), (next, _)) = (pair[0], pair[1]);
        gl += g[r as usize];
        hl += h[r as usize];
        if v == next {
            continue;
        }
        let (gr, hr) = (gp - gl, hp - hl);
        for missing_left in [true, false] {
            let (gl2, hl2, gr2, hr2) = if missing_left {
                (gl + gm, hl + hm, gr, hr)
            } else {
                (gl, hl, gr + gm, hr + hm)
            };
            if hl2 < params.min_child_weight || hr2 < params.min_child_weight {
                continue;
            }
            let gain = split_gain(gl2, hl2, gr2, hr2, params.lambda, params.gamma);
            if gain > 0.0 && best.as_ref().is_none_or(|b| gain >= b.gain) {
                let candidate = SplitChoice {
                    feature,
                    threshold: v + (next - v) / 2.0,
                    gain,
                    missing_left,
                };
                best = best_of(best, Some(candidate));
            }
        }
    }
    best
}

fn sum_gh(rows: impl Iterator<Item = u32>, g: &[f64], h: &[f64]) -> (f64, f64) {
    rows.fold((0.0, 0.0), |(a, b), r| (a + g[r as usize], b + h[r as usize]))
}

/// Best split of the rows of one node on a single feature column. `values`,
/// `g` and `h` are aligned per row; NaN values are missing.
pub fn find_best_split(values: &[f64], g: &[f64], h: &[f64], params: SplitParams) -> Option<SplitChoice> {
    let mut sorted: Vec<(f64, u32)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .map(|(r, &v)| (v, r as u32))
        .collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let missing = sum_gh((0..values.len() as u32).filter(|&r| values[r as usize].is_nan()), g, h);
    let present = sum_gh(sorted.iter().map(|p| p.1), g, h);
    scan_feature(0, &sorted, g, h, present, missing, params)
}

struct Builder<'a> {
    g: &'a [f64],
    h: &'a [f64],
    params: SplitParams,
    max_depth: usize,
    learning_rate: f64,
    nodes: Vec<TreeNode>,
    /// Scratch: side of the current split per row.
    left: Vec<bool>,
}

impl Builder<'_> {
    /// Grows the subtree for `rows`; `by_feature[f]` holds the `(value, row)`
    /// pairs with a present value of feature f in ascending value order.
    fn grow(&mut self, rows: &[u32], by_feature: Vec<Vec<(f64, u32)>>, depth: usize) -> usize {
        let (gs, hs) = sum_gh(rows.iter().copied(), self.g, self.h);
        let at = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            weight: -gs / (hs + self.params.lambda) * self.learning_rate,
        });
        if depth >= self.max_depth || rows.len() < 2 {
            return at;
        }
        let (g, h, params) = (self.g, self.h, self.params);
        let choice = by_feature
            .par_iter()
            .enumerate()
            .map(|(f, sorted)| {
                let (gp, hp) = sum_gh(sorted.iter().map(|p| p.1), g, h);
                scan_feature(f, sorted, g, h, (gp, hp), (gs - gp, hs - hp), params)
            })
            .reduce(|| None, best_of);
        let Some(choice) = choice else {
            return at;
        };
        for &r in rows {
            self.left[r as usize] = choice.missing_left;
        }
        for &(v, r) in &by_feature[choice.feature] {
            self.left[r as usize] = v < choice.threshold;
        }
        let left = &self.left;
        let (left_rows, right_rows): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| left[r as usize]);
        let (left_lists, right_lists): (Vec<Vec<(f64, u32)>>, Vec<Vec<(f64, u32)>>) = by_feature
            .into_par_iter()
            .map(|list| {
                let mut l = Vec::with_capacity(left_rows.len().min(list.len()));
                let mut r = Vec::with_capacity(right_rows.len().min(list.len()));
                for p in list {
                    if left[p.1 as usize] {
                        l.push(p);
                    } else {
                        r.push(p);
                    }
                }
                (l, r)
            })
            .unzip();
        let left = self.grow(&left_rows, left_lists, depth + 1);
        let right = self.grow(&right_rows, right_lists, depth + 1);
        self.nodes[at] = TreeNode::Split {
            feature: choice.feature,
            threshold: choice.threshold,
            missing_left: choice.missing_left,
            left,
            right,
        };
        at
    }
}

fn logloss(margins: &[f64], labels: &[f64]) -> f64 {
    margins.iter().zip(labels).map(|(&m, &y)| bce_from_logit(m, y)).sum::<f64>() / margins.len() as f64
}

fn check_labels(labels: &[f64], what: &str) -> Result<usize> {
    if let Some(i) = labels.iter().position(|&y| y != 0.0 && y != 1.0) {
        return Err(PhaseError::data(format!("{what} label {i} is not 0 or 1")));
    }
    Ok(labels.iter().filter(|&&y| y == 1.0).count())
}

/// Per-round training statistics, exposed for diagnostics and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub train_loss: Vec<f64>,
}

/// Boosts trees on `(x, y)` with early stopping on `valid` when given.
pub fn fit(x: ArrayView2<f64>, y: &[f64], valid: Option<(ArrayView2<f64>, &[f64])>, config: &GbmConfig) -> Result<Forest> {
    fit_traced(x, y, valid, config).map(|(f, _)| f)
}

pub fn fit_traced(
    x: ArrayView2<f64>,
    y: &[f64],
    valid: Option<(ArrayView2<f64>, &[f64])>,
    config: &GbmConfig,
) -> Result<(Forest, FitTrace)> {
    config.validate()?;
    let (n, width) = x.dim();
    if y.len() != n {
        return Err(PhaseError::shape("gbm labels", n, y.len()));
    }
    let n_pos = check_labels(y, "training")?;
    if n_pos == 0 || n_pos == n {
        return Err(PhaseError::data("gbm training labels contain a single class"));
    }
    if let Some((vx, vy)) = valid {
        if vx.ncols() != width {
            return Err(PhaseError::shape("gbm validation width", width, vx.ncols()));
        }
        if vy.len() != vx.nrows() || vy.is_empty() {
            return Err(PhaseError::shape("gbm validation labels", vx.nrows(), vy.len()));
        }
        check_labels(vy, "validation")?;
    }
    if x.iter().any(|v| v.is_infinite()) {
        return Err(PhaseError::data("gbm features must be finite or NaN"));
    }

    let rate = n_pos as f64 / n as f64;
    let base_margin = (rate / (1.0 - rate)).ln();
    let mut forest = Forest::empty(base_margin, width);
    let mut margins = vec![base_margin; n];
    let mut valid_margins = valid.map(|(vx, _)| vec![base_margin; vx.nrows()]);
    let mut trace = FitTrace {
        train_loss: vec![logloss(&margins, y)],
    };

    let presorted: Vec<Vec<(f64, u32)>> = (0..width)
        .into_par_iter()
        .map(|f| {
            let col = x.column(f);
            let mut pairs: Vec<(f64, u32)> = (0..n as u32)
                .map(|r| (col[r as usize], r))
                .filter(|p| !p.0.is_nan())
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            pairs
        })
        .collect();
    let mut left_scratch = vec![false; n];

    let mut best: Option<(f64, usize)> = None;
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    for round in 0..config.max_rounds {
        for r in 0..n {
            let (gr, hr) = logistic_grad_hess(margins[r], y[r]);
            g[r] = gr;
            h[r] = hr;
        }
        let in_sample: Vec<bool> = if config.subsample_rate < 1.0 {
            let mut rng = substream(config.seed, "subsample", round as u64);
            let mut s: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < config.subsample_rate).collect();
            if !s.iter().any(|&b| b) {
                s[rng.random_range(0..n)] = true;
            }
            s
        } else {
            vec![true; n]
        };
        let rows: Vec<u32> = (0..n as u32).filter(|&r| in_sample[r as usize]).collect();
        let lists: Vec<Vec<(f64, u32)>> = presorted
            .par_iter()
            .map(|l| l.iter().copied().filter(|p| in_sample[p.1 as usize]).collect())
            .collect();
        let mut builder = Builder {
            g: &g,
            h: &h,
            params: SplitParams::from(config),
            max_depth: config.max_depth,
            learning_rate: config.learning_rate,
            nodes: Vec::new(),
            left: std::mem::take(&mut left_scratch),
        };
        builder.grow(&rows, lists, 0);
        left_scratch = builder.left;
        let tree = Tree { nodes: builder.nodes };

        margins.par_iter_mut().enumerate().for_each(|(r, m)| *m += tree.predict(|j| x[[r, j]]));
        trace.train_loss.push(logloss(&margins, y));
        forest.trees.push(tree);

        if let (Some((vx, vy)), Some(vm)) = (valid, valid_margins.as_mut()) {
            let tree = forest.trees.last().expect("just pushed");
            vm.par_iter_mut().enumerate().for_each(|(r, m)| *m += tree.predict(|j| vx[[r, j]]));
            let loss = logloss(vm, vy);
            if !loss.is_finite() {
                return Err(PhaseError::Numeric(format!("validation log-loss not finite at round {round}")));
            }
            forest.valid_loss.push(loss);
            if best.is_none_or(|(b, _)| loss < b) {
                best = Some((loss, round + 1));
            }
            let (_, best_round) = best.expect("set above");
            if round + 1 - best_round >= config.early_stopping_rounds {
                log::debug!("gbm early stop at round {}, best {best_round}", round + 1);
                break;
            }
        }
    }
    forest.best_round = best.map_or(forest.trees.len(), |(_, r)| r);
    Ok((forest, trace))
}
