//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use ndarray::{Array2, Array3, ArrayView1};
use phase_core::dataprep::{Direction, LabelSpec, Task, N_TIME};
use phase_core::gbm::{Forest, Tree, TreeNode};
use phase_core::neuralnet::{loss_and_grad, Loss, Mode, Network, NetworkSpec};
use phase_core::synthgen::{Procedure, RawCohort, STATIC_FEATURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- labeling

/// Outcome of the full-rescan labeler: labeled `(procedure, t, label)`,
/// excluded count, dropped procedures.
pub type NaiveLabels = (Vec<(usize, usize, bool)>, usize, usize);

fn observed(xs: &[f64]) -> Vec<f64> {
    xs.iter().copied().filter(|v| !v.is_nan()).collect()
}

fn worst(xs: &[f64], dir: Direction) -> Option<f64> {
    let obs = observed(xs);
    if obs.is_empty() {
        return None;
    }
    Some(match dir {
        Direction::Below => obs.iter().cloned().fold(f64::INFINITY, f64::min),
        Direction::Above => obs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Relabels every point by rescanning its windows from scratch.
pub fn naive_labels(cohort: &RawCohort, spec: &LabelSpec) -> NaiveLabels {
    let (h, g, th, dir) = (spec.horizon, spec.history_guard, spec.threshold, spec.direction);
    let mut out = Vec::new();
    let (mut excluded, mut dropped) = (0, 0);
    for (pi, p) in cohort.procedures.iter().enumerate() {
        let len = p.len();
        if spec.task == Task::Phenylephrine {
            if !p.phenylephrine.contains(&true) {
                dropped += 1;
                continue;
            }
            let mut t = N_TIME - 1;
            while t + h < len {
                out.push((pi, t, p.phenylephrine[t + 1..=t + h].contains(&true)));
                t += 1;
            }
            continue;
        }
        let s = cohort.signal_index(&spec.signal).unwrap();
        let xs = &p.signals[s];
        let mut t = N_TIME - 1;
        while t + h < len {
            let guard = worst(&xs[t + 1 - g..=t], dir);
            let ahead = worst(&xs[t + 1..=t + h], dir);
            let label = match (guard, ahead) {
                (Some(guard), Some(ahead)) => {
                    if spec.task == Task::Hypoxemia {
                        if !xs[t].is_nan() && xs[t] < th {
                            None
                        } else {
                            Some(ahead < th)
                        }
                    } else {
                        let safe = |v: f64| if dir == Direction::Below { v > th } else { v < th };
                        if !safe(guard) {
                            None
                        } else if !safe(ahead) {
                            Some(true)
                        } else if t + 2 * h < len && worst(&xs[t + 1..=t + 2 * h], dir).is_some_and(safe) {
                            Some(false)
                        } else {
                            None
                        }
                    }
                }
                _ => None,
            };
            match label {
                Some(l) => out.push((pi, t, l)),
                None => excluded += 1,
            }
            t += 1;
        }
    }
    (out, excluded, dropped)
}

/// Random walks that cross every label threshold, with scattered and
/// block-wise missingness.
pub fn random_label_cohort(seed: u64, n_procedures: usize) -> RawCohort {
    let mut r = rng(seed);
    let specs: [(&str, f64, f64); 3] = [("SAO2", 95.0, 3.0), ("ETCO2", 35.0, 2.0), ("NIBPM", 80.0, 25.0)];
    let procedures = (0..n_procedures)
        .map(|i| {
            let len = r.random_range(55..110);
            let miss = r.random_range(0.0..0.5);
            let signals = specs
                .iter()
                .map(|&(_, centre, spread)| {
                    let mut v = centre + r.random_range(-spread..spread);
                    let mut xs: Vec<f64> = (0..len)
                        .map(|_| {
                            v += r.random_range(-spread..spread) * 0.4 + (centre - v) * 0.1;
                            (v * 2.0).round() / 2.0
                        })
                        .collect();
                    for x in xs.iter_mut() {
                        if r.random_bool(miss) {
                            *x = f64::NAN;
                        }
                    }
                    if r.random_bool(0.3) {
                        let start = r.random_range(0..len);
                        let end = (start + r.random_range(1..20)).min(len);
                        xs[start..end].fill(f64::NAN);
                    }
                    xs
                })
                .collect();
            let phen_rate = if r.random_bool(0.3) { 0.0 } else { 0.05 };
            Procedure {
                id: format!("p{i}"),
                statics: vec![0.0; STATIC_FEATURES.len()],
                signals,
                phenylephrine: (0..len).map(|_| r.random_bool(phen_rate)).collect(),
                latent: Vec::new(),
            }
        })
        .collect();
    RawCohort {
        cohort_id: "labels".into(),
        signal_names: specs.iter().map(|s| s.0.to_string()).collect(),
        procedures,
    }
}

// ---------------------------------------------------------------- gradients

/// Largest relative error between backprop and central differences for a
/// jittered random initialization of `spec`.
pub fn max_gradient_error(spec: &NetworkSpec, seed: u64, loss: Loss, mode: Mode) -> f64 {
    let mut r = rng(seed);
    // Jitter so no ReLU sits exactly on its kink when dropout zeroes its inputs.
    let mut params = Network::init(spec.clone(), seed).unwrap().params().to_vec();
    for p in &mut params {
        *p += r.random_range(-0.1..0.1);
    }
    let net = Network::from_params(spec.clone(), params).unwrap();
    let batch = 3;
    let x = Array3::from_shape_fn((batch, spec.seq_len, spec.input_dim), |_| r.random_range(-1.5..1.5));
    let y = Array2::from_shape_fn((batch, spec.output_dim()), |_| match loss {
        Loss::Bce => f64::from(r.random_bool(0.5)),
        Loss::Mse => r.random_range(-1.0..1.0),
    });
    let act = spec.output_activation();
    let pass = net.forward(x.view(), mode, true).unwrap();
    let (_, grad) = loss_and_grad(loss, act, &pass, y.view()).unwrap();
    let analytic = net.backward(pass.cache.as_ref().unwrap(), &grad).unwrap();

    let loss_at = |params: &[f64]| {
        let net = Network::from_params(spec.clone(), params.to_vec()).unwrap();
        let pass = net.forward(x.view(), mode, false).unwrap();
        loss_and_grad(loss, act, &pass, y.view()).unwrap().0
    };
    let eps = 1e-5;
    let mut params = net.params().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + eps;
        let up = loss_at(&params);
        params[i] = orig - eps;
        let down = loss_at(&params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}

// ---------------------------------------------------------------- splits

/// Dyadic gradients keep every partial sum exact regardless of order.
pub fn dyadic_instance(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let values = (0..n)
        .map(|_| if r.random_bool(0.15) { f64::NAN } else { f64::from(r.random_range(0..7)) * 0.5 })
        .collect();
    let g = (0..n).map(|_| f64::from(r.random_range(-8..=8)) / 4.0).collect();
    let h = (0..n).map(|_| f64::from(r.random_range(1..=8)) / 8.0).collect();
    (values, g, h)
}

/// Scores every midpoint and both missing directions by rescanning all rows.
pub fn exhaustive_split(values: &[f64], g: &[f64], h: &[f64], lambda: f64, gamma: f64, min_child_weight: f64) -> Option<(f64, f64, bool)> {
    let mut distinct: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut best: Option<(f64, f64, bool)> = None;
    for w in distinct.windows(2) {
        let th = w[0] + (w[1] - w[0]) / 2.0;
        for missing_left in [true, false] {
            let (mut gl, mut hl, mut gr, mut hr) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..values.len() {
                let left = if values[i].is_nan() { missing_left } else { values[i] < th };
                if left {
                    gl += g[i];
                    hl += h[i];
                } else {
                    gr += g[i];
                    hr += h[i];
                }
            }
            if hl < min_child_weight || hr < min_child_weight {
                continue;
            }
            let gain = 0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr) * (gl + gr) / (hl + hr + lambda)) - gamma;
            if gain <= 0.0 {
                continue;
            }
            let replace = match best {
                None => true,
                Some((bt, bg, bm)) => gain > bg || (gain == bg && (th < bt || (th == bt && missing_left && !bm))),
            };
            if replace {
                best = Some((th, gain, missing_left));
            }
        }
    }
    best
}

pub fn random_dataset(seed: u64, n: usize, width: usize) -> (Array2<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = Array2::from_shape_fn((n, width), |_| if r.random_bool(0.05) { f64::NAN } else { r.random_range(-2.0..2.0) });
    let y = (0..n)
        .map(|i| {
            let s = x[[i, 0]].max(-1.0) + 0.5 * x[[i, 1 % width]].abs();
            f64::from(r.random::<f64>() < 1.0 / (1.0 + (-2.0 * s).exp()))
        })
        .collect();
    (x, y)
}

// ---------------------------------------------------------------- shapley

fn random_subtree(r: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, depth: usize, max_depth: usize, width: usize) -> usize {
    let at = nodes.len();
    if depth == max_depth || (depth > 0 && r.random_bool(0.25)) {
        nodes.push(TreeNode::Leaf {
            weight: r.random_range(-1.0..1.0),
        });
        return at;
    }
    nodes.push(TreeNode::Leaf { weight: 0.0 });
    let feature = r.random_range(0..width);
    let threshold = f64::from(r.random_range(0..8)) / 4.0 - 1.0;
    let missing_left = r.random_bool(0.5);
    let left = random_subtree(r, nodes, depth + 1, max_depth, width);
    let right = random_subtree(r, nodes, depth + 1, max_depth, width);
    nodes[at] = TreeNode::Split {
        feature,
        threshold,
        missing_left,
        left,
        right,
    };
    at
}

/// A random forest plus a foreground row and background rows on a coarse grid
/// so that rows often share branches.
pub fn random_forest_case(seed: u64) -> (Forest, Vec<f64>, Array2<f64>) {
    let mut r = rng(seed);
    let width = r.random_range(1..=8);
    let n_trees = r.random_range(1..=5);
    let trees = (0..n_trees)
        .map(|_| {
            let depth = r.random_range(1..=3);
            let mut nodes = Vec::new();
            random_subtree(&mut r, &mut nodes, 0, depth, width);
            Tree { nodes }
        })
        .collect::<Vec<_>>();
    let value = |r: &mut ChaCha8Rng| {
        if r.random_bool(0.1) {
            f64::NAN
        } else {
            f64::from(r.random_range(0..9)) / 4.0 - 1.1
        }
    };
    let x = (0..width).map(|_| value(&mut r)).collect();
    let n_bg = r.random_range(1..=16);
    let bg = Array2::from_shape_fn((n_bg, width), |_| value(&mut r));
    let forest = Forest {
        base_margin: r.random_range(-1.0..1.0),
        best_round: trees.len(),
        trees,
        n_features: width,
        valid_loss: vec![],
    };
    (forest, x, bg)
}

/// Shapley values of the interventional game by enumerating all coalitions.
pub fn brute_force_shapley(forest: &Forest, x: &[f64], background: &Array2<f64>) -> Vec<f64> {
    let d = x.len();
    let value = |mask: usize| -> f64 {
        let mut total = 0.0;
        for r in background.outer_iter() {
            let hybrid: Vec<f64> = (0..d).map(|j| if mask >> j & 1 == 1 { x[j] } else { r[j] }).collect();
            total += forest.predict_margin_row(ArrayView1::from(&hybrid)).unwrap();
        }
        total / background.nrows() as f64
    };
    let values: Vec<f64> = (0..1usize << d).map(value).collect();
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    (0..d)
        .map(|j| {
            let mut phi = 0.0;
            for mask in 0..1usize << d {
                if mask >> j & 1 == 1 {
                    continue;
                }
                let s = mask.count_ones() as usize;
                let w = fact(s) * fact(d - s - 1) / fact(d);
                phi += w * (values[mask | 1 << j] - values[mask]);
            }
            phi
        })
        .collect()
}

// ---------------------------------------------------------------- ranking

/// Rescans every row at each distinct threshold.
pub fn naive_ap(scores: &[f64], labels: &[f64]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let total_pos = labels.iter().filter(|&&y| y == 1.0).count() as f64;
    let (mut prev_recall, mut ap) = (0.0, 0.0);
    for th in thresholds {
        let (mut tp, mut k) = (0.0, 0.0);
        for (s, y) in scores.iter().zip(labels) {
            if *s >= th {
                k += 1.0;
                tp += y;
            }
        }
        let recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / k);
        prev_recall = recall;
    }
    ap
}
