mod common;

use common::{naive_labels, random_label_cohort, rng};
use phase_core::dataprep::{fit_prep_stats, impute_and_standardize, label_points, Direction, LabelSet, LabelSpec, Task};
use phase_core::synthgen::{generate_cohort, CohortPreset, GeneratorConfig, RawCohort};
use proptest::prelude::*;
use rand::Rng;

fn as_tuples(set: &LabelSet) -> (Vec<(usize, usize, bool)>, usize, usize) {
    (
        set.points.iter().map(|p| (p.procedure, p.t, p.label)).collect(),
        set.n_excluded,
        set.n_dropped_procedures,
    )
}

#[test]
fn labeler_matches_full_rescan_on_all_tasks() {
    let mut labeled = 0;
    for batch in 0..10 {
        // 100 procedures per batch, three signals each.
        let cohort = random_label_cohort(1000 + batch, 100);
        for task in Task::ALL {
            let spec = LabelSpec::for_task(task);
            let fast = label_points(&cohort, &spec).unwrap();
            assert_eq!(as_tuples(&fast), naive_labels(&cohort, &spec), "batch {batch} task {task}");
            labeled += fast.len();
        }
    }
    assert!(labeled > 10_000);
}

fn single(values: &[f64], signal: &str) -> RawCohort {
    let mut cohort = random_label_cohort(0, 1);
    let len = values.len();
    cohort.signal_names = vec![signal.to_string()];
    let p = &mut cohort.procedures[0];
    p.signals = vec![values.to_vec()];
    p.phenylephrine = vec![false; len];
    cohort
}

#[test]
fn pressure_examples() {
    let spec = LabelSpec::for_task(Task::Hypotension);
    let t = 59;
    let label_at = |past_min: f64, next5: f64, next10: f64| {
        let mut xs = vec![70.0; 80];
        xs[t - 3] = past_min;
        xs[t + 2] = next5;
        xs[t + 8] = next10;
        let set = label_points(&single(&xs, "NIBPM"), &spec).unwrap();
        set.points.iter().find(|p| p.t == t).map(|p| p.label)
    };
    assert_eq!(label_at(65.0, 58.0, 70.0), Some(true));
    assert_eq!(label_at(65.0, 70.0, 61.0), Some(false));
    assert_eq!(label_at(59.0, 70.0, 70.0), None);
}

/// Extremum of the observed values in `xs[a..=b]` for the task direction.
fn extreme(xs: &[f64], a: usize, b: usize, dir: Direction) -> Option<f64> {
    let it = xs[a..=b].iter().copied().filter(|v| !v.is_nan());
    match dir {
        Direction::Below => it.reduce(f64::min),
        Direction::Above => it.reduce(f64::max),
    }
}

fn label_of(cohort: &RawCohort, spec: &LabelSpec, t: usize) -> Option<bool> {
    let set = label_points(cohort, spec).unwrap();
    set.points.iter().find(|p| p.t == t).map(|p| p.label)
}

#[test]
fn extra_missingness_only_excludes() {
    let mut r = rng(77);
    let mut checked = 0;
    for seed in 0..300 {
        let cohort = random_label_cohort(seed, 1);
        for task in [Task::Hypoxemia, Task::Hypocapnia, Task::Hypotension, Task::Hypertension] {
            let spec = LabelSpec::for_task(task);
            let (h, g, dir) = (spec.horizon, spec.history_guard, spec.direction);
            let s = cohort.signal_index(&spec.signal).unwrap();
            let xs = &cohort.procedures[0].signals[s];
            let set = label_points(&cohort, &spec).unwrap();
            for p in &set.points {
                if !r.random_bool(0.2) {
                    continue;
                }
                let t = p.t;
                let hi = (t + 2 * h).min(xs.len() - 1);
                let windows = [(t + 1 - g, t), (t + 1, t + h), (t + 1, hi)];
                // Values that set no window extremum can be hidden freely.
                let candidates: Vec<usize> = (t + 1 - g..=hi)
                    .filter(|&i| !xs[i].is_nan() && !(task == Task::Hypoxemia && i == t))
                    .filter(|&i| {
                        windows
                            .iter()
                            .filter(|(a, b)| (*a..=*b).contains(&i))
                            .all(|&(a, b)| extreme(xs, a, b, dir) != Some(xs[i]))
                    })
                    .collect();
                let mut masked = cohort.clone();
                for &i in &candidates {
                    if r.random_bool(0.5) {
                        masked.procedures[0].signals[s][i] = f64::NAN;
                    }
                }
                let after = label_of(&masked, &spec, t);
                assert!(after.is_none() || after == Some(p.label), "seed {seed} {task} t {t}");

                let mut blind = cohort.clone();
                blind.procedures[0].signals[s][t + 1..=t + h].fill(f64::NAN);
                assert_eq!(label_of(&blind, &spec, t), None);
                let mut blind = cohort.clone();
                blind.procedures[0].signals[s][t + 1 - g..=t].fill(f64::NAN);
                assert_eq!(label_of(&blind, &spec, t), None);
                checked += 1;
            }
        }
    }
    assert!(checked > 500, "only {checked} points checked");
}

#[test]
fn standardized_training_signals_are_z_scored() {
    let config = GeneratorConfig::preset(CohortPreset::Or0, 60, 4);
    let cohort = generate_cohort(&config).unwrap();
    let stats = fit_prep_stats(&cohort).unwrap();
    let prepared = impute_and_standardize(&cohort, &stats).unwrap();
    for (s, name) in prepared.signal_names.iter().enumerate() {
        let observed: Vec<f64> = prepared
            .procedures
            .iter()
            .flat_map(|p| p.signals_with_gaps[s].iter().copied())
            .filter(|v| !v.is_nan())
            .collect();
        let n = observed.len() as f64;
        let mean = observed.iter().sum::<f64>() / n;
        let sd = (observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-6, "{name} mean {mean}");
        assert!((sd - 1.0).abs() < 1e-6, "{name} sd {sd}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn labeler_oracle_property(seed in any::<u64>(), n in 1usize..6, horizon in 1usize..8, guard in 1usize..20) {
        let cohort = random_label_cohort(seed, n);
        for task in Task::ALL {
            let spec = LabelSpec { horizon, history_guard: guard, ..LabelSpec::for_task(task) };
            let fast = label_points(&cohort, &spec).unwrap();
            prop_assert_eq!(as_tuples(&fast), naive_labels(&cohort, &spec));
        }
    }
}
