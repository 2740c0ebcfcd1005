//! Imputation, standardization, windowing and labeling.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PhaseError, Result};
use crate::synthgen::{RawCohort, PHENYLEPHRINE_COLUMN, STATIC_FEATURES};

/// Minutes of history in one model input window.
pub const N_TIME: usize = 60;
/// Forecast horizon in minutes.
pub const HORIZON: usize = 5;
/// Minutes of history checked by the exclusion guards.
pub const HISTORY_GUARD: usize = 10;
/// Standard deviations below this are treated as degenerate and replaced by 1.
pub const MIN_STD: f64 = 1e-12;
/// Decays used by the `ema` baseline when none are given.
pub const DEFAULT_EMA_DECAYS: [f64; 3] = [0.5, 0.1, 0.02];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hypoxemia,
    Hypocapnia,
    Hypotension,
    Hypertension,
    Phenylephrine,
}

impl Task {
    pub const ALL: [Task; 5] = [
        Task::Hypoxemia,
        Task::Hypocapnia,
        Task::Hypotension,
        Task::Hypertension,
        Task::Phenylephrine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Task::Hypoxemia => "hypoxemia",
            Task::Hypocapnia => "hypocapnia",
            Task::Hypotension => "hypotension",
            Task::Hypertension => "hypertension",
            Task::Phenylephrine => "phenylephrine",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Task {
    type Err = PhaseError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.to_ascii_lowercase())
            .ok_or_else(|| PhaseError::config("task", format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub task: Task,
    pub signal: String,
    pub threshold: f64,
    pub direction: Direction,
    pub horizon: usize,
    pub history_guard: usize,
}

impl LabelSpec {
    /// The labeling rule used for `task` with its standard signal and threshold.
    pub fn for_task(task: Task) -> Self {
        let (signal, threshold, direction) = match task {
            Task::Hypoxemia => ("SAO2", 93.0, Direction::Below),
            Task::Hypocapnia => ("ETCO2", 34.0, Direction::Below),
            Task::Hypotension => ("NIBPM", 59.0, Direction::Below),
            Task::Hypertension => ("NIBPM", 110.0, Direction::Above),
            Task::Phenylephrine => (PHENYLEPHRINE_COLUMN, 0.5, Direction::Above),
        };
        LabelSpec {
            task,
            signal: signal.to_string(),
            threshold,
            direction,
            horizon: HORIZON,
            history_guard: HISTORY_GUARD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(PhaseError::config("horizon", "must be at least 1"));
        }
        if self.history_guard == 0 || self.history_guard > N_TIME {
            return Err(PhaseError::config("history_guard", format!("must lie in [1, {N_TIME}]")));
        }
        if !self.threshold.is_finite() {
            return Err(PhaseError::config("threshold", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPoint {
    /// Index into the cohort's procedure list.
    pub procedure: usize,
    /// Minute index of the window end.
    pub t: usize,
    pub label: bool,
}

/// Labeled time points of one task over one cohort. Excluded points are not
/// stored; only their count is kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub task: Task,
    pub points: Vec<LabeledPoint>,
    pub n_excluded: usize,
    /// Procedures removed entirely (phenylephrine without any administration).
    pub n_dropped_procedures: usize,
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.points.iter().filter(|p| p.label).count()
    }

    pub fn base_rate(&self) -> Option<f64> {
        (!self.points.is_empty()).then(|| self.n_positive() as f64 / self.points.len() as f64)
    }

    pub fn labels(&self) -> Vec<f64> {
        self.points.iter().map(|p| f64::from(u8::from(p.label))).collect()
    }

    /// Keeps every point whose minute is a multiple of `stride`.
    pub fn thinned(&self, stride: usize) -> LabelSet {
        let stride = stride.max(1);
        LabelSet {
            points: self.points.iter().copied().filter(|p| p.t % stride == 0).collect(),
            ..self.clone()
        }
    }
}

/// `out[i]` = extremum of the observed values in `xs[i..i + w]`, or `None`
/// when that stretch has no observation. Monotonic-deque sliding window.
fn sliding_extreme(xs: &[f64], w: usize, direction: Direction) -> Vec<Option<f64>> {
    if w == 0 || xs.len() < w {
        return Vec::new();
    }
    let better = |a: f64, b: f64| match direction {
        Direction::Below => a <= b,
        Direction::Above => a >= b,
    };
    let mut out = Vec::with_capacity(xs.len() - w + 1);
    let mut deque: VecDeque<usize> = VecDeque::new();
    for (i, &x) in xs.iter().enumerate() {
        if !x.is_nan() {
            while let Some(&back) = deque.back() {
                if better(x, xs[back]) {
                    deque.pop_back();
                } else {
                    break;
                }
            }
            deque.push_back(i);
        }
        if i + 1 >= w {
            let start = i + 1 - w;
            while deque.front().is_some_and(|&f| f < start) {
                deque.pop_front();
            }
            out.push(deque.front().map(|&f| xs[f]));
        }
    }
    out
}

/// Labels every eligible time point of a cohort.
///
/// A point `t` needs a full history window (`t >= 59`) and a full horizon.
/// Missing values are skipped when taking minima and maxima; a point whose
/// guard window or horizon is entirely missing is excluded.
pub fn label_points(cohort: &RawCohort, spec: &LabelSpec) -> Result<LabelSet> {
    spec.validate()?;
    let h = spec.horizon;
    let g = spec.history_guard;
    let mut points = Vec::new();
    let mut n_excluded = 0;
    let mut n_dropped = 0;

    if spec.task == Task::Phenylephrine {
        if spec.signal != PHENYLEPHRINE_COLUMN {
            return Err(PhaseError::data(format!(
                "phenylephrine labels come from {PHENYLEPHRINE_COLUMN}, not {}",
                spec.signal
            )));
        }
        for (pi, p) in cohort.procedures.iter().enumerate() {
            if !p.phenylephrine.iter().any(|&a| a) {
                n_dropped += 1;
                continue;
            }
            let len = p.len();
            // given[i] = number of administrations in minutes [0, i)
            let mut given = vec![0usize; len + 1];
            for (i, &a) in p.phenylephrine.iter().enumerate() {
                given[i + 1] = given[i] + usize::from(a);
            }
            for t in (N_TIME - 1)..len.saturating_sub(h) {
                let label = given[t + h + 1] - given[t + 1] > 0;
                points.push(LabeledPoint { procedure: pi, t, label });
            }
        }
        return Ok(LabelSet {
            task: spec.task,
            points,
            n_excluded,
            n_dropped_procedures: n_dropped,
        });
    }

    let s = cohort.signal_index(&spec.signal).ok_or_else(|| {
        PhaseError::data(format!(
            "label signal {} absent from cohort {}",
            spec.signal, cohort.cohort_id
        ))
    })?;
    let th = spec.threshold;
    let dir = spec.direction;
    for (pi, p) in cohort.procedures.iter().enumerate() {
        let xs = &p.signals[s];
        let len = xs.len();
        if len < N_TIME + h {
            continue;
        }
        let past = sliding_extreme(xs, g, dir);
        let fut = sliding_extreme(xs, h, dir);
        let fut2 = sliding_extreme(xs, 2 * h, dir);
        for t in (N_TIME - 1)..(len - h) {
            let guard = past[t + 1 - g];
            let ahead = fut[t + 1];
            let (Some(guard), Some(ahead)) = (guard, ahead) else {
                n_excluded += 1;
                continue;
            };
            let label = if spec.task == Task::Hypoxemia {
                let current = xs[t];
                if !current.is_nan() && crosses_strict(current, th, dir) {
                    None
                } else {
                    Some(crosses_strict(ahead, th, dir))
                }
            } else if !clear_of(guard, th, dir) {
                None
            } else if !clear_of(ahead, th, dir) {
                Some(true)
            } else if t + 2 * h < len && fut2[t + 1].is_some_and(|v| clear_of(v, th, dir)) {
                Some(false)
            } else {
                None
            };
            match label {
                Some(label) => points.push(LabeledPoint { procedure: pi, t, label }),
                None => n_excluded += 1,
            }
        }
    }
    Ok(LabelSet {
        task: spec.task,
        points,
        n_excluded,
        n_dropped_procedures: n_dropped,
    })
}

/// `x < T` (below) or `x > T` (above).
fn crosses_strict(x: f64, th: f64, dir: Direction) -> bool {
    match dir {
        Direction::Below => x < th,
        Direction::Above => x > th,
    }
}

/// `x > T` (below) or `x < T` (above): the value is safely away from the threshold.
fn clear_of(x: f64, th: f64, dir: Direction) -> bool {
    match dir {
        Direction::Below => x > th,
        Direction::Above => x < th,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl FeatureStats {
    /// Population statistics over the finite entries of `values`.
    pub fn fit(name: &str, values: impl Iterator<Item = f64>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let observed: Vec<f64> = values.filter(|v| !v.is_nan()).collect();
        for &v in &observed {
            n += 1;
            sum += v;
        }
        if n == 0 {
            return Err(PhaseError::data(format!("feature {name} has no observed values")));
        }
        let mean = sum / n as f64;
        for &v in &observed {
            sq += (v - mean) * (v - mean);
        }
        let std = (sq / n as f64).sqrt();
        Ok(FeatureStats {
            name: name.to_string(),
            mean,
            std: if std < MIN_STD { 1.0 } else { std },
        })
    }

    pub fn standardize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn unstandardize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Training-split statistics used for imputation and standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepStats {
    pub signals: Vec<FeatureStats>,
    pub statics: Vec<FeatureStats>,
}

impl PrepStats {
    pub fn signal(&self, name: &str) -> Option<&FeatureStats> {
        self.signals.iter().find(|s| s.name == name)
    }
}

pub fn fit_prep_stats(train: &RawCohort) -> Result<PrepStats> {
    if train.procedures.is_empty() {
        return Err(PhaseError::data("cannot fit statistics on an empty cohort"));
    }
    let signals = train
        .signal_names
        .iter()
        .enumerate()
        .map(|(s, name)| {
            FeatureStats::fit(
                name,
                train.procedures.iter().flat_map(|p| p.signals[s].iter().copied()),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let statics = STATIC_FEATURES
        .iter()
        .enumerate()
        .map(|(k, name)| FeatureStats::fit(name, train.procedures.iter().map(|p| p.statics[k])))
        .collect::<Result<Vec<_>>>()?;
    Ok(PrepStats { signals, statics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedProcedure {
    pub id: String,
    pub statics_raw: Vec<f64>,
    pub statics_std: Vec<f64>,
    /// Mean-imputed, standardized series.
    pub signals: Vec<Vec<f64>>,
    /// Standardized series with `NaN` kept where the minute was missing.
    pub signals_with_gaps: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCohort {
    pub cohort_id: String,
    pub signal_names: Vec<String>,
    pub procedures: Vec<PreparedProcedure>,
}

/// The 60-minute history of one signal ending at minute `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalWindow {
    pub signal_name: String,
    pub procedure_id: String,
    pub t: usize,
    pub values: Vec<f64>,
}

impl PreparedCohort {
    pub fn signal_index(&self, name: &str) -> Option<usize> {
        self.signal_names.iter().position(|s| s == name)
    }

    /// Borrowed view of the window values, without allocation.
    pub fn window_values(&self, procedure: usize, signal: usize, t: usize) -> Result<&[f64]> {
        let series = self
            .procedures
            .get(procedure)
            .and_then(|p| p.signals.get(signal))
            .ok_or_else(|| PhaseError::data(format!("no series for procedure {procedure}, signal {signal}")))?;
        if t + 1 < N_TIME || t >= series.len() {
            return Err(PhaseError::data(format!(
                "window ending at minute {t} needs minutes {}..={t} inside a series of length {}",
                (t + 1).saturating_sub(N_TIME),
                series.len()
            )));
        }
        Ok(&series[t + 1 - N_TIME..=t])
    }

    pub fn window(&self, procedure: usize, signal: usize, t: usize) -> Result<SignalWindow> {
        let values = self.window_values(procedure, signal, t)?.to_vec();
        Ok(SignalWindow {
            signal_name: self.signal_names[signal].clone(),
            procedure_id: self.procedures[procedure].id.clone(),
            t,
            values,
        })
    }
}

/// Mean-imputes and z-scores every signal with the given training statistics.
pub fn impute_and_standardize(cohort: &RawCohort, stats: &PrepStats) -> Result<PreparedCohort> {
    let sig_stats = cohort
        .signal_names
        .iter()
        .map(|name| {
            stats.signal(name).ok_or_else(|| {
                PhaseError::data(format!("signal {name} has no fitted statistics"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if stats.statics.len() != STATIC_FEATURES.len() {
        return Err(PhaseError::shape("static statistics", STATIC_FEATURES.len(), stats.statics.len()));
    }
    let procedures = cohort
        .procedures
        .iter()
        .map(|p| {
            let signals_with_gaps: Vec<Vec<f64>> = p
                .signals
                .iter()
                .zip(&sig_stats)
                .map(|(xs, st)| xs.iter().map(|&x| st.standardize(x)).collect())
                .collect();
            let signals = signals_with_gaps
                .iter()
                .map(|xs| xs.iter().map(|&z| if z.is_nan() { 0.0 } else { z }).collect())
                .collect();
            let statics_std = p
                .statics
                .iter()
                .zip(&stats.statics)
                .map(|(&x, st)| if x.is_nan() { 0.0 } else { st.standardize(x) })
                .collect();
            PreparedProcedure {
                id: p.id.clone(),
                statics_raw: p.statics.clone(),
                statics_std,
                signals,
                signals_with_gaps,
            }
        })
        .collect();
    Ok(PreparedCohort {
        cohort_id: cohort.cohort_id.clone(),
        signal_names: cohort.signal_names.clone(),
        procedures,
    })
}

/// Exponential moving averages and variances of a window.
///
/// For each decay `a`: `m_k = a x_k + (1 - a) m_{k-1}` and
/// `v_k = (1 - a)(v_{k-1} + a (x_k - m_{k-1})^2)` with `m_0 = x_0`, `v_0 = 0`.
/// Output is `[m(a_1), v(a_1), ..., m(a_d), v(a_d), x_last]`.
pub fn ema_features(window: &[f64], decays: &[f64]) -> Result<Vec<f64>> {
    let (&first, rest) = window
        .split_first()
        .ok_or_else(|| PhaseError::data("ema features need a nonempty window"))?;
    let mut out = Vec::with_capacity(2 * decays.len() + 1);
    for &a in decays {
        if !(a > 0.0 && a <= 1.0) {
            return Err(PhaseError::config("decays", format!("decay {a} outside (0, 1]")));
        }
        let mut m = first;
        let mut v = 0.0;
        for &x in rest {
            let d = x - m;
            v = (1.0 - a) * (v + a * d * d);
            m = a * x + (1.0 - a) * m;
        }
        out.push(m);
        out.push(v);
    }
    out.push(*window.last().expect("nonempty"));
    Ok(out)
}

/// Where a feature column comes from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "name", rename_all = "lowercase")]
pub enum ColumnSource {
    Signal(String),
    Static(String),
}

impl ColumnSource {
    pub fn name(&self) -> &str {
        match self {
            ColumnSource::Signal(n) | ColumnSource::Static(n) => n,
        }
    }

    pub fn is_signal(&self) -> bool {
        matches!(self, ColumnSource::Signal(_))
    }
}

/// Writes a labeled feature table: `procedure_id, t, label`, then features.
pub fn write_dataset_csv(
    path: &Path,
    procedure_ids: &[String],
    labels: &LabelSet,
    feature_names: &[String],
    features: &ndarray::Array2<f64>,
) -> Result<()> {
    if features.nrows() != labels.len() || features.ncols() != feature_names.len() {
        return Err(PhaseError::shape(
            "dataset table",
            format!("{}x{}", labels.len(), feature_names.len()),
            format!("{}x{}", features.nrows(), features.ncols()),
        ));
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["procedure_id".to_string(), "t".to_string(), "label".to_string()];
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for (row, p) in features.rows().into_iter().zip(&labels.points) {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(procedure_ids[p.procedure].clone());
        rec.push(p.t.to_string());
        rec.push(u8::from(p.label).to_string());
        rec.extend(row.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v}") }));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| PhaseError::io(path, e))?;
    Ok(())
}

/// A dataset table read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetTable {
    pub procedure_ids: Vec<String>,
    pub minutes: Vec<usize>,
    pub labels: Vec<f64>,
    pub feature_names: Vec<String>,
    pub features: ndarray::Array2<f64>,
}

pub fn read_dataset_csv(path: &Path) -> Result<DatasetTable> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "procedure_id" || &headers[1] != "t" || &headers[2] != "label" {
        return Err(PhaseError::data(format!(
            "{}: expected columns procedure_id, t, label, ...",
            path.display()
        )));
    }
    let feature_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let mut ids = Vec::new();
    let mut minutes = Vec::new();
    let mut labels = Vec::new();
    let mut flat = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        ids.push(rec[0].to_string());
        minutes.push(
            rec[1]
                .parse()
                .map_err(|_| PhaseError::data(format!("{}: bad minute `{}`", path.display(), &rec[1])))?,
        );
        labels.push(match &rec[2] {
            "0" => 0.0,
            "1" => 1.0,
            other => return Err(PhaseError::data(format!("{}: bad label `{other}`", path.display()))),
        });
        for cell in rec.iter().skip(3) {
            flat.push(if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse()
                    .map_err(|_| PhaseError::data(format!("{}: bad value `{cell}`", path.display())))?
            });
        }
    }
    let features = ndarray::Array2::from_shape_vec((ids.len(), feature_names.len()), flat)
        .map_err(|e| PhaseError::data(format!("{}: {e}", path.display())))?;
    Ok(DatasetTable {
        procedure_ids: ids,
        minutes,
        labels,
        feature_names,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Procedure;

    fn cohort_with(signal: &str, series: Vec<Vec<f64>>) -> RawCohort {
        RawCohort {
            cohort_id: "t".into(),
            signal_names: vec![signal.to_string()],
            procedures: series
                .into_iter()
                .enumerate()
                .map(|(i, xs)| Procedure {
                    id: format!("p{i}"),
                    statics: vec![1.0; 6],
                    phenylephrine: vec![false; xs.len()],
                    signals: vec![xs],
                    latent: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn constant_saturation_is_all_negative() {
        let c = cohort_with("SAO2", vec![vec![98.0; 120]]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypoxemia)).unwrap();
        assert_eq!(l.len(), 120 - 59 - 5);
        assert_eq!(l.n_positive(), 0);
    }

    #[test]
    fn currently_hypoxemic_point_is_excluded() {
        let mut xs = vec![98.0; 100];
        xs[70] = 92.0;
        let c = cohort_with("SAO2", vec![xs]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypoxemia)).unwrap();
        assert!(l.points.iter().all(|p| p.t != 70));
        let positives: Vec<usize> = l.points.iter().filter(|p| p.label).map(|p| p.t).collect();
        assert_eq!(positives, vec![65, 66, 67, 68, 69]);
    }

    #[test]
    fn blood_pressure_guard_rules() {
        // history min 65, next five minutes reach 58 -> positive
        let mut xs = vec![65.0; 100];
        for x in &mut xs[71..76] {
            *x = 58.0;
        }
        let c = cohort_with("NIBPM", vec![xs]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypotension)).unwrap();
        assert!(l.points.iter().any(|p| p.t == 70 && p.label));

        // next ten minutes bottom out at 61 -> negative
        let mut xs = vec![65.0; 100];
        for x in &mut xs[71..81] {
            *x = 61.0;
        }
        let c = cohort_with("NIBPM", vec![xs]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypotension)).unwrap();
        assert!(l.points.iter().any(|p| p.t == 70 && !p.label));

        // history touching 59 -> excluded
        let mut xs = vec![65.0; 100];
        xs[65] = 59.0;
        let c = cohort_with("NIBPM", vec![xs]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypotension)).unwrap();
        assert!(l.points.iter().all(|p| p.t != 70));
    }

    #[test]
    fn crossing_between_five_and_ten_minutes_is_excluded() {
        let mut xs = vec![65.0; 100];
        xs[78] = 50.0;
        let c = cohort_with("NIBPM", vec![xs]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypotension)).unwrap();
        assert!(l.points.iter().all(|p| p.t != 70));
    }

    #[test]
    fn missing_guard_or_horizon_excludes() {
        let mut xs = vec![98.0; 100];
        for x in &mut xs[61..=70] {
            *x = f64::NAN;
        }
        for x in &mut xs[81..=85] {
            *x = f64::NAN;
        }
        let c = cohort_with("SAO2", vec![xs]);
        let l = label_points(&c, &LabelSpec::for_task(Task::Hypoxemia)).unwrap();
        let ts: Vec<usize> = l.points.iter().map(|p| p.t).collect();
        assert!(!ts.contains(&70), "past ten all missing");
        assert!(ts.contains(&71));
        assert!(!ts.contains(&80), "next five all missing");
    }

    #[test]
    fn phenylephrine_drops_procedures_without_administration() {
        let mut c = cohort_with("SAO2", vec![vec![98.0; 100], vec![98.0; 100]]);
        c.procedures[1].phenylephrine[80] = true;
        let l = label_points(&c, &LabelSpec::for_task(Task::Phenylephrine)).unwrap();
        assert_eq!(l.n_dropped_procedures, 1);
        assert!(l.points.iter().all(|p| p.procedure == 1));
        let pos: Vec<usize> = l.points.iter().filter(|p| p.label).map(|p| p.t).collect();
        assert_eq!(pos, vec![75, 76, 77, 78, 79]);
    }

    #[test]
    fn absent_label_signal_is_an_error() {
        let c = cohort_with("SAO2", vec![vec![98.0; 100]]);
        assert!(label_points(&c, &LabelSpec::for_task(Task::Hypocapnia)).is_err());
    }

    #[test]
    fn prep_stats_rules() {
        let c = cohort_with("SAO2", vec![vec![97.0; 10]]);
        let st = fit_prep_stats(&c).unwrap();
        assert_eq!(st.signals[0].mean, 97.0);
        assert_eq!(st.signals[0].std, 1.0);

        let c = cohort_with("SAO2", vec![vec![1.0, 2.0, f64::NAN, 3.0]]);
        let st = fit_prep_stats(&c).unwrap();
        assert_eq!(st.signals[0].mean, 2.0);
        assert!((st.signals[0].std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let c = cohort_with("SAO2", vec![vec![f64::NAN; 4]]);
        let err = fit_prep_stats(&c).unwrap_err().to_string();
        assert!(err.contains("SAO2"));
    }

    #[test]
    fn standardization_arithmetic() {
        let stats = PrepStats {
            signals: vec![FeatureStats { name: "SAO2".into(), mean: 95.0, std: 2.0 }],
            statics: (0..6).map(|k| FeatureStats { name: format!("s{k}"), mean: 0.0, std: 1.0 }).collect(),
        };
        let c = cohort_with("SAO2", vec![vec![95.0, 99.0, f64::NAN], vec![f64::NAN; 3]]);
        let p = impute_and_standardize(&c, &stats).unwrap();
        assert_eq!(p.procedures[0].signals[0], vec![0.0, 2.0, 0.0]);
        assert_eq!(p.procedures[1].signals[0], vec![0.0; 3]);
        assert!(p.procedures[0].signals_with_gaps[0][2].is_nan());

        let other = cohort_with("ETCO2", vec![vec![1.0]]);
        assert!(impute_and_standardize(&other, &stats).is_err());
    }

    #[test]
    fn ema_hand_values() {
        let f = ema_features(&[0.0, 1.0], &[0.5]).unwrap();
        // v = (1 - 0.5) * (0 + 0.5 * (1 - 0)^2)
        assert_eq!(f, vec![0.5, 0.25, 1.0]);
        let f = ema_features(&[3.0; 60], &DEFAULT_EMA_DECAYS).unwrap();
        assert_eq!(f.len(), 7);
        for k in 0..3 {
            assert!((f[2 * k] - 3.0).abs() < 1e-12);
            assert_eq!(f[2 * k + 1], 0.0);
        }
        assert!(ema_features(&[], &[0.5]).is_err());
        assert!(ema_features(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn window_bounds() {
        let stats = PrepStats {
            signals: vec![FeatureStats { name: "SAO2".into(), mean: 0.0, std: 1.0 }],
            statics: (0..6).map(|k| FeatureStats { name: format!("s{k}"), mean: 0.0, std: 1.0 }).collect(),
        };
        let xs: Vec<f64> = (0..80).map(f64::from).collect();
        let p = impute_and_standardize(&cohort_with("SAO2", vec![xs]), &stats).unwrap();
        assert!(p.window(0, 0, 58).is_err());
        let w = p.window(0, 0, 59).unwrap();
        assert_eq!(w.values.len(), N_TIME);
        assert_eq!(w.values[0], 0.0);
        assert_eq!(p.window_values(0, 0, 79).unwrap()[59], 79.0);
    }
}
