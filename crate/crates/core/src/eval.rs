//! Average precision, bootstrap intervals and Fig-style report tables.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PhaseError, Result};
use crate::rng::substream;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const DEFAULT_LEVEL: f64 = 0.99;

fn is_positive(y: f64) -> bool {
    y > 0.5
}

/// Row order by descending score plus the boundaries of equal-score groups.
struct Ranking {
    order: Vec<usize>,
    group_ends: Vec<usize>,
}

fn rank(scores: &[f64]) -> Result<Ranking> {
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(PhaseError::Numeric(format!("score {i} is NaN")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut group_ends = Vec::new();
    for k in 1..=order.len() {
        if k == order.len() || scores[order[k]] != scores[order[k - 1]] {
            group_ends.push(k);
        }
    }
    Ok(Ranking { order, group_ends })
}

/// Double-double accumulator so AP sums round only once.
#[derive(Clone, Copy, Default)]
struct Dd(f64, f64);

impl Dd {
    fn two_sum(a: f64, b: f64) -> (f64, f64) {
        let s = a + b;
        let bb = s - a;
        (s, (a - (s - bb)) + (b - bb))
    }

    fn quotient(a: f64, b: f64) -> Dd {
        let q = a / b;
        Dd(q, (-q).mul_add(b, a) / b)
    }

    fn add(self, o: Dd) -> Dd {
        let (s, e) = Self::two_sum(self.0, o.0);
        let (hi, lo) = Self::two_sum(s, e + self.1 + o.1);
        Dd(hi, lo)
    }

    fn div(self, b: f64) -> f64 {
        let q = self.0 / b;
        let r = (-q).mul_add(b, self.0) + self.1;
        q + r / b
    }
}

/// Step-wise AP with per-row multiplicities. `None` when a class is absent.
fn weighted_ap(r: &Ranking, labels: &[f64], weight: impl Fn(usize) -> f64) -> Option<f64> {
    let total_pos: f64 = r.order.iter().filter(|&&i| is_positive(labels[i])).map(|&i| weight(i)).sum();
    let total: f64 = r.order.iter().map(|&i| weight(i)).sum();
    if total_pos == 0.0 || total_pos == total {
        return None;
    }
    let (mut tp, mut seen, mut ap, mut start) = (0.0, 0.0, Dd::default(), 0);
    for &end in &r.group_ends {
        let mut group_pos = 0.0;
        for &i in &r.order[start..end] {
            let w = weight(i);
            seen += w;
            if is_positive(labels[i]) {
                group_pos += w;
            }
        }
        tp += group_pos;
        if group_pos > 0.0 {
            ap = ap.add(Dd::quotient(group_pos * tp, seen));
        }
        start = end;
    }
    Some(ap.div(total_pos))
}

fn check_lengths(scores: &[f64], labels: &[f64]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(PhaseError::shape("scores vs labels", scores.len(), labels.len()));
    }
    Ok(())
}

/// Area under the step-wise precision-recall curve. Rows with equal scores
/// form a single threshold step.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let r = rank(scores)?;
    weighted_ap(&r, labels, |_| 1.0)
        .ok_or_else(|| PhaseError::data("average precision needs both positive and negative labels"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub mean: f64,
    pub std_err: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap of AP over test rows. Resamples that contain a single
/// class are redrawn.
pub fn bootstrap_ci(scores: &[f64], labels: &[f64], n_resamples: usize, level: f64, seed: u64) -> Result<BootstrapCi> {
    if n_resamples < 100 {
        return Err(PhaseError::config("bootstrap.n_resamples", "must be at least 100"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(PhaseError::config("bootstrap.level", "must lie in (0, 1)"));
    }
    average_precision(scores, labels)?;
    let n = scores.len();
    let r = rank(scores)?;
    let mut aps: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(seed, "bootstrap", b as u64);
            let mut counts = vec![0u32; n];
            loop {
                counts.fill(0);
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1;
                }
                if let Some(ap) = weighted_ap(&r, labels, |i| f64::from(counts[i])) {
                    return ap;
                }
            }
        })
        .collect();
    let mean = aps.iter().sum::<f64>() / n_resamples as f64;
    let var = aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n_resamples - 1) as f64;
    aps.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        mean,
        std_err: var.sqrt(),
        lo: percentile(&aps, 0.5 - level / 2.0),
        hi: percentile(&aps, 0.5 + level / 2.0),
    })
}

/// Test-set AP with its bootstrap distribution for one (task, representation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub representation: String,
    pub cohort: String,
    pub ap: f64,
    pub bootstrap_mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_resamples: usize,
    pub n_test: usize,
    pub base_rate: f64,
    /// Digest of the test rows and labels; reports are comparable only when equal.
    pub split_digest: String,
    pub seed: u64,
}

/// Digest of the evaluated rows, used to refuse cross-split comparisons.
pub fn split_digest(row_keys: &[(String, usize)], labels: &[f64]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for ((id, t), y) in row_keys.iter().zip(labels) {
        h.update(id.as_bytes());
        h.update([0]);
        h.update((*t as u64).to_le_bytes());
        h.update(y.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    task: &str,
    representation: &str,
    cohort: &str,
    scores: &[f64],
    labels: &[f64],
    digest: String,
    n_resamples: usize,
    level: f64,
    seed: u64,
) -> Result<MetricReport> {
    let ap = average_precision(scores, labels)?;
    let ci = bootstrap_ci(scores, labels, n_resamples, level, seed)?;
    let n_pos = labels.iter().filter(|&&y| is_positive(y)).count();
    Ok(MetricReport {
        task: task.to_string(),
        representation: representation.to_string(),
        cohort: cohort.to_string(),
        ap,
        bootstrap_mean: ci.mean,
        std_err: ci.std_err,
        ci_low: ci.lo,
        ci_high: ci.hi,
        level,
        n_resamples,
        n_test: labels.len(),
        base_rate: n_pos as f64 / labels.len() as f64,
        split_digest: digest,
        seed,
    })
}

/// `100 (AP - AP_raw) / AP_raw` for reports on the same task and test split.
pub fn pct_improvement(report: &MetricReport, raw: &MetricReport) -> Result<f64> {
    if report.task != raw.task || report.split_digest != raw.split_digest || report.n_test != raw.n_test {
        return Err(PhaseError::data(format!(
            "cannot compare {}/{} against {}/{}: different task or test split",
            report.task, report.representation, raw.task, raw.representation
        )));
    }
    Ok(100.0 * (report.ap - raw.ap) / raw.ap)
}

/// A mean and standard error for one (cohort, task, representation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub cohort: String,
    pub task: String,
    pub representation: String,
    pub mean: f64,
    pub std_err: f64,
}

/// Improvement over raw with the bootstrap standard error on the same scale.
pub fn improvement_summary(report: &MetricReport, raw: &MetricReport) -> Result<CohortSummary> {
    Ok(CohortSummary {
        cohort: report.cohort.clone(),
        task: report.task.clone(),
        representation: report.representation.clone(),
        mean: pct_improvement(report, raw)?,
        std_err: 100.0 * report.std_err / raw.ap,
    })
}

/// Averages means and standard errors across cohorts.
pub fn aggregate_cohorts(parts: &[CohortSummary]) -> Result<CohortSummary> {
    let first = parts.first().ok_or_else(|| PhaseError::data("nothing to aggregate"))?;
    if let Some(p) = parts.iter().find(|p| p.task != first.task || p.representation != first.representation) {
        return Err(PhaseError::data(format!(
            "cannot aggregate {}/{} with {}/{}",
            first.task, first.representation, p.task, p.representation
        )));
    }
    let n = parts.len() as f64;
    Ok(CohortSummary {
        cohort: parts.iter().map(|p| p.cohort.as_str()).collect::<Vec<_>>().join("+"),
        task: first.task.clone(),
        representation: first.representation.clone(),
        mean: parts.iter().map(|p| p.mean).sum::<f64>() / n,
        std_err: parts.iter().map(|p| p.std_err).sum::<f64>() / n,
    })
}

pub fn write_report_json(path: &Path, report: &MetricReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    std::fs::write(path, text).map_err(|e| PhaseError::io(path, e))
}

pub fn read_report_json(path: &Path) -> Result<MetricReport> {
    let text = std::fs::read_to_string(path).map_err(|e| PhaseError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Every `report.json` below `dir`, in sorted path order.
pub fn collect_reports(dir: &Path) -> Result<Vec<(PathBuf, MetricReport)>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| PhaseError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.file_name().is_some_and(|n| n == "report.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut paths = Vec::new();
    walk(dir, &mut paths)?;
    paths.into_iter().map(|p| read_report_json(&p).map(|r| (p, r))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Figure2Row {
    pub cohort: String,
    pub task: String,
    pub representation: String,
    pub n_seeds: usize,
    /// Mean over seeds of the test AP and its bootstrap summaries.
    pub ap: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub std_err: f64,
    /// Empty when no raw report shares the test split.
    pub pct_improvement: Option<f64>,
    pub pct_std_err: Option<f64>,
}

fn mean_of(reports: &[&MetricReport], f: impl Fn(&MetricReport) -> f64) -> f64 {
    reports.iter().map(|r| f(r)).sum::<f64>() / reports.len() as f64
}

/// One row per (cohort, task, representation, test split), averaging seeds.
/// Improvements are relative to the raw rows on the same split, when present.
pub fn figure2_rows(reports: &[MetricReport]) -> Vec<Figure2Row> {
    let mut groups: std::collections::BTreeMap<(&str, &str, &str, &str), Vec<&MetricReport>> = Default::default();
    for r in reports {
        groups
            .entry((&r.cohort, &r.task, &r.representation, &r.split_digest))
            .or_default()
            .push(r);
    }
    let raw_ap = |task: &str, digest: &str| {
        groups
            .iter()
            .find(|((_, t, rep, d), _)| *rep == "raw" && *t == task && *d == digest)
            .map(|(_, g)| mean_of(g, |r| r.ap))
    };
    groups
        .iter()
        .map(|(&(cohort, task, representation, digest), group)| {
            let ap = mean_of(group, |r| r.ap);
            let std_err = mean_of(group, |r| r.std_err);
            let raw = raw_ap(task, digest);
            Figure2Row {
                cohort: cohort.to_string(),
                task: task.to_string(),
                representation: representation.to_string(),
                n_seeds: group.len(),
                ap,
                ci_low: mean_of(group, |r| r.ci_low),
                ci_high: mean_of(group, |r| r.ci_high),
                std_err,
                pct_improvement: raw.map(|b| 100.0 * (ap - b) / b),
                pct_std_err: raw.map(|b| 100.0 * std_err / b),
            }
        })
        .collect()
}

pub fn write_figure2_csv(path: &Path, rows: &[Figure2Row]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| PhaseError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_ap() {
        let ap = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(ap, 5.0 / 6.0);
        assert_eq!(average_precision(&[0.9, 0.1, 0.8], &[1.0, 0.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn tied_scores_form_one_step() {
        // All tied: precision equals the base rate at the single threshold.
        let ap = average_precision(&[0.5; 4], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ap, 0.25);
        let ap = average_precision(&[0.9, 0.5, 0.5], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(ap, 1.0 / 3.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(average_precision(&[0.1, 0.2], &[0.0, 0.0]).is_err());
        assert!(average_precision(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        assert!(average_precision(&[0.1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic_and_brackets_ap() {
        let scores: Vec<f64> = (0..300).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let labels: Vec<f64> = (0..300).map(|i| f64::from(((i * 37) % 101) > 70 || i % 13 == 0)).collect();
        let a = bootstrap_ci(&scores, &labels, 200, 0.99, 4).unwrap();
        let b = bootstrap_ci(&scores, &labels, 200, 0.99, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.lo <= a.mean && a.mean <= a.hi);
        assert!(bootstrap_ci(&scores, &labels, 99, 0.99, 4).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.25), 2.5);
    }

    fn report(rep: &str, ap: f64, digest: &str) -> MetricReport {
        MetricReport {
            task: "hypoxemia".into(),
            representation: rep.into(),
            cohort: "or0".into(),
            ap,
            bootstrap_mean: ap,
            std_err: 0.01,
            ci_low: ap - 0.02,
            ci_high: ap + 0.02,
            level: 0.99,
            n_resamples: 1000,
            n_test: 100,
            base_rate: 0.1,
            split_digest: digest.into(),
            seed: 0,
        }
    }

    #[test]
    fn improvement_arithmetic_and_split_check() {
        let raw = report("raw", 0.30, "d");
        assert!((pct_improvement(&report("next", 0.33, "d"), &raw).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(pct_improvement(&raw, &raw).unwrap(), 0.0);
        assert!(pct_improvement(&report("next", 0.33, "other"), &raw).is_err());
    }

    #[test]
    fn cohort_aggregation_averages() {
        let part = |c: &str, m: f64, s: f64| CohortSummary {
            cohort: c.into(),
            task: "t".into(),
            representation: "next".into(),
            mean: m,
            std_err: s,
        };
        let agg = aggregate_cohorts(&[part("or0", 10.0, 1.0), part("or1", 20.0, 3.0)]).unwrap();
        assert_eq!((agg.mean, agg.std_err), (15.0, 2.0));
        let mut other = part("or1", 1.0, 1.0);
        other.representation = "min".into();
        assert!(aggregate_cohorts(&[part("or0", 1.0, 1.0), other]).is_err());
    }

    #[test]
    fn figure2_rows_attach_raw_improvement() {
        let rows = figure2_rows(&[report("raw", 0.2, "d"), report("next", 0.3, "d"), report("min", 0.3, "x")]);
        assert_eq!(rows.len(), 3);
        let next = rows.iter().find(|r| r.representation == "next").unwrap();
        assert!((next.pct_improvement.unwrap() - 50.0).abs() < 1e-9);
        let min = rows.iter().find(|r| r.representation == "min").unwrap();
        assert!(min.pct_improvement.is_none());

        let mut again = report("next", 0.5, "d");
        again.seed = 1;
        let rows = figure2_rows(&[report("raw", 0.2, "d"), report("next", 0.3, "d"), again]);
        assert_eq!(rows.len(), 2);
        let next = rows.iter().find(|r| r.representation == "next").unwrap();
        assert_eq!((next.n_seeds, next.ap), (2, 0.4));
    }
}
