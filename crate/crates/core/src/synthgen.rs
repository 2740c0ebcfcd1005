//! Synthetic operating-room and ICU cohorts.
//!
//! Each signal is an order-2 autoregressive process around a per-procedure
//! baseline. Adverse events come from a hidden two-state (stable/unstable)
//! Markov chain per task: entering the unstable state starts a slow ramp
//! towards the task threshold, so a crossing is preceded by a visible
//! precursor in the history window. Onset probabilities are calibrated so the
//! labeled base rate of each task hits its configured target.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::dataprep::Direction;
use crate::dataprep::{label_points, LabelSpec, Task};
use crate::error::{PhaseError, Result};
use crate::rng::{derive_seed, substream};

/// Signal names used when no explicit signal set is configured.
pub const DEFAULT_SIGNALS: [&str; 15] = [
    "SAO2", "ETCO2", "NIBPS", "NIBPM", "NIBPD", "FIO2", "ETSEV", "ETSEVO", "ECGRATE", "PEAK",
    "PEEP", "PIP", "RESPRATE", "TEMP1", "TV",
];

/// Static feature names, in column order.
pub const STATIC_FEATURES: [&str; 6] = [
    "Height",
    "Weight",
    "ASA Code",
    "ASA Code Emergency",
    "Gender",
    "Age",
];

/// Column name of the phenylephrine administration indicator.
pub const PHENYLEPHRINE_COLUMN: &str = "PHENYL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub name: String,
    pub unit: String,
    /// Population mean of the per-procedure baseline level.
    pub baseline: f64,
    /// Spread of the per-procedure baseline level.
    pub baseline_sd: f64,
    /// AR(2) coefficients `[phi1, phi2]`.
    pub ar: [f64; 2],
    pub noise_sd: f64,
    /// White noise added to each observed minute on top of the AR process.
    #[serde(default)]
    pub measurement_sd: f64,
    pub bounds: [f64; 2],
    /// Probability that any single minute is unobserved.
    pub missing_rate: f64,
}

/// Shape of an adverse-event episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    pub task: Task,
    /// Signal the episode drives.
    pub signal: String,
    pub direction: Direction,
    /// Threshold the episode crosses. `None` for episodes that only shift the
    /// signal by `magnitude` (phenylephrine precursors).
    pub threshold: Option<f64>,
    /// Extra distance past the threshold, or the full shift when there is no
    /// threshold, drawn uniformly from this range.
    pub magnitude: [f64; 2],
    pub ramp_minutes: [usize; 2],
    pub hold_minutes: [usize; 2],
    pub recover_minutes: [usize; 2],
    /// Other signals moved along with the primary one, with their gain.
    #[serde(default)]
    pub coupled: Vec<(String, f64)>,
    /// Fraction of labeled time points that should be positive.
    pub event_rate_target: f64,
    /// Fraction of procedures in which the episode can occur at all.
    #[serde(default = "one")]
    pub eligible_fraction: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normal1 {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticSpec {
    pub height_in: Normal1,
    pub weight_lb: Normal1,
    pub age_yr: Normal1,
    pub female_fraction: f64,
    /// Probabilities of ASA codes I..VI.
    pub asa_probs: [f64; 6],
    pub emergency_rate: f64,
    /// Log-rate multiplier per ASA code step applied to event onsets.
    pub asa_risk: f64,
}

/// Offsets that distinguish one cohort from another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortShift {
    #[serde(default)]
    pub baseline_offset: BTreeMap<String, f64>,
    /// Added to both AR coefficients' sum by scaling `phi1`.
    #[serde(default)]
    pub ar_phi1_delta: f64,
    #[serde(default = "one")]
    pub noise_scale: f64,
}

impl Default for CohortShift {
    fn default() -> Self {
        CohortShift {
            baseline_offset: BTreeMap::new(),
            ar_phi1_delta: 0.0,
            noise_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub cohort_id: String,
    pub n_procedures: usize,
    pub procedure_len_minutes: [usize; 2],
    pub signal_specs: Vec<SignalSpec>,
    pub static_spec: StaticSpec,
    pub events: Vec<EventSpec>,
    #[serde(default)]
    pub cohort_shift: CohortShift,
    #[serde(default = "default_calibration_rounds")]
    pub calibration_rounds: usize,
    pub seed: u64,
}

fn default_calibration_rounds() -> usize {
    12
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortPreset {
    Or0,
    Or1,
    Icu,
}

impl std::str::FromStr for CohortPreset {
    type Err = PhaseError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "or0" => Ok(CohortPreset::Or0),
            "or1" => Ok(CohortPreset::Or1),
            "icu" | "icu_p" | "icup" => Ok(CohortPreset::Icu),
            other => Err(PhaseError::config("preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// Latent episode phase of one task over one procedure.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrack {
    pub task: Task,
    /// 0 = stable, 1 = ramp (precursor), 2 = hold, 3 = recovery.
    pub phase: Vec<u8>,
}

pub const PHASE_STABLE: u8 = 0;
pub const PHASE_RAMP: u8 = 1;
pub const PHASE_HOLD: u8 = 2;
pub const PHASE_RECOVER: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Procedure {
    pub id: String,
    /// Values in [`STATIC_FEATURES`] order.
    pub statics: Vec<f64>,
    /// One series per cohort signal; `NaN` marks a missing minute.
    pub signals: Vec<Vec<f64>>,
    pub phenylephrine: Vec<bool>,
    /// Ground-truth episode phases. Not persisted.
    pub latent: Vec<LatentTrack>,
}

impl Procedure {
    pub fn len(&self) -> usize {
        self.phenylephrine.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phenylephrine.is_empty()
    }

    /// Observation mask of signal `s`: `true` where a value is present.
    pub fn mask(&self, s: usize) -> Vec<bool> {
        self.signals[s].iter().map(|v| !v.is_nan()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawCohort {
    pub cohort_id: String,
    pub signal_names: Vec<String>,
    pub procedures: Vec<Procedure>,
}

impl RawCohort {
    pub fn signal_index(&self, name: &str) -> Option<usize> {
        self.signal_names.iter().position(|s| s == name)
    }

    pub fn n_minutes(&self) -> usize {
        self.procedures.iter().map(Procedure::len).sum()
    }

    /// Keeps only the named signals, in the given order.
    pub fn select_signals(&self, names: &[String]) -> Result<RawCohort> {
        let idx = names
            .iter()
            .map(|n| {
                self.signal_index(n).ok_or_else(|| {
                    PhaseError::data(format!("signal {n} absent from cohort {}", self.cohort_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RawCohort {
            cohort_id: self.cohort_id.clone(),
            signal_names: names.to_vec(),
            procedures: self
                .procedures
                .iter()
                .map(|p| Procedure {
                    signals: idx.iter().map(|&i| p.signals[i].clone()).collect(),
                    ..p.clone()
                })
                .collect(),
        })
    }
}

fn signal(
    name: &str,
    unit: &str,
    baseline: f64,
    baseline_sd: f64,
    ar: [f64; 2],
    noise_sd: f64,
    bounds: [f64; 2],
    missing_rate: f64,
) -> SignalSpec {
    SignalSpec {
        name: name.into(),
        unit: unit.into(),
        baseline,
        baseline_sd,
        ar,
        noise_sd,
        measurement_sd: 0.0,
        bounds,
        missing_rate,
    }
}

/// The default operating-room signal set.
pub fn default_signal_specs() -> Vec<SignalSpec> {
    vec![
        signal("SAO2", "%", 97.6, 0.7, [0.6, 0.25], 0.35, [50.0, 100.0], 0.05),
        signal("ETCO2", "mmHg", 39.0, 1.6, [0.6, 0.25], 0.45, [10.0, 70.0], 0.08),
        signal("NIBPS", "mmHg", 120.0, 9.0, [0.5, 0.3], 2.5, [50.0, 230.0], 0.3),
        signal("NIBPM", "mmHg", 83.0, 6.0, [0.5, 0.3], 1.8, [30.0, 170.0], 0.3),
        signal("NIBPD", "mmHg", 66.0, 5.0, [0.5, 0.3], 1.6, [20.0, 140.0], 0.3),
        signal("FIO2", "%", 55.0, 10.0, [0.7, 0.2], 1.5, [21.0, 100.0], 0.05),
        signal("ETSEV", "%", 1.8, 0.4, [0.7, 0.2], 0.06, [0.0, 8.0], 0.15),
        signal("ETSEVO", "%", 1.9, 0.4, [0.7, 0.2], 0.06, [0.0, 8.0], 0.15),
        signal("ECGRATE", "bpm", 75.0, 9.0, [0.6, 0.25], 1.8, [30.0, 190.0], 0.05),
        signal("PEAK", "cmH2O", 20.0, 4.0, [0.6, 0.25], 0.7, [0.0, 60.0], 0.1),
        signal("PEEP", "cmH2O", 5.0, 1.5, [0.7, 0.2], 0.25, [0.0, 20.0], 0.1),
        signal("PIP", "cmH2O", 22.0, 4.0, [0.6, 0.25], 0.7, [0.0, 60.0], 0.1),
        signal("RESPRATE", "1/min", 12.0, 2.0, [0.6, 0.25], 0.5, [4.0, 40.0], 0.08),
        signal("TEMP1", "C", 36.3, 0.5, [0.75, 0.15], 0.04, [32.0, 40.0], 0.2),
        signal("TV", "mL", 480.0, 60.0, [0.6, 0.25], 12.0, [100.0, 1000.0], 0.1),
    ]
}

/// Episode shapes for the five forecasting tasks with the given base-rate targets
/// (hypoxemia, hypocapnia, hypotension, hypertension, phenylephrine).
pub fn default_event_specs(rates: [f64; 5]) -> Vec<EventSpec> {
    let bp_coupling = vec![("NIBPS".to_string(), 1.3), ("NIBPD".to_string(), 0.8)];
    vec![
        EventSpec {
            task: Task::Hypoxemia,
            signal: "SAO2".into(),
            direction: Direction::Below,
            threshold: Some(93.0),
            magnitude: [0.5, 3.0],
            ramp_minutes: [12, 25],
            hold_minutes: [3, 10],
            recover_minutes: [4, 10],
            coupled: vec![],
            event_rate_target: rates[0],
            eligible_fraction: 1.0,
        },
        EventSpec {
            task: Task::Hypocapnia,
            signal: "ETCO2".into(),
            direction: Direction::Below,
            threshold: Some(34.0),
            magnitude: [0.5, 3.0],
            ramp_minutes: [10, 22],
            hold_minutes: [3, 12],
            recover_minutes: [4, 10],
            coupled: vec![("RESPRATE".to_string(), -0.4)],
            event_rate_target: rates[1],
            eligible_fraction: 1.0,
        },
        EventSpec {
            task: Task::Hypotension,
            signal: "NIBPM".into(),
            direction: Direction::Below,
            threshold: Some(59.0),
            magnitude: [1.0, 6.0],
            ramp_minutes: [10, 22],
            hold_minutes: [3, 10],
            recover_minutes: [4, 10],
            coupled: bp_coupling.clone(),
            event_rate_target: rates[2],
            eligible_fraction: 1.0,
        },
        EventSpec {
            task: Task::Hypertension,
            signal: "NIBPM".into(),
            direction: Direction::Above,
            threshold: Some(110.0),
            magnitude: [1.0, 6.0],
            ramp_minutes: [10, 22],
            hold_minutes: [3, 10],
            recover_minutes: [4, 10],
            coupled: {
                let mut c = bp_coupling.clone();
                c.push(("ECGRATE".to_string(), 0.3));
                c
            },
            event_rate_target: rates[3],
            eligible_fraction: 1.0,
        },
        EventSpec {
            task: Task::Phenylephrine,
            signal: "NIBPM".into(),
            direction: Direction::Below,
            threshold: None,
            magnitude: [8.0, 18.0],
            ramp_minutes: [8, 16],
            hold_minutes: [1, 1],
            recover_minutes: [4, 8],
            coupled: bp_coupling,
            event_rate_target: rates[4],
            eligible_fraction: 0.65,
        },
    ]
}

impl GeneratorConfig {
    /// Configuration echoing one of the three cohort roles.
    pub fn preset(preset: CohortPreset, n_procedures: usize, seed: u64) -> Self {
        let or_statics = |female: f64, age: (f64, f64), weight: (f64, f64), height: (f64, f64), asa: [f64; 6], emergency: f64| StaticSpec {
            height_in: Normal1 { mean: height.0, sd: height.1 },
            weight_lb: Normal1 { mean: weight.0, sd: weight.1 },
            age_yr: Normal1 { mean: age.0, sd: age.1 },
            female_fraction: female,
            asa_probs: asa,
            emergency_rate: emergency,
            asa_risk: 0.25,
        };
        match preset {
            CohortPreset::Or0 => GeneratorConfig {
                cohort_id: "or0".into(),
                n_procedures,
                procedure_len_minutes: [90, 240],
                signal_specs: default_signal_specs(),
                static_spec: or_statics(
                    0.57,
                    (51.859, 16.748),
                    (185.273, 54.042),
                    (66.913, 8.268),
                    [0.1158, 0.4116, 0.3952, 0.0754, 0.0019, 0.0001],
                    0.0765,
                ),
                events: default_event_specs([0.0109, 0.0976, 0.0744, 0.0170, 0.0723]),
                cohort_shift: CohortShift::default(),
                calibration_rounds: default_calibration_rounds(),
                seed,
            },
            CohortPreset::Or1 => {
                let mut offsets = BTreeMap::new();
                offsets.insert("SAO2".to_string(), 0.3);
                offsets.insert("NIBPM".to_string(), -3.0);
                offsets.insert("NIBPS".to_string(), -4.0);
                offsets.insert("ETCO2".to_string(), 1.0);
                offsets.insert("ECGRATE".to_string(), 6.0);
                GeneratorConfig {
                    cohort_id: "or1".into(),
                    n_procedures,
                    procedure_len_minutes: [90, 240],
                    signal_specs: default_signal_specs(),
                    static_spec: or_statics(
                        0.38,
                        (48.701, 18.419),
                        (181.608, 54.194),
                        (67.502, 8.607),
                        [0.1657, 0.4393, 0.3157, 0.0730, 0.0048, 0.0016],
                        0.1531,
                    ),
                    events: default_event_specs([0.0219, 0.0806, 0.0353, 0.0166, 0.0915]),
                    cohort_shift: CohortShift {
                        baseline_offset: offsets,
                        ar_phi1_delta: 0.05,
                        noise_scale: 1.1,
                    },
                    calibration_rounds: default_calibration_rounds(),
                    seed,
                }
            }
            CohortPreset::Icu => {
                let mut offsets = BTreeMap::new();
                offsets.insert("SAO2".to_string(), -0.8);
                let sao2 = default_signal_specs().remove(0);
                let mut hypox = default_event_specs([0.0393, 0.1, 0.1, 0.1, 0.1]).remove(0);
                hypox.ramp_minutes = [10, 30];
                GeneratorConfig {
                    cohort_id: "icu_p".into(),
                    n_procedures,
                    procedure_len_minutes: [120, 360],
                    signal_specs: vec![sao2],
                    static_spec: StaticSpec {
                        height_in: Normal1 { mean: 66.967, sd: 6.181 },
                        weight_lb: Normal1 { mean: 176.662, sd: 55.448 },
                        age_yr: Normal1 { mean: 63.956, sd: 17.708 },
                        female_fraction: 0.44,
                        asa_probs: [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
                        emergency_rate: 0.0,
                        asa_risk: 0.0,
                    },
                    events: vec![hypox],
                    cohort_shift: CohortShift {
                        baseline_offset: offsets,
                        ar_phi1_delta: 0.1,
                        noise_scale: 1.3,
                    },
                    calibration_rounds: default_calibration_rounds(),
                    seed,
                }
            }
        }
    }

    /// Restricts the configuration to a subset of signals, dropping events
    /// whose driving signal is gone.
    pub fn with_signals(mut self, names: &[&str]) -> Result<Self> {
        let mut specs = Vec::with_capacity(names.len());
        for name in names {
            let spec = self
                .signal_specs
                .iter()
                .find(|s| s.name == *name)
                .ok_or_else(|| PhaseError::config("signal_specs", format!("unknown signal {name}")))?;
            specs.push(spec.clone());
        }
        self.signal_specs = specs;
        let kept: Vec<String> = names.iter().map(|s| s.to_string()).collect();
        self.events.retain(|e| kept.contains(&e.signal));
        for e in &mut self.events {
            e.coupled.retain(|(s, _)| kept.contains(s));
        }
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_procedures == 0 {
            return Err(PhaseError::config("n_procedures", "must be positive"));
        }
        let [lo, hi] = self.procedure_len_minutes;
        if lo == 0 || lo > hi {
            return Err(PhaseError::config(
                "procedure_len_minutes",
                format!("need 0 < min <= max, got [{lo}, {hi}]"),
            ));
        }
        if self.signal_specs.is_empty() {
            return Err(PhaseError::config("signal_specs", "at least one signal is required"));
        }
        let shift = &self.cohort_shift;
        if !(shift.noise_scale > 0.0 && shift.noise_scale.is_finite()) {
            return Err(PhaseError::config("cohort_shift.noise_scale", "must be positive"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.signal_specs {
            let field = |f: &str| format!("signal_specs[{}].{f}", s.name);
            if !seen.insert(s.name.clone()) {
                return Err(PhaseError::config(field("name"), "duplicate signal"));
            }
            if !(0.0..1.0).contains(&s.missing_rate) {
                return Err(PhaseError::config(field("missing_rate"), "must lie in [0, 1)"));
            }
            let [min, max] = s.bounds;
            if !(min.is_finite() && max.is_finite() && min < max) {
                return Err(PhaseError::config(field("bounds"), "need finite min < max"));
            }
            let phi1 = s.ar[0] + shift.ar_phi1_delta;
            if !ar2_is_stable(phi1, s.ar[1]) {
                return Err(PhaseError::config(
                    field("ar"),
                    format!("AR(2) coefficients [{phi1}, {}] are not stationary", s.ar[1]),
                ));
            }
            if !(s.noise_sd >= 0.0 && s.measurement_sd >= 0.0 && s.baseline_sd >= 0.0 && s.baseline.is_finite()) {
                return Err(PhaseError::config(field("noise_sd"), "spreads must be nonnegative"));
            }
        }
        let st = &self.static_spec;
        let total: f64 = st.asa_probs.iter().sum();
        if st.asa_probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-3 {
            return Err(PhaseError::config("static_spec.asa_probs", "must be a probability vector"));
        }
        for (name, p) in [("female_fraction", st.female_fraction), ("emergency_rate", st.emergency_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PhaseError::config(format!("static_spec.{name}"), "must lie in [0, 1]"));
            }
        }
        let mut tasks = std::collections::BTreeSet::new();
        for e in &self.events {
            let field = |f: &str| format!("events[{}].{f}", e.task.name());
            if !tasks.insert(e.task) {
                return Err(PhaseError::config(field("task"), "duplicate task"));
            }
            if !(e.event_rate_target > 0.0 && e.event_rate_target < 0.5) {
                return Err(PhaseError::config(field("event_rate_target"), "must lie in (0, 0.5)"));
            }
            if self.signal_specs.iter().all(|s| s.name != e.signal) {
                return Err(PhaseError::config(field("signal"), format!("unknown signal {}", e.signal)));
            }
            for (s, _) in &e.coupled {
                if self.signal_specs.iter().all(|spec| &spec.name != s) {
                    return Err(PhaseError::config(field("coupled"), format!("unknown signal {s}")));
                }
            }
            for (name, [a, b]) in [("ramp_minutes", e.ramp_minutes), ("hold_minutes", e.hold_minutes), ("recover_minutes", e.recover_minutes)] {
                if a == 0 || a > b {
                    return Err(PhaseError::config(field(name), "need 0 < min <= max"));
                }
            }
            if !(e.magnitude[0] >= 0.0 && e.magnitude[0] <= e.magnitude[1]) {
                return Err(PhaseError::config(field("magnitude"), "need 0 <= min <= max"));
            }
            if !(e.eligible_fraction > 0.0 && e.eligible_fraction <= 1.0) {
                return Err(PhaseError::config(field("eligible_fraction"), "must lie in (0, 1]"));
            }
            if e.task != Task::Phenylephrine && e.threshold.is_none() {
                return Err(PhaseError::config(field("threshold"), "threshold events need a threshold"));
            }
        }
        Ok(())
    }
}

/// Stationarity of `x_t = phi1 x_{t-1} + phi2 x_{t-2} + e_t`: both roots of the
/// companion matrix strictly inside the unit circle.
pub fn ar2_is_stable(phi1: f64, phi2: f64) -> bool {
    phi2.abs() < 1.0 && phi1 + phi2 < 1.0 && phi2 - phi1 < 1.0
}

/// Randomness and noise of one procedure that do not depend on event rates.
struct ProcedureBase {
    statics: Vec<f64>,
    /// Per-signal level plus AR noise, before events.
    series: Vec<Vec<f64>>,
    /// Per-signal observation noise, empty when the signal has none.
    measurement: Vec<Vec<f64>>,
    levels: Vec<f64>,
    missing: Vec<Vec<bool>>,
    /// Per event: whether the procedure is eligible, then per-minute draws
    /// (onset uniform, ramp, hold, recover, magnitude).
    event_draws: Vec<(bool, Vec<[f64; 5]>)>,
    risk: f64,
}

fn normal(rng: &mut crate::rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_base(config: &GeneratorConfig, index: usize) -> ProcedureBase {
    let mut rng = substream(config.seed, "procedure", index as u64);
    let [lo, hi] = config.procedure_len_minutes;
    let len = rng.random_range(lo..=hi);
    let st = &config.static_spec;
    let height = st.height_in.mean + st.height_in.sd * normal(&mut rng);
    let weight = (st.weight_lb.mean + st.weight_lb.sd * normal(&mut rng)).max(60.0);
    // table percentages need not sum to exactly 1
    let u: f64 = rng.random::<f64>() * st.asa_probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut asa = 6.0;
    for (k, p) in st.asa_probs.iter().enumerate() {
        acc += p;
        if u < acc {
            asa = (k + 1) as f64;
            break;
        }
    }
    let emergency = f64::from(u8::from(rng.random::<f64>() < st.emergency_rate));
    let gender = f64::from(u8::from(rng.random::<f64>() < st.female_fraction));
    let age = (st.age_yr.mean + st.age_yr.sd * normal(&mut rng)).clamp(18.0, 100.0);
    let statics = vec![height, weight, asa, emergency, gender, age];
    let risk = (st.asa_risk * (asa - 2.4)).exp();

    let shift = &config.cohort_shift;
    let mut series = Vec::with_capacity(config.signal_specs.len());
    let mut levels = Vec::with_capacity(config.signal_specs.len());
    let mut missing = Vec::with_capacity(config.signal_specs.len());
    for spec in &config.signal_specs {
        let offset = shift.baseline_offset.get(&spec.name).copied().unwrap_or(0.0);
        let level = spec.baseline + offset + spec.baseline_sd * normal(&mut rng).clamp(-2.5, 2.5);
        let phi1 = spec.ar[0] + shift.ar_phi1_delta;
        let phi2 = spec.ar[1];
        let sd = spec.noise_sd * shift.noise_scale;
        // Start from the stationary variance so early minutes are not special.
        let var = (1.0 - phi2) / ((1.0 + phi2) * ((1.0 - phi2).powi(2) - phi1 * phi1));
        let mut prev2 = sd * var.sqrt() * normal(&mut rng);
        let mut prev1 = phi1 * prev2 + sd * normal(&mut rng);
        let mut xs = Vec::with_capacity(len);
        let mut mask = Vec::with_capacity(len);
        for _ in 0..len {
            let x = phi1 * prev1 + phi2 * prev2 + sd * normal(&mut rng);
            prev2 = prev1;
            prev1 = x;
            xs.push(level + x);
            mask.push(rng.random::<f64>() < spec.missing_rate);
        }
        series.push(xs);
        levels.push(level);
        missing.push(mask);
    }

    let mut mrng = substream(config.seed, "measurement", index as u64);
    let measurement = config
        .signal_specs
        .iter()
        .map(|spec| match spec.measurement_sd * shift.noise_scale {
            sd if sd > 0.0 => (0..len).map(|_| sd * normal(&mut mrng)).collect(),
            _ => Vec::new(),
        })
        .collect();

    let mut erng = substream(config.seed, "events", index as u64);
    let event_draws = config
        .events
        .iter()
        .map(|e| {
            let eligible = erng.random::<f64>() < e.eligible_fraction;
            let draws = (0..len)
                .map(|_| {
                    [
                        erng.random::<f64>(),
                        erng.random::<f64>(),
                        erng.random::<f64>(),
                        erng.random::<f64>(),
                        erng.random::<f64>(),
                    ]
                })
                .collect();
            (eligible, draws)
        })
        .collect();
    ProcedureBase {
        statics,
        series,
        measurement,
        levels,
        missing,
        event_draws,
        risk,
    }
}

fn pick(range: [usize; 2], u: f64) -> usize {
    let span = range[1] - range[0] + 1;
    range[0] + ((u * span as f64) as usize).min(span - 1)
}

fn realize(config: &GeneratorConfig, index: usize, base: &ProcedureBase, onset: &[f64]) -> Procedure {
    let len = base.series.first().map_or(0, Vec::len);
    let mut deviation = vec![vec![0.0; len]; config.signal_specs.len()];
    let mut phenyl = vec![false; len];
    let mut latent = Vec::with_capacity(config.events.len());
    let sig_index = |name: &str| config.signal_specs.iter().position(|s| s.name == name);

    for (k, event) in config.events.iter().enumerate() {
        let (eligible, draws) = &base.event_draws[k];
        let mut phase = vec![PHASE_STABLE; len];
        let primary = sig_index(&event.signal).expect("validated signal");
        let p = (onset[k] * base.risk).min(0.9);
        let sign = match event.direction {
            Direction::Below => -1.0,
            Direction::Above => 1.0,
        };
        let mut t = 0;
        while *eligible && t < len {
            let d = draws[t];
            if d[0] >= p {
                t += 1;
                continue;
            }
            let ramp = pick(event.ramp_minutes, d[1]);
            let hold = pick(event.hold_minutes, d[2]);
            let recover = pick(event.recover_minutes, d[3]);
            let extra = event.magnitude[0] + (event.magnitude[1] - event.magnitude[0]) * d[4];
            let amplitude = match event.threshold {
                Some(th) => sign * ((base.levels[primary] - th).abs() + extra),
                None => sign * extra,
            };
            let total = ramp + hold + recover;
            for tau in 0..total {
                let m = t + tau;
                if m >= len {
                    break;
                }
                let (shape, ph) = if tau < ramp {
                    ((tau + 1) as f64 / ramp as f64, PHASE_RAMP)
                } else if tau < ramp + hold {
                    (1.0, PHASE_HOLD)
                } else {
                    (1.0 - (tau - ramp - hold + 1) as f64 / recover as f64, PHASE_RECOVER)
                };
                deviation[primary][m] += amplitude * shape;
                for (name, gain) in &event.coupled {
                    if let Some(j) = sig_index(name) {
                        deviation[j][m] += gain * amplitude * shape;
                    }
                }
                phase[m] = ph;
                if event.task == Task::Phenylephrine && tau == ramp {
                    phenyl[m] = true;
                }
            }
            t += total;
        }
        latent.push(LatentTrack {
            task: event.task,
            phase,
        });
    }

    let signals = config
        .signal_specs
        .iter()
        .enumerate()
        .map(|(s, spec)| {
            (0..len)
                .map(|m| {
                    if base.missing[s][m] {
                        f64::NAN
                    } else {
                        let noise = base.measurement[s].get(m).copied().unwrap_or(0.0);
                        (base.series[s][m] + deviation[s][m] + noise).clamp(spec.bounds[0], spec.bounds[1])
                    }
                })
                .collect()
        })
        .collect();
    Procedure {
        id: format!("{}-{:06}", config.cohort_id, index),
        statics: base.statics.clone(),
        signals,
        phenylephrine: phenyl,
        latent,
    }
}

/// Labeled base rate of every configured event task.
fn measure_rates(cohort: &RawCohort, events: &[EventSpec]) -> Result<Vec<f64>> {
    events
        .iter()
        .map(|e| {
            let labels = label_points(cohort, &LabelSpec::for_task(e.task))?;
            Ok(labels.base_rate().unwrap_or(0.0))
        })
        .collect()
}

/// Generates a cohort. A pure function of the configuration (seed included).
pub fn generate_cohort(config: &GeneratorConfig) -> Result<RawCohort> {
    config.validate()?;
    let bases: Vec<ProcedureBase> = (0..config.n_procedures)
        .into_par_iter()
        .map(|i| draw_base(config, i))
        .collect();
    let build = |onset: &[f64]| RawCohort {
        cohort_id: config.cohort_id.clone(),
        signal_names: config.signal_specs.iter().map(|s| s.name.clone()).collect(),
        procedures: bases
            .par_iter()
            .enumerate()
            .map(|(i, b)| realize(config, i, b, onset))
            .collect(),
    };

    // Each positive-producing episode yields about one horizon of positives
    // and blocks onsets for its duration, so start from target / horizon.
    let mut onset: Vec<f64> = config
        .events
        .iter()
        .map(|e| (e.event_rate_target / 5.0).min(0.2))
        .collect();
    let mut cohort = build(&onset);
    for _ in 0..config.calibration_rounds {
        let rates = measure_rates(&cohort, &config.events)?;
        let mut converged = true;
        for (k, e) in config.events.iter().enumerate() {
            let target = e.event_rate_target;
            if (rates[k] - target).abs() > 0.02 * target {
                converged = false;
            }
            let ratio = if rates[k] > 0.0 { target / rates[k] } else { 4.0 };
            onset[k] = (onset[k] * ratio.clamp(0.25, 4.0)).min(0.5);
        }
        if converged {
            break;
        }
        cohort = build(&onset);
    }
    log::debug!("cohort {} calibrated onset rates {:?}", config.cohort_id, onset);
    Ok(cohort)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            valid: 0.15,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortSplit {
    pub train: RawCohort,
    pub valid: RawCohort,
    pub test: RawCohort,
}

/// Splits a cohort at procedure granularity after a seeded shuffle.
pub fn split_cohort(cohort: &RawCohort, fractions: SplitFractions, seed: u64) -> Result<CohortSplit> {
    let SplitFractions { train, valid, test } = fractions;
    if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(PhaseError::config("fractions", "each fraction must lie in [0, 1]"));
    }
    if (train + valid + test - 1.0).abs() > 1e-9 {
        return Err(PhaseError::config(
            "fractions",
            format!("must sum to 1, got {}", train + valid + test),
        ));
    }
    let n = cohort.procedures.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, "split", 0);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_train = (train * n as f64).round() as usize;
    let n_valid = ((valid * n as f64).round() as usize).min(n - n_train);
    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        RawCohort {
            cohort_id: cohort.cohort_id.clone(),
            signal_names: cohort.signal_names.clone(),
            procedures: idx.iter().map(|&i| cohort.procedures[i].clone()).collect(),
        }
    };
    Ok(CohortSplit {
        train: take(&order[..n_train]),
        valid: take(&order[n_train..n_train + n_valid]),
        test: take(&order[n_train + n_valid..]),
    })
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes `static.csv`, `signals/<procedure_id>.csv` and `config.json` under `dir`.
pub fn write_cohort(cohort: &RawCohort, config: Option<&GeneratorConfig>, dir: &Path) -> Result<()> {
    let sig_dir = dir.join("signals");
    fs::create_dir_all(&sig_dir).map_err(|e| PhaseError::io(&sig_dir, e))?;
    let mut w = csv::Writer::from_path(dir.join("static.csv"))?;
    let mut header = vec!["procedure_id".to_string(), "minutes".to_string()];
    header.extend(STATIC_FEATURES.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for p in &cohort.procedures {
        let mut row = vec![p.id.clone(), p.len().to_string()];
        row.extend(p.statics.iter().map(|v| fmt_value(*v)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| PhaseError::io(dir.join("static.csv"), e))?;

    for p in &cohort.procedures {
        let path = sig_dir.join(format!("{}.csv", p.id));
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["minute".to_string()];
        header.extend(cohort.signal_names.iter().cloned());
        header.push(PHENYLEPHRINE_COLUMN.to_string());
        w.write_record(&header)?;
        for m in 0..p.len() {
            let mut row = vec![m.to_string()];
            row.extend(p.signals.iter().map(|s| fmt_value(s[m])));
            row.push(if p.phenylephrine[m] { "1" } else { "0" }.to_string());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| PhaseError::io(&path, e))?;
    }

    let meta = serde_json::json!({
        "cohort_id": cohort.cohort_id,
        "signals": cohort.signal_names,
        "generator": config,
    });
    let path = dir.join("config.json");
    let mut f = fs::File::create(&path).map_err(|e| PhaseError::io(&path, e))?;
    f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())
        .map_err(|e| PhaseError::io(&path, e))?;
    Ok(())
}

fn parse_cell(cell: &str, path: &Path) -> Result<f64> {
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>()
        .map_err(|_| PhaseError::data(format!("{}: unparsable value `{cell}`", path.display())))
}

/// Reads a cohort directory written by [`write_cohort`].
pub fn read_cohort(dir: &Path) -> Result<RawCohort> {
    let cfg_path = dir.join("config.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| PhaseError::io(&cfg_path, e))?;
    let meta: serde_json::Value = serde_json::from_str(&text)?;
    let cohort_id = meta["cohort_id"]
        .as_str()
        .ok_or_else(|| PhaseError::data("config.json lacks cohort_id"))?
        .to_string();
    let signal_names: Vec<String> = serde_json::from_value(meta["signals"].clone())?;

    let static_path = dir.join("static.csv");
    let mut r = csv::Reader::from_path(&static_path)?;
    let mut procedures = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 + STATIC_FEATURES.len() {
            return Err(PhaseError::data(format!("{}: malformed row", static_path.display())));
        }
        let id = rec[0].to_string();
        let statics = (2..rec.len())
            .map(|i| parse_cell(&rec[i], &static_path))
            .collect::<Result<Vec<_>>>()?;
        let path = dir.join("signals").join(format!("{id}.csv"));
        let mut sr = csv::Reader::from_path(&path)?;
        let headers = sr.headers()?.clone();
        let expected = signal_names.len() + 2;
        if headers.len() != expected || headers.get(expected - 1) != Some(PHENYLEPHRINE_COLUMN) {
            return Err(PhaseError::data(format!("{}: unexpected header", path.display())));
        }
        for (k, name) in signal_names.iter().enumerate() {
            if headers.get(k + 1) != Some(name.as_str()) {
                return Err(PhaseError::data(format!(
                    "{}: column {} should be {name}",
                    path.display(),
                    k + 1
                )));
            }
        }
        let mut signals = vec![Vec::new(); signal_names.len()];
        let mut phenyl = Vec::new();
        for row in sr.records() {
            let row = row?;
            for (k, s) in signals.iter_mut().enumerate() {
                s.push(parse_cell(&row[k + 1], &path)?);
            }
            phenyl.push(&row[expected - 1] == "1");
        }
        procedures.push(Procedure {
            id,
            statics,
            signals,
            phenylephrine: phenyl,
            latent: Vec::new(),
        });
    }
    Ok(RawCohort {
        cohort_id,
        signal_names,
        procedures,
    })
}

/// SHA-256 over every bit of a cohort (ids, statics, series, administrations).
pub fn cohort_digest(cohort: &RawCohort) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(cohort.cohort_id.as_bytes());
    for name in &cohort.signal_names {
        h.update(name.as_bytes());
        h.update([0]);
    }
    for p in &cohort.procedures {
        h.update(p.id.as_bytes());
        h.update((p.len() as u64).to_le_bytes());
        for v in p.statics.iter().chain(p.signals.iter().flatten()) {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update(p.phenylephrine.iter().map(|&a| u8::from(a)).collect::<Vec<_>>());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable hash of a configuration, used for experiment manifests.
pub fn config_fingerprint(config: &GeneratorConfig) -> u64 {
    let text = serde_json::to_string(config).unwrap_or_default();
    derive_seed(config.seed, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> GeneratorConfig {
        GeneratorConfig::preset(CohortPreset::Or1, 60, seed)
    }

    #[test]
    fn rejects_invalid_fields_by_name() {
        let mut c = small(1);
        c.signal_specs[0].missing_rate = 1.0;
        let err = generate_cohort(&c).unwrap_err().to_string();
        assert!(err.contains("signal_specs[SAO2].missing_rate"), "{err}");

        let mut c = small(1);
        c.events[0].event_rate_target = 0.6;
        let err = generate_cohort(&c).unwrap_err().to_string();
        assert!(err.contains("event_rate_target"), "{err}");

        let mut c = small(1);
        c.signal_specs[1].ar = [1.2, 0.1];
        let err = generate_cohort(&c).unwrap_err().to_string();
        assert!(err.contains("signal_specs[ETCO2].ar"), "{err}");

        let mut c = small(1);
        c.signal_specs[2].bounds = [5.0, 5.0];
        assert!(generate_cohort(&c).is_err());
    }

    #[test]
    fn ar2_stability_region() {
        assert!(ar2_is_stable(0.6, 0.25));
        assert!(!ar2_is_stable(0.8, 0.25));
        assert!(!ar2_is_stable(0.0, -1.0));
        assert!(ar2_is_stable(-0.5, 0.3));
    }

    #[test]
    fn values_stay_in_bounds_and_lengths_align() {
        let c = small(3);
        let cohort = generate_cohort(&c).unwrap();
        assert_eq!(cohort.procedures.len(), 60);
        for p in &cohort.procedures {
            let [lo, hi] = c.procedure_len_minutes;
            assert!((lo..=hi).contains(&p.len()));
            for (s, series) in p.signals.iter().enumerate() {
                assert_eq!(series.len(), p.len());
                let [min, max] = c.signal_specs[s].bounds;
                assert!(series.iter().filter(|v| !v.is_nan()).all(|v| (min..=max).contains(v)));
            }
            assert_eq!(p.statics.len(), STATIC_FEATURES.len());
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let mut c = small(5);
        c.n_procedures = 100;
        c.calibration_rounds = 0;
        let cohort = generate_cohort(&c).unwrap();
        let s = split_cohort(&cohort, SplitFractions::default(), 11).unwrap();
        assert_eq!(
            (s.train.procedures.len(), s.valid.procedures.len(), s.test.procedures.len()),
            (70, 15, 15)
        );
        let again = split_cohort(&cohort, SplitFractions::default(), 11).unwrap();
        assert_eq!(cohort_digest(&s.train), cohort_digest(&again.train));
        assert_eq!(cohort_digest(&s.test), cohort_digest(&again.test));
        let bad = SplitFractions { train: 0.7, valid: 0.2, test: 0.2 };
        assert!(split_cohort(&cohort, bad, 11).is_err());
    }
}
