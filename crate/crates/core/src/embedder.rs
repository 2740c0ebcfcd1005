//! Per-signal upstream models: source-task targets, training, the hidden-state
//! embedding, a checksummed model file format, and fine-tuning.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataprep::{ColumnSource, Direction, FeatureStats, LabelSpec, LabeledPoint, Task, N_TIME};
use crate::error::{PhaseError, Result};
use crate::neuralnet::{
    train, Activation, Network, NetworkSpec, SeqDataset, TrainConfig, TrainHistory, DEFAULT_HIDDEN,
};
use crate::rng::substream;
use crate::synthgen::{RawCohort, PHENYLEPHRINE_COLUMN, STATIC_FEATURES};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PHASEEMB";
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_XZ);

/// What an upstream model learns to predict from a 60-minute window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SourceTask {
    /// Untrained, randomly initialized network.
    Rand,
    /// Reconstruct the input window.
    Auto,
    /// The next `horizon` minutes.
    Next,
    /// Minimum of the next `horizon` minutes.
    Min,
    /// Whether the downstream event happens within the horizon.
    Hypo {
        task: Task,
        signal: String,
        threshold: f64,
        direction: Direction,
    },
}

impl SourceTask {
    pub fn hypo(task: Task) -> Self {
        let spec = LabelSpec::for_task(task);
        SourceTask::Hypo {
            task,
            signal: spec.signal,
            threshold: spec.threshold,
            direction: spec.direction,
        }
    }

    /// Parses `rand|auto|next|min|hypo`; a bare `hypo` targets `downstream`.
    pub fn parse(name: &str, downstream: Task) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "rand" => Ok(SourceTask::Rand),
            "auto" => Ok(SourceTask::Auto),
            "next" => Ok(SourceTask::Next),
            "min" => Ok(SourceTask::Min),
            "hypo" => Ok(SourceTask::hypo(downstream)),
            other => match other.strip_prefix("hypo_") {
                Some(task) => Ok(SourceTask::hypo(task.parse()?)),
                None => Err(PhaseError::config("source task", format!("unknown source task `{name}`"))),
            },
        }
    }

    /// Short name, also used as the model file stem.
    pub fn name(&self) -> String {
        match self {
            SourceTask::Rand => "rand".into(),
            SourceTask::Auto => "auto".into(),
            SourceTask::Next => "next".into(),
            SourceTask::Min => "min".into(),
            SourceTask::Hypo { task, .. } => format!("hypo_{task}"),
        }
    }

    /// Width of the network output.
    pub fn output_dim(&self, horizon: usize) -> usize {
        match self {
            SourceTask::Rand | SourceTask::Next => horizon,
            SourceTask::Auto => N_TIME,
            SourceTask::Min | SourceTask::Hypo { .. } => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, SourceTask::Hypo { .. })
    }
}

impl fmt::Display for SourceTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Regression(Vec<f64>),
    Binary(bool),
}

impl Target {
    fn values(&self) -> Vec<f64> {
        match self {
            Target::Regression(v) => v.clone(),
            Target::Binary(b) => vec![f64::from(u8::from(*b))],
        }
    }
}

/// Target of `task` for the window ending at minute `t`.
///
/// `series` is the standardized, imputed series of the model's signal.
/// `label_series` holds the raw values the `Hypo` threshold applies to.
/// Returns `None` when the window or horizon does not fit, or when the raw
/// horizon has no observation.
pub fn make_target(task: &SourceTask, series: &[f64], label_series: Option<&[f64]>, t: usize, horizon: usize) -> Result<Option<Target>> {
    if t + 1 < N_TIME || t + horizon >= series.len() {
        return Ok(None);
    }
    let future = &series[t + 1..=t + horizon];
    Ok(Some(match task {
        SourceTask::Rand => return Err(PhaseError::data("the rand embedder has no training target")),
        SourceTask::Auto => Target::Regression(series[t + 1 - N_TIME..=t].to_vec()),
        SourceTask::Next => Target::Regression(future.to_vec()),
        SourceTask::Min => Target::Regression(vec![future.iter().cloned().fold(f64::INFINITY, f64::min)]),
        SourceTask::Hypo {
            task,
            threshold,
            direction,
            ..
        } => {
            let raw = label_series.ok_or_else(|| PhaseError::data("hypo target needs the raw label series"))?;
            if raw.len() != series.len() {
                return Err(PhaseError::shape("label series", series.len(), raw.len()));
            }
            let observed = raw[t + 1..=t + horizon].iter().copied().filter(|v| !v.is_nan());
            let worst = match direction {
                Direction::Below => observed.reduce(f64::min),
                Direction::Above => observed.reduce(f64::max),
            };
            let Some(worst) = worst else { return Ok(None) };
            // Hypoxemia counts strict crossings; the other tasks count touching the threshold.
            let strict = *task == Task::Hypoxemia;
            Target::Binary(match (direction, strict) {
                (Direction::Below, true) => worst < *threshold,
                (Direction::Below, false) => worst <= *threshold,
                (Direction::Above, true) => worst > *threshold,
                (Direction::Above, false) => worst >= *threshold,
            })
        }
    }))
}

/// Which windows of a cohort become training examples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSampling {
    /// Keep windows whose end minute is a multiple of `stride`.
    pub stride: usize,
    /// Random subset of at most this many windows.
    pub max_windows: Option<usize>,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for WindowSampling {
    fn default() -> Self {
        WindowSampling {
            stride: 1,
            max_windows: None,
            horizon: crate::dataprep::HORIZON,
            seed: 0,
        }
    }
}

/// Standardizes with `stats` and imputes missing minutes by the mean.
pub fn standardize_series(stats: &FeatureStats, raw: &[f64]) -> Vec<f64> {
    raw.iter()
        .map(|&x| if x.is_nan() { 0.0 } else { stats.standardize(x) })
        .collect()
}

fn label_series(cohort: &RawCohort, task: &SourceTask) -> Result<Option<Vec<Vec<f64>>>> {
    let SourceTask::Hypo { signal, .. } = task else {
        return Ok(None);
    };
    if signal == PHENYLEPHRINE_COLUMN {
        return Ok(Some(
            cohort
                .procedures
                .iter()
                .map(|p| p.phenylephrine.iter().map(|&a| f64::from(u8::from(a))).collect())
                .collect(),
        ));
    }
    let s = cohort
        .signal_index(signal)
        .ok_or_else(|| PhaseError::data(format!("label signal {signal} absent from cohort {}", cohort.cohort_id)))?;
    Ok(Some(cohort.procedures.iter().map(|p| p.signals[s].clone()).collect()))
}

/// Training examples of one signal's source task.
#[derive(Debug, Clone)]
pub struct SourceData {
    pub cohort_id: String,
    pub signal: String,
    pub stats: FeatureStats,
    pub data: SeqDataset,
}

/// Builds `[n, 60, 1]` windows and targets of `task` from `cohort`, standardized
/// with `stats`.
pub fn source_dataset(cohort: &RawCohort, signal: &str, stats: &FeatureStats, task: &SourceTask, sampling: &WindowSampling) -> Result<SourceData> {
    if sampling.stride == 0 || sampling.horizon == 0 {
        return Err(PhaseError::config("sampling", "stride and horizon must be at least 1"));
    }
    let s = cohort
        .signal_index(signal)
        .ok_or_else(|| PhaseError::data(format!("signal {signal} absent from cohort {}", cohort.cohort_id)))?;
    let labels = label_series(cohort, task)?;
    let series: Vec<Vec<f64>> = cohort.procedures.iter().map(|p| standardize_series(stats, &p.signals[s])).collect();

    let mut examples: Vec<(usize, usize, Target)> = Vec::new();
    for (pi, xs) in series.iter().enumerate() {
        let label = labels.as_ref().map(|l| l[pi].as_slice());
        for t in (N_TIME - 1)..xs.len() {
            if t % sampling.stride != 0 {
                continue;
            }
            if let Some(target) = make_target(task, xs, label, t, sampling.horizon)? {
                examples.push((pi, t, target));
            }
        }
    }
    if let Some(max) = sampling.max_windows {
        if examples.len() > max {
            let mut rng = substream(sampling.seed, "windows", 0);
            let mut keep = rand::seq::index::sample(&mut rng, examples.len(), max).into_vec();
            keep.sort_unstable();
            let mut it = keep.into_iter().peekable();
            examples = examples
                .into_iter()
                .enumerate()
                .filter_map(|(i, e)| (it.next_if_eq(&i).is_some()).then_some(e))
                .collect();
        }
    }
    if examples.is_empty() {
        return Err(PhaseError::data(format!("no {task} training windows for {signal} in {}", cohort.cohort_id)));
    }
    let out = task.output_dim(sampling.horizon);
    let mut inputs = Array3::zeros((examples.len(), N_TIME, 1));
    let mut targets = Array2::zeros((examples.len(), out));
    for (row, (pi, t, target)) in examples.iter().enumerate() {
        let window = &series[*pi][t + 1 - N_TIME..=*t];
        for (k, &v) in window.iter().enumerate() {
            inputs[[row, k, 0]] = v;
        }
        for (k, v) in target.values().into_iter().enumerate() {
            targets[[row, k]] = v;
        }
    }
    Ok(SourceData {
        cohort_id: cohort.cohort_id.clone(),
        signal: signal.to_string(),
        stats: stats.clone(),
        data: SeqDataset::new(inputs, targets)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub recurrent_dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub horizon: usize,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            hidden: vec![DEFAULT_HIDDEN, DEFAULT_HIDDEN],
            dropout: 0.5,
            recurrent_dropout: 0.5,
            epochs: 200,
            batch_size: 256,
            learning_rate: 1e-3,
            horizon: crate::dataprep::HORIZON,
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn network_spec(&self, task: &SourceTask) -> NetworkSpec {
        let act = if task.is_classification() { Activation::Sigmoid } else { Activation::Linear };
        NetworkSpec::lstm_stack(N_TIME, &self.hidden, task.output_dim(self.horizon), act, self.dropout, self.recurrent_dropout)
    }

    /// MSE with Adam for regression targets; BCE with RMSProp and balanced
    /// batches for `Hypo`.
    pub fn train_config(&self, task: &SourceTask) -> TrainConfig {
        let base = if task.is_classification() {
            TrainConfig::classification(self.epochs, self.seed)
        } else {
            TrainConfig::regression(self.epochs, self.seed)
        };
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            ..base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedderModel {
    pub signal: String,
    pub task: SourceTask,
    pub source_cohort: String,
    /// Cohort the model was last fine-tuned on, if any.
    pub target_cohort: Option<String>,
    /// Statistics that standardize this model's input windows.
    pub stats: FeatureStats,
    pub network: Network,
    pub seed: u64,
    pub selected_epoch: Option<usize>,
    pub format_version: u32,
}

impl EmbedderModel {
    pub fn hidden_width(&self) -> usize {
        self.network.spec().penultimate_dim()
    }

    /// Canonical cache path `<root>/<cohort>/<signal>/<task>.phase`.
    pub fn cache_path(root: &Path, cohort: &str, signal: &str, task: &SourceTask) -> PathBuf {
        root.join(cohort).join(signal).join(format!("{}.phase", task.name()))
    }
}

pub fn train_embedder(task: &SourceTask, train_data: &SourceData, valid: &SourceData, config: &EmbedderConfig) -> Result<(EmbedderModel, TrainHistory)> {
    if *task == SourceTask::Rand {
        return Err(PhaseError::config("source task", "rand embedders are not trained; use make_random_embedder"));
    }
    if train_data.signal != valid.signal {
        return Err(PhaseError::data(format!(
            "training data is for {} but validation data is for {}",
            train_data.signal, valid.signal
        )));
    }
    let init = Network::init(config.network_spec(task), config.seed)?;
    let (network, history) = train(&init, &config.train_config(task), &train_data.data, &valid.data)?;
    let model = EmbedderModel {
        signal: train_data.signal.clone(),
        task: task.clone(),
        source_cohort: train_data.cohort_id.clone(),
        target_cohort: None,
        stats: train_data.stats.clone(),
        network,
        seed: config.seed,
        selected_epoch: Some(history.selected_epoch),
        format_version: FORMAT_VERSION,
    };
    Ok((model, history))
}

/// Initialized, untrained model.
pub fn make_random_embedder(signal: &str, source_cohort: &str, stats: &FeatureStats, spec: NetworkSpec, seed: u64) -> Result<EmbedderModel> {
    Ok(EmbedderModel {
        signal: signal.to_string(),
        task: SourceTask::Rand,
        source_cohort: source_cohort.to_string(),
        target_cohort: None,
        stats: stats.clone(),
        network: Network::init(spec, seed)?,
        seed,
        selected_epoch: None,
        format_version: FORMAT_VERSION,
    })
}

/// Continues training all layers on target-cohort data with the same source task.
pub fn fine_tune(model: &EmbedderModel, train_data: &SourceData, valid: &SourceData, config: &EmbedderConfig) -> Result<(EmbedderModel, TrainHistory)> {
    for data in [train_data, valid] {
        if data.signal != model.signal {
            return Err(PhaseError::data(format!(
                "cannot fine-tune the {} embedder on {} data",
                model.signal, data.signal
            )));
        }
    }
    if model.task == SourceTask::Rand {
        return Err(PhaseError::config("source task", "rand embedders have no objective to fine-tune"));
    }
    if config.epochs == 0 {
        let history = TrainHistory {
            train_loss: vec![],
            valid_loss: vec![],
            selected_epoch: 0,
        };
        return Ok((model.clone(), history));
    }
    let (network, history) = train(&model.network, &config.train_config(&model.task), &train_data.data, &valid.data)?;
    let tuned = EmbedderModel {
        target_cohort: Some(train_data.cohort_id.clone()),
        stats: train_data.stats.clone(),
        network,
        seed: config.seed,
        selected_epoch: Some(history.selected_epoch),
        ..model.clone()
    };
    Ok((tuned, history))
}

/// Hidden representation of a standardized window.
pub fn embed(model: &EmbedderModel, window: &crate::dataprep::SignalWindow) -> Result<Vec<f64>> {
    if window.signal_name != model.signal {
        return Err(PhaseError::data(format!(
            "window of {} passed to the {} embedder",
            window.signal_name, model.signal
        )));
    }
    if window.values.len() != N_TIME {
        return Err(PhaseError::shape("embedding window", N_TIME, window.values.len()));
    }
    let x = Array3::from_shape_vec((1, N_TIME, 1), window.values.clone()).expect("length checked");
    Ok(model.network.penultimate(x.view())?.row(0).to_vec())
}

/// Whether static columns are standardized (for neural consumers) or left raw
/// with missing values intact (for trees).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StaticScale {
    Standardized,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub values: Array2<f64>,
    pub provenance: Vec<ColumnSource>,
    pub names: Vec<String>,
}

/// Appends the static columns of `points` to `columns`.
pub(crate) fn static_columns(cohort: &RawCohort, points: &[LabeledPoint], static_stats: &[FeatureStats], scale: StaticScale) -> Result<Array2<f64>> {
    if scale == StaticScale::Standardized && static_stats.len() != STATIC_FEATURES.len() {
        return Err(PhaseError::shape("static statistics", STATIC_FEATURES.len(), static_stats.len()));
    }
    let mut out = Array2::zeros((points.len(), STATIC_FEATURES.len()));
    for (row, p) in points.iter().enumerate() {
        let statics = &cohort.procedures[p.procedure].statics;
        for k in 0..STATIC_FEATURES.len() {
            out[[row, k]] = match scale {
                StaticScale::Raw => statics[k],
                StaticScale::Standardized if statics[k].is_nan() => 0.0,
                StaticScale::Standardized => static_stats[k].standardize(statics[k]),
            };
        }
    }
    Ok(out)
}

/// Embeds every point of every signal with its own model and appends statics.
///
/// Each signal's raw window is standardized with the model's own statistics,
/// so models from another cohort apply unchanged.
pub fn assemble_features(models: &[EmbedderModel], cohort: &RawCohort, points: &[LabeledPoint], static_stats: &[FeatureStats], scale: StaticScale) -> Result<EmbeddingMatrix> {
    let mut ordered = Vec::with_capacity(cohort.signal_names.len());
    let mut absent = Vec::new();
    for name in &cohort.signal_names {
        let found: Vec<&EmbedderModel> = models.iter().filter(|m| &m.signal == name).collect();
        match found.len() {
            0 => absent.push(name.clone()),
            1 => ordered.push(found[0]),
            n => return Err(PhaseError::data(format!("{n} embedders given for signal {name}"))),
        }
    }
    if !absent.is_empty() {
        return Err(PhaseError::data(format!("no embedder for signals: {}", absent.join(", "))));
    }
    if let Some(extra) = models.iter().find(|m| cohort.signal_index(&m.signal).is_none()) {
        return Err(PhaseError::data(format!(
            "embedder for {} has no matching signal in cohort {}",
            extra.signal, cohort.cohort_id
        )));
    }
    for p in points {
        let len = cohort.procedures.get(p.procedure).map_or(0, |proc| proc.len());
        if p.t + 1 < N_TIME || p.t >= len {
            return Err(PhaseError::data(format!("point (procedure {}, minute {}) has no full window", p.procedure, p.t)));
        }
    }

    let blocks = ordered
        .par_iter()
        .enumerate()
        .map(|(s, model)| {
            let mut x = Array3::zeros((points.len(), N_TIME, 1));
            for (row, p) in points.iter().enumerate() {
                let raw = &cohort.procedures[p.procedure].signals[s][p.t + 1 - N_TIME..=p.t];
                for (k, &v) in raw.iter().enumerate() {
                    x[[row, k, 0]] = if v.is_nan() { 0.0 } else { model.stats.standardize(v) };
                }
            }
            model.network.penultimate(x.view())
        })
        .collect::<Result<Vec<_>>>()?;

    let statics = static_columns(cohort, points, static_stats, scale)?;
    let width: usize = blocks.iter().map(|b| b.ncols()).sum::<usize>() + statics.ncols();
    let mut values = Array2::zeros((points.len(), width));
    let mut provenance = Vec::with_capacity(width);
    let mut names = Vec::with_capacity(width);
    let mut col = 0;
    for (model, block) in ordered.iter().zip(&blocks) {
        values.slice_mut(s![.., col..col + block.ncols()]).assign(block);
        for k in 0..block.ncols() {
            provenance.push(ColumnSource::Signal(model.signal.clone()));
            names.push(format!("{}_h{k}", model.signal));
        }
        col += block.ncols();
    }
    values.slice_mut(s![.., col..]).assign(&statics);
    for name in STATIC_FEATURES {
        provenance.push(ColumnSource::Static(name.to_string()));
        names.push(name.to_string());
    }
    Ok(EmbeddingMatrix {
        values,
        provenance,
        names,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    signal: String,
    task: SourceTask,
    source_cohort: String,
    target_cohort: Option<String>,
    stats: FeatureStats,
    spec: NetworkSpec,
    n_params: usize,
    seed: u64,
    selected_epoch: Option<usize>,
}

pub fn model_bytes(model: &EmbedderModel) -> Result<Vec<u8>> {
    let header = Header {
        format_version: FORMAT_VERSION,
        signal: model.signal.clone(),
        task: model.task.clone(),
        source_cohort: model.source_cohort.clone(),
        target_cohort: model.target_cohort.clone(),
        stats: model.stats.clone(),
        spec: model.network.spec().clone(),
        n_params: model.network.params().len(),
        seed: model.seed,
        selected_epoch: model.selected_epoch,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(28 + json.len() + 8 * header.n_params);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for p in model.network.params() {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let crc = CRC64.checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<EmbedderModel> {
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
        return Err(PhaseError::Format(format!("file of {} bytes is too short", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let computed = CRC64.checksum(body);
    if stored != computed {
        return Err(PhaseError::Checksum { stored, computed });
    }
    if &body[..8] != MAGIC {
        return Err(PhaseError::Format("not an embedder model file".into()));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PhaseError::Format(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let rest = &body[20..];
    if header_len > rest.len() {
        return Err(PhaseError::Format("header overruns the file".into()));
    }
    let header: Header = serde_json::from_slice(&rest[..header_len])?;
    let raw = &rest[header_len..];
    if raw.len() != 8 * header.n_params {
        return Err(PhaseError::Format(format!(
            "expected {} parameter bytes, found {}",
            8 * header.n_params,
            raw.len()
        )));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(EmbedderModel {
        signal: header.signal,
        task: header.task,
        source_cohort: header.source_cohort,
        target_cohort: header.target_cohort,
        stats: header.stats,
        network: Network::from_params(header.spec, params)?,
        seed: header.seed,
        selected_epoch: header.selected_epoch,
        format_version: header.format_version,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PhaseError::io(dir, e))?;
    }
    let file_name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(
        ".{file_name}.{}.{}.tmp",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(PhaseError::io(path, e));
    }
    Ok(())
}

pub fn save_model(model: &EmbedderModel, path: &Path) -> Result<()> {
    write_atomic(path, &model_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<EmbedderModel> {
    let bytes = fs::read(path).map_err(|e| PhaseError::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        PhaseError::Io { .. } => e,
        other => PhaseError::Format(format!("{}: {other}", path.display())),
    })
}
