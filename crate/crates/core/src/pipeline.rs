//! Experiment orchestration: cohorts, representations, downstream models,
//! evaluation and run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataprep::{
    ema_features, fit_prep_stats, label_points, ColumnSource, FeatureStats, LabelSet, LabelSpec, LabeledPoint, PrepStats,
    Task, DEFAULT_EMA_DECAYS, N_TIME,
};
use crate::embedder::{
    self, assemble_features, fine_tune, load_model, make_random_embedder, save_model, source_dataset, train_embedder,
    EmbedderConfig, EmbedderModel, SourceData, SourceTask, StaticScale, WindowSampling,
};
pub use crate::embedder::EmbeddingMatrix as FeatureMatrix;
use crate::error::{PhaseError, Result, StageExt};
use crate::eval::{self, average_precision, MetricReport};
use crate::explain::{self, AttributionRow, BackgroundSet};
use crate::gbm::{self, Forest, GbmConfig};
use crate::neuralnet::{
    self, Activation, LayerSpec, Loss, Network, NetworkSpec, Optimizer, SeqDataset, TrainConfig, TrainHistory,
};
use crate::rng::derive_seed;
use crate::synthgen::{
    cohort_digest, generate_cohort, read_cohort, split_cohort, CohortPreset, CohortSplit, GeneratorConfig, RawCohort,
    SplitFractions, STATIC_FEATURES,
};

/// Environment variable naming the shared embedder cache.
pub const CACHE_ENV: &str = "PHASE_CACHE_DIR";

/// Where a cohort comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortSource {
    /// A directory written by `write_cohort`.
    Dir(PathBuf),
    Preset {
        preset: CohortPreset,
        n_procedures: usize,
        seed: u64,
    },
    Generate(GeneratorConfig),
}

impl CohortSource {
    pub fn load(&self) -> Result<RawCohort> {
        match self {
            CohortSource::Dir(dir) => read_cohort(dir),
            CohortSource::Preset {
                preset,
                n_procedures,
                seed,
            } => generate_cohort(&GeneratorConfig::preset(*preset, *n_procedures, *seed)),
            CohortSource::Generate(config) => generate_cohort(config),
        }
    }
}

/// How the embedders of a representation relate to the target cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transfer {
    /// Trained on the target cohort's own training split.
    Target,
    /// Trained on the source cohort and applied unchanged (`'`).
    Fixed,
    /// One signal from the ICU cohort, the rest from the source cohort (`^P`).
    Paired,
    /// Trained on the source cohort, then fine-tuned on the target (`^ft`).
    FineTuned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RepresentationSpec {
    Raw,
    Ema {
        decays: Vec<f64>,
    },
    Embedded {
        /// `rand`, `auto`, `next`, `min` or `hypo`.
        source_task: String,
        transfer: Transfer,
    },
}

impl RepresentationSpec {
    /// Parses labels such as `raw`, `ema`, `next`, `next'`, `hypo^P`, `min^ft`.
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "raw" => return Ok(RepresentationSpec::Raw),
            "ema" => {
                return Ok(RepresentationSpec::Ema {
                    decays: DEFAULT_EMA_DECAYS.to_vec(),
                })
            }
            _ => {}
        }
        let (task, transfer) = if let Some(t) = label.strip_suffix('\'') {
            (t, Transfer::Fixed)
        } else if let Some(t) = label.strip_suffix("^P") {
            (t, Transfer::Paired)
        } else if let Some(t) = label.strip_suffix("^ft") {
            (t, Transfer::FineTuned)
        } else {
            (label, Transfer::Target)
        };
        if !["rand", "auto", "next", "min", "hypo"].contains(&task) {
            return Err(PhaseError::config("representation", format!("unknown representation `{label}`")));
        }
        if task == "rand" && transfer != Transfer::Target {
            return Err(PhaseError::config("representation", "rand embedders are never trained, so never transferred"));
        }
        Ok(RepresentationSpec::Embedded {
            source_task: task.to_string(),
            transfer,
        })
    }

    pub fn label(&self) -> String {
        match self {
            RepresentationSpec::Raw => "raw".into(),
            RepresentationSpec::Ema { .. } => "ema".into(),
            RepresentationSpec::Embedded { source_task, transfer } => {
                let suffix = match transfer {
                    Transfer::Target => "",
                    Transfer::Fixed => "'",
                    Transfer::Paired => "^P",
                    Transfer::FineTuned => "^ft",
                };
                format!("{source_task}{suffix}")
            }
        }
    }

    /// Column count for `n_signals` signals and embedders of width `hidden`.
    pub fn feature_width(&self, n_signals: usize, hidden: usize) -> usize {
        let per_signal = match self {
            RepresentationSpec::Raw => N_TIME,
            RepresentationSpec::Ema { decays } => 2 * decays.len() + 1,
            RepresentationSpec::Embedded { .. } => hidden,
        };
        n_signals * per_signal + STATIC_FEATURES.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownstreamKind {
    Gbm,
    Mlp,
    /// End-to-end LSTM on the raw signals; ignores the representation.
    Lstm,
}

/// Downstream perceptron: two 100-unit ReLU layers with dropout, sigmoid output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![100, 100],
            dropout: 0.5,
            learning_rate: 1e-5,
            epochs: 200,
            batch_size: 32,
        }
    }
}

impl MlpConfig {
    pub fn network_spec(&self, input_dim: usize) -> NetworkSpec {
        let mut layers: Vec<LayerSpec> = self
            .hidden
            .iter()
            .map(|&units| LayerSpec::Dense {
                units,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            units: 1,
            activation: Activation::Sigmoid,
        });
        NetworkSpec {
            input_dim,
            seq_len: 1,
            layers,
            dropout_rate: self.dropout,
            recurrent_dropout_rate: 0.0,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: Optimizer::Adam,
            learning_rate: self.learning_rate,
            loss: Loss::Bce,
            epochs: self.epochs,
            batch_size: self.batch_size,
            balanced_upsampling: false,
            seed,
        }
    }
}

/// Hyperparameter grid of the end-to-end LSTM baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGrid {
    pub layers: Vec<usize>,
    pub units: Vec<usize>,
    pub optimizers: Vec<Optimizer>,
    pub learning_rates: Vec<f64>,
    pub dropouts: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for LstmGrid {
    fn default() -> Self {
        LstmGrid {
            layers: vec![1, 2, 3],
            units: vec![100, 200, 300],
            optimizers: vec![Optimizer::RmsProp, Optimizer::Sgd, Optimizer::Adam],
            learning_rates: vec![0.01, 0.001, 0.0001],
            dropouts: vec![0.0, 0.5],
            epochs: 200,
            batch_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCandidate {
    pub layers: usize,
    pub units: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub dropout: f64,
}

impl LstmGrid {
    pub fn candidates(&self) -> Vec<LstmCandidate> {
        let mut out = Vec::new();
        for &layers in &self.layers {
            for &units in &self.units {
                for &optimizer in &self.optimizers {
                    for &learning_rate in &self.learning_rates {
                        for &dropout in &self.dropouts {
                            out.push(LstmCandidate {
                                layers,
                                units,
                                optimizer,
                                learning_rate,
                                dropout,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Windows used to train embedders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSampling {
    pub stride: usize,
    pub max_train_windows: Option<usize>,
    pub max_valid_windows: Option<usize>,
}

impl Default for EmbedderSampling {
    fn default() -> Self {
        EmbedderSampling {
            stride: 1,
            max_train_windows: None,
            max_valid_windows: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_resamples: eval::DEFAULT_RESAMPLES,
            level: eval::DEFAULT_LEVEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    /// Test rows explained, taken from the front of the test set.
    pub max_rows: usize,
    pub background: usize,
    pub top_k: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            max_rows: 200,
            background: explain::DEFAULT_BACKGROUND,
            top_k: 20,
        }
    }
}

fn default_stride() -> usize {
    1
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub task: Task,
    pub target: CohortSource,
    /// Cohort the transferred embedders are trained on.
    #[serde(default)]
    pub source: Option<CohortSource>,
    /// Single-signal cohort used by the paired variant.
    #[serde(default)]
    pub icu: Option<CohortSource>,
    pub representation: RepresentationSpec,
    pub downstream: DownstreamKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Restricts every cohort to these signals, in this order.
    #[serde(default)]
    pub signals: Option<Vec<String>>,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default)]
    pub split_seed: u64,
    /// Keeps labeled minutes that are multiples of this stride.
    #[serde(default = "default_stride")]
    pub label_stride: usize,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub embedder_sampling: EmbedderSampling,
    /// Defaults to the task's standard settings.
    #[serde(default)]
    pub gbm: Option<GbmConfig>,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub lstm_grid: Option<LstmGrid>,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub explain: Option<ExplainConfig>,
    pub output_dir: PathBuf,
    /// Embedder cache; falls back to `PHASE_CACHE_DIR`, then `<output_dir>/cache`.
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(PhaseError::config("seeds", "at least one seed is required"));
        }
        if self.label_stride == 0 {
            return Err(PhaseError::config("label_stride", "must be at least 1"));
        }
        if let RepresentationSpec::Embedded { transfer, source_task } = &self.representation {
            SourceTask::parse(source_task, self.task)?;
            if *transfer != Transfer::Target && self.source.is_none() {
                return Err(PhaseError::config("source", "transfer variants need a source cohort"));
            }
            if *transfer == Transfer::Paired && self.icu.is_none() {
                return Err(PhaseError::config("icu", "the paired variant needs an ICU cohort"));
            }
        }
        if let RepresentationSpec::Ema { decays } = &self.representation {
            if decays.is_empty() || decays.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
                return Err(PhaseError::config("decays", "need at least one decay, each in (0, 1]"));
            }
        }
        Ok(())
    }

    /// Representation label as it appears in reports.
    pub fn report_label(&self) -> String {
        match self.downstream {
            DownstreamKind::Gbm => self.representation.label(),
            DownstreamKind::Mlp => format!("{}+mlp", self.representation.label()),
            DownstreamKind::Lstm => "lstm".into(),
        }
    }

    pub fn cache_root(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.output_dir.join("cache"))
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of everything in the plan except where its outputs go.
pub fn plan_hash(plan: &ExperimentPlan) -> String {
    let mut canonical = plan.clone();
    canonical.output_dir = PathBuf::new();
    canonical.cache_dir = None;
    let bytes = serde_json::to_vec(&canonical).expect("plans serialize");
    sha256_hex(&bytes)[..16].to_string()
}

/// A cohort with its split and training-split statistics.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub cohort_id: String,
    pub digest: String,
    pub split: CohortSplit,
    pub stats: PrepStats,
}

pub fn prepare_split(cohort: &RawCohort, signals: Option<&[String]>, fractions: SplitFractions, seed: u64) -> Result<PreparedSplit> {
    let cohort = match signals {
        Some(names) => {
            let present: Vec<String> = names.iter().filter(|n| cohort.signal_index(n).is_some()).cloned().collect();
            if present.is_empty() {
                return Err(PhaseError::data(format!("cohort {} has none of the requested signals", cohort.cohort_id)));
            }
            cohort.select_signals(&present)?
        }
        None => cohort.clone(),
    };
    let split = split_cohort(&cohort, fractions, seed)?;
    let stats = fit_prep_stats(&split.train)?;
    Ok(PreparedSplit {
        cohort_id: cohort.cohort_id.clone(),
        digest: cohort_digest(&cohort),
        split,
        stats,
    })
}

pub fn labels_for(cohort: &RawCohort, task: Task, stride: usize) -> Result<LabelSet> {
    Ok(label_points(cohort, &LabelSpec::for_task(task))?.thinned(stride))
}

/// Whether feature columns keep gaps and raw statics (trees) or are imputed
/// and standardized (neural models).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScale {
    Trees,
    Neural,
}

fn signal_stats<'a>(stats: &'a PrepStats, name: &str) -> Result<&'a FeatureStats> {
    stats
        .signal(name)
        .ok_or_else(|| PhaseError::data(format!("signal {name} has no fitted statistics")))
}

/// Feature matrix of `points` for a representation.
pub fn build_features(
    repr: &RepresentationSpec,
    models: Option<&[EmbedderModel]>,
    cohort: &RawCohort,
    points: &[LabeledPoint],
    stats: &PrepStats,
    scale: FeatureScale,
) -> Result<FeatureMatrix> {
    let static_scale = match scale {
        FeatureScale::Trees => StaticScale::Raw,
        FeatureScale::Neural => StaticScale::Standardized,
    };
    if let RepresentationSpec::Embedded { source_task, .. } = repr {
        let models = models.ok_or_else(|| PhaseError::data(format!("{source_task} features need embedder models")))?;
        return assemble_features(models, cohort, points, &stats.statics, static_scale);
    }
    for p in points {
        if p.t + 1 < N_TIME || cohort.procedures.get(p.procedure).is_none_or(|proc| p.t >= proc.len()) {
            return Err(PhaseError::data(format!("point (procedure {}, minute {}) has no full window", p.procedure, p.t)));
        }
    }
    let mut names = Vec::new();
    let mut provenance = Vec::new();
    let mut blocks = Vec::new();
    for (s, name) in cohort.signal_names.iter().enumerate() {
        let st = signal_stats(stats, name)?;
        let std_window = |p: &LabeledPoint| -> Vec<f64> {
            cohort.procedures[p.procedure].signals[s][p.t + 1 - N_TIME..=p.t]
                .iter()
                .map(|&x| match (x.is_nan(), scale) {
                    (true, FeatureScale::Trees) => f64::NAN,
                    (true, FeatureScale::Neural) => 0.0,
                    (false, _) => st.standardize(x),
                })
                .collect()
        };
        let block = match repr {
            RepresentationSpec::Raw => {
                names.extend((0..N_TIME).map(|k| format!("{name}_m{}", N_TIME - 1 - k)));
                let mut b = Array2::zeros((points.len(), N_TIME));
                for (row, p) in points.iter().enumerate() {
                    for (k, v) in std_window(p).into_iter().enumerate() {
                        b[[row, k]] = v;
                    }
                }
                b
            }
            RepresentationSpec::Ema { decays } => {
                for a in decays {
                    names.push(format!("{name}_ema{a}"));
                    names.push(format!("{name}_emv{a}"));
                }
                names.push(format!("{name}_last"));
                let width = 2 * decays.len() + 1;
                let mut b = Array2::zeros((points.len(), width));
                for (row, p) in points.iter().enumerate() {
                    let window: Vec<f64> = std_window(p).into_iter().map(|v| if v.is_nan() { 0.0 } else { v }).collect();
                    for (k, v) in ema_features(&window, decays)?.into_iter().enumerate() {
                        b[[row, k]] = v;
                    }
                }
                b
            }
            RepresentationSpec::Embedded { .. } => unreachable!("handled above"),
        };
        provenance.extend(std::iter::repeat_n(ColumnSource::Signal(name.clone()), block.ncols()));
        blocks.push(block);
    }
    blocks.push(embedder::static_columns(cohort, points, &stats.statics, static_scale)?);
    for name in STATIC_FEATURES {
        names.push(name.to_string());
        provenance.push(ColumnSource::Static(name.to_string()));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let values = ndarray::concatenate(Axis(1), &views).map_err(|e| PhaseError::data(e.to_string()))?;
    Ok(FeatureMatrix {
        values,
        provenance,
        names,
    })
}

/// Loads `<root>/<cohort>/<signal>/<task>.phase` for every signal.
pub fn load_embedders(root: &Path, cohort: &str, signals: &[String], task: &SourceTask) -> Result<Vec<EmbedderModel>> {
    signals
        .iter()
        .map(|signal| {
            let path = EmbedderModel::cache_path(root, cohort, signal, task);
            if !path.exists() {
                return Err(PhaseError::data(format!(
                    "missing embedder {cohort}/{signal}/{} (looked for {})",
                    task.name(),
                    path.display()
                )));
            }
            load_model(&path)
        })
        .collect()
}

/// Provenance of one embedder used by a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub signal: String,
    pub task: String,
    pub source_cohort: String,
    pub target_cohort: Option<String>,
    pub path: Option<PathBuf>,
    pub sha256: String,
    pub from_cache: bool,
}

fn record(model: &EmbedderModel, path: Option<&Path>, from_cache: bool) -> Result<ModelRecord> {
    let bytes = match path {
        Some(p) => fs::read(p).map_err(|e| PhaseError::io(p, e))?,
        None => embedder::model_bytes(model)?,
    };
    Ok(ModelRecord {
        signal: model.signal.clone(),
        task: model.task.name(),
        source_cohort: model.source_cohort.clone(),
        target_cohort: model.target_cohort.clone(),
        path: path.map(Path::to_path_buf),
        sha256: sha256_hex(&bytes),
        from_cache,
    })
}

fn sampling_for(sampling: &EmbedderSampling, config: &EmbedderConfig, max: Option<usize>, seed: u64) -> WindowSampling {
    WindowSampling {
        stride: sampling.stride,
        max_windows: max,
        horizon: config.horizon,
        seed,
    }
}

/// Training and validation data of one signal's source task.
pub fn embedder_data(split: &PreparedSplit, signal: &str, stats: &FeatureStats, task: &SourceTask, config: &EmbedderConfig, sampling: &EmbedderSampling) -> Result<(SourceData, SourceData)> {
    let seed = derive_seed(config.seed, &format!("windows/{signal}"));
    let train = source_dataset(&split.split.train, signal, stats, task, &sampling_for(sampling, config, sampling.max_train_windows, seed))?;
    let valid = source_dataset(
        &split.split.valid,
        signal,
        stats,
        task,
        &sampling_for(sampling, config, sampling.max_valid_windows, derive_seed(seed, "valid")),
    )?;
    Ok((train, valid))
}

/// Returns the embedder trained on `split` for `signal`, from the cache when
/// an identical training run is stored there.
pub fn trained_embedder(split: &PreparedSplit, signal: &str, task: &SourceTask, config: &EmbedderConfig, sampling: &EmbedderSampling, cache: &Path) -> Result<(EmbedderModel, ModelRecord)> {
    let key = serde_json::json!({
        "cohort": split.digest,
        "split": serde_json::to_value(split.split.train.procedures.iter().map(|p| &p.id).collect::<Vec<_>>())?,
        "signal": signal,
        "task": task,
        "config": config,
        "sampling": sampling,
    });
    let key = sha256_hex(&serde_json::to_vec(&key)?)[..16].to_string();
    let path = EmbedderModel::cache_path(&cache.join(key), &split.cohort_id, signal, task);
    if path.exists() {
        let model = load_model(&path)?;
        let rec = record(&model, Some(&path), true)?;
        return Ok((model, rec));
    }
    let stats = signal_stats(&split.stats, signal)?;
    let (train, valid) = embedder_data(split, signal, stats, task, config, sampling)?;
    let (model, _) = train_embedder(task, &train, &valid, config)?;
    save_model(&model, &path)?;
    let rec = record(&model, Some(&path), false)?;
    Ok((model, rec))
}

fn per_signal_config(config: &EmbedderConfig, seed: u64, signal: &str) -> EmbedderConfig {
    EmbedderConfig {
        seed: derive_seed(seed, &format!("embedder/{signal}")),
        ..config.clone()
    }
}

struct Cohorts {
    target: PreparedSplit,
    source: Option<PreparedSplit>,
    icu: Option<PreparedSplit>,
}

fn embedders_for_seed(plan: &ExperimentPlan, cohorts: &Cohorts, seed: u64) -> Result<(Vec<EmbedderModel>, Vec<ModelRecord>)> {
    let RepresentationSpec::Embedded { source_task, transfer } = &plan.representation else {
        return Ok((vec![], vec![]));
    };
    let task = SourceTask::parse(source_task, plan.task)?;
    let cache = plan.cache_root();
    let target = &cohorts.target;
    let signals = target.split.train.signal_names.clone();
    let icu_signals: Vec<String> = match (transfer, &cohorts.icu) {
        (Transfer::Paired, Some(icu)) => {
            let shared: Vec<String> = icu.split.train.signal_names.iter().filter(|s| signals.contains(s)).cloned().collect();
            if shared.len() != 1 {
                return Err(PhaseError::data(format!(
                    "the paired variant needs exactly one signal from the ICU cohort, found {shared:?}"
                )));
            }
            shared
        }
        _ => vec![],
    };

    let built = signals
        .par_iter()
        .map(|signal| -> Result<(EmbedderModel, ModelRecord)> {
            let config = per_signal_config(&plan.embedder, seed, signal);
            if task == SourceTask::Rand {
                let stats = signal_stats(&target.stats, signal)?;
                let model = make_random_embedder(signal, &target.cohort_id, stats, config.network_spec(&SourceTask::Next), config.seed)?;
                let rec = record(&model, None, false)?;
                return Ok((model, rec));
            }
            let origin = match transfer {
                Transfer::Target => target,
                Transfer::Paired if icu_signals.contains(signal) => cohorts.icu.as_ref().expect("validated"),
                _ => cohorts.source.as_ref().expect("validated"),
            };
            let (model, rec) = trained_embedder(origin, signal, &task, &config, &plan.embedder_sampling, &cache)?;
            if *transfer != Transfer::FineTuned {
                return Ok((model, rec));
            }
            let (train, valid) = embedder_data(target, signal, &model.stats, &task, &config, &plan.embedder_sampling)?;
            let (tuned, _) = fine_tune(&model, &train, &valid, &config)?;
            let rec = record(&tuned, None, false)?;
            Ok((tuned, rec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(built.into_iter().unzip())
}

/// Per-column standardization fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScaler {
    pub columns: Vec<FeatureStats>,
}

impl ColumnScaler {
    pub fn fit(x: ArrayView2<f64>, names: &[String]) -> Result<Self> {
        let columns = x
            .axis_iter(Axis(1))
            .zip(names)
            .map(|(col, name)| {
                FeatureStats::fit(name, col.iter().copied()).or_else(|_| {
                    Ok(FeatureStats {
                        name: name.clone(),
                        mean: 0.0,
                        std: 1.0,
                    })
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnScaler { columns })
    }

    /// Standardized copy with missing entries set to zero.
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.columns.len() {
            return Err(PhaseError::shape("scaled features", self.columns.len(), x.ncols()));
        }
        let mut out = x.to_owned();
        for (mut col, st) in out.axis_iter_mut(Axis(1)).zip(&self.columns) {
            col.mapv_inplace(|v| if v.is_nan() { 0.0 } else { st.standardize(v) });
        }
        Ok(out)
    }
}

fn as_sequences(x: ArrayView2<f64>, y: &[f64]) -> Result<SeqDataset> {
    let inputs = x.to_owned().insert_axis(Axis(1));
    let targets = Array2::from_shape_vec((y.len(), 1), y.to_vec()).expect("column");
    SeqDataset::new(inputs, targets)
}

/// Trains the downstream perceptron on standardized features.
pub fn train_downstream_mlp(train_x: ArrayView2<f64>, train_y: &[f64], valid_x: ArrayView2<f64>, valid_y: &[f64], config: &MlpConfig, seed: u64) -> Result<(Network, TrainHistory)> {
    let init = Network::init(config.network_spec(train_x.ncols()), seed)?;
    neuralnet::train(
        &init,
        &config.train_config(seed),
        &as_sequences(train_x, train_y)?,
        &as_sequences(valid_x, valid_y)?,
    )
}

pub fn mlp_scores(net: &Network, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    let out = net.predict(x.to_owned().insert_axis(Axis(1)).view())?;
    Ok(out.column(0).to_vec())
}

/// Imputed, standardized signals of every point as a `[n, 60, n_sig]` tensor.
pub fn signal_sequences(cohort: &RawCohort, points: &[LabeledPoint], stats: &PrepStats) -> Result<Array3<f64>> {
    let n_sig = cohort.signal_names.len();
    let all_stats = cohort
        .signal_names
        .iter()
        .map(|n| signal_stats(stats, n))
        .collect::<Result<Vec<_>>>()?;
    let mut x = Array3::zeros((points.len(), N_TIME, n_sig));
    for (row, p) in points.iter().enumerate() {
        let proc = &cohort.procedures[p.procedure];
        for (s, st) in all_stats.iter().enumerate() {
            for (k, &v) in proc.signals[s][p.t + 1 - N_TIME..=p.t].iter().enumerate() {
                x[[row, k, s]] = if v.is_nan() { 0.0 } else { st.standardize(v) };
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub candidate: LstmCandidate,
    pub valid_ap: f64,
}

/// Fits every grid candidate and keeps the one with the highest validation AP
/// (earliest on ties).
pub fn run_end_to_end_lstm(train: &SeqDataset, valid: &SeqDataset, grid: &LstmGrid, seed: u64) -> Result<(Network, Vec<GridOutcome>, usize)> {
    let candidates = grid.candidates();
    if candidates.is_empty() {
        return Err(PhaseError::config("lstm_grid", "the grid is empty"));
    }
    let valid_y: Vec<f64> = valid.targets.column(0).to_vec();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut outcomes = Vec::with_capacity(candidates.len());
    for (i, c) in candidates.iter().enumerate() {
        let hidden = vec![c.units; c.layers];
        let spec = NetworkSpec::lstm_stack(N_TIME, &hidden, 1, Activation::Sigmoid, c.dropout, c.dropout);
        let spec = NetworkSpec {
            input_dim: train.inputs.dim().2,
            ..spec
        };
        let run_seed = derive_seed(seed, &format!("grid/{i}"));
        let config = TrainConfig {
            optimizer: c.optimizer,
            learning_rate: c.learning_rate,
            epochs: grid.epochs,
            batch_size: grid.batch_size,
            ..TrainConfig::classification(grid.epochs, run_seed)
        };
        let (net, _) = neuralnet::train(&Network::init(spec, run_seed)?, &config, train, valid)?;
        let scores = net.predict(valid.inputs.view())?.column(0).to_vec();
        let ap = average_precision(&scores, &valid_y)?;
        log::info!("grid candidate {i} {c:?}: validation AP {ap:.4}");
        outcomes.push(GridOutcome {
            candidate: c.clone(),
            valid_ap: ap,
        });
        if best.as_ref().is_none_or(|(b, _, _)| ap > *b) {
            best = Some((ap, i, net));
        }
    }
    let (_, selected, net) = best.expect("nonempty grid");
    Ok((net, outcomes, selected))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRecord {
    pub role: String,
    pub cohort_id: String,
    pub digest: String,
    pub n_procedures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub embedders: Vec<ModelRecord>,
    pub report: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub plan_hash: String,
    pub crate_version: String,
    pub plan: ExperimentPlan,
    pub cohorts: Vec<CohortRecord>,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seeds: Vec<SeedRecord>,
}

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: MetricReport,
    pub models: Vec<EmbedderModel>,
    pub forest: Option<Forest>,
    pub explanations: Vec<AttributionRow>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub manifest: Manifest,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentOutcome {
    pub fn reports(&self) -> Vec<MetricReport> {
        self.seeds.iter().map(|s| s.report.clone()).collect()
    }

    pub fn mean_ap(&self) -> f64 {
        self.seeds.iter().map(|s| s.report.ap).sum::<f64>() / self.seeds.len() as f64
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    embedder::write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn load_cohort(source: &CohortSource, plan: &ExperimentPlan, role: &str) -> Result<PreparedSplit> {
    let cohort = source.load().stage(&format!("load {role} cohort"))?;
    prepare_split(&cohort, plan.signals.as_deref(), plan.split, plan.split_seed).stage(&format!("split {role} cohort"))
}

fn file_hashes(records: &[ModelRecord]) -> Result<Vec<(PathBuf, String)>> {
    records
        .iter()
        .filter_map(|r| r.path.as_ref())
        .map(|p| Ok((p.clone(), sha256_hex(&fs::read(p).map_err(|e| PhaseError::io(p, e))?))))
        .collect()
}

/// Runs a plan for every seed and writes `runs/<plan-hash>/`.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<ExperimentOutcome> {
    plan.validate()?;
    let hash = plan_hash(plan);
    let run_dir = plan.output_dir.join(&hash);
    fs::create_dir_all(&run_dir).map_err(|e| PhaseError::io(&run_dir, e))?;
    write_json(&run_dir.join("plan.json"), plan)?;

    let target = load_cohort(&plan.target, plan, "target")?;
    let transfer = match &plan.representation {
        RepresentationSpec::Embedded { transfer, .. } if plan.downstream != DownstreamKind::Lstm => Some(*transfer),
        _ => None,
    };
    let needs_source = matches!(transfer, Some(Transfer::Fixed | Transfer::Paired | Transfer::FineTuned));
    let source = match &plan.source {
        Some(s) if needs_source => Some(load_cohort(s, plan, "source")?),
        _ => None,
    };
    let icu = match &plan.icu {
        Some(s) if transfer == Some(Transfer::Paired) => Some(load_cohort(s, plan, "icu")?),
        _ => None,
    };
    let cohorts = Cohorts { target, source, icu };
    let target = &cohorts.target;

    let parts = [&target.split.train, &target.split.valid, &target.split.test];
    let [train_l, valid_l, test_l] = parts.map(|c| labels_for(c, plan.task, plan.label_stride));
    let (train_l, valid_l, test_l) = (train_l.stage("label train")?, valid_l.stage("label valid")?, test_l.stage("label test")?);
    let test_keys: Vec<(String, usize)> = test_l
        .points
        .iter()
        .map(|p| (target.split.test.procedures[p.procedure].id.clone(), p.t))
        .collect();
    let test_y = test_l.labels();
    let digest = eval::split_digest(&test_keys, &test_y);

    let mut cohort_records = vec![CohortRecord {
        role: "target".into(),
        cohort_id: target.cohort_id.clone(),
        digest: target.digest.clone(),
        n_procedures: parts.iter().map(|p| p.procedures.len()).sum(),
    }];
    for (role, c) in [("source", &cohorts.source), ("icu", &cohorts.icu)] {
        if let Some(c) = c {
            cohort_records.push(CohortRecord {
                role: role.into(),
                cohort_id: c.cohort_id.clone(),
                digest: c.digest.clone(),
                n_procedures: c.split.train.procedures.len() + c.split.valid.procedures.len() + c.split.test.procedures.len(),
            });
        }
    }

    let scale = match plan.downstream {
        DownstreamKind::Gbm => FeatureScale::Trees,
        DownstreamKind::Mlp | DownstreamKind::Lstm => FeatureScale::Neural,
    };
    let label = plan.report_label();
    let mut outcomes = Vec::new();
    let mut seed_records = Vec::new();
    for &seed in &plan.seeds {
        let seed_dir = run_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir).map_err(|e| PhaseError::io(&seed_dir, e))?;
        let derived: BTreeMap<String, u64> = ["downstream", "bootstrap", "explain"]
            .iter()
            .map(|k| (k.to_string(), derive_seed(seed, k)))
            .collect();

        let (models, records) = embedders_for_seed(plan, &cohorts, seed).stage("embedders")?;
        let fixed = matches!(
            plan.representation,
            RepresentationSpec::Embedded {
                transfer: Transfer::Fixed | Transfer::Paired,
                ..
            }
        );
        let before = if fixed { file_hashes(&records)? } else { vec![] };

        let mut forest = None;
        let mut explanations = Vec::new();
        let scores = match plan.downstream {
            DownstreamKind::Lstm => {
                let grid = plan.lstm_grid.clone().unwrap_or_default();
                let data = |c: &RawCohort, l: &LabelSet| -> Result<SeqDataset> {
                    let x = signal_sequences(c, &l.points, &target.stats)?;
                    let y = Array2::from_shape_vec((l.len(), 1), l.labels()).expect("column");
                    SeqDataset::new(x, y)
                };
                let train = data(&target.split.train, &train_l).stage("features")?;
                let valid = data(&target.split.valid, &valid_l).stage("features")?;
                let test = data(&target.split.test, &test_l).stage("features")?;
                let (net, grid_outcomes, selected) = run_end_to_end_lstm(&train, &valid, &grid, derived["downstream"]).stage("downstream")?;
                write_json(&seed_dir.join("grid.json"), &serde_json::json!({"outcomes": grid_outcomes, "selected": selected}))?;
                net.predict(test.inputs.view())?.column(0).to_vec()
            }
            kind => {
                let build = |c: &RawCohort, l: &LabelSet| build_features(&plan.representation, Some(&models), c, &l.points, &target.stats, scale);
                let train = build(&target.split.train, &train_l).stage("features")?;
                let valid = build(&target.split.valid, &valid_l).stage("features")?;
                let test = build(&target.split.test, &test_l).stage("features")?;
                if kind == DownstreamKind::Gbm {
                    let config = GbmConfig {
                        seed: derived["downstream"],
                        ..plan.gbm.clone().unwrap_or_else(|| GbmConfig::for_task(plan.task, 0))
                    };
                    let valid_y = valid_l.labels();
                    let f = gbm::fit(train.values.view(), &train_l.labels(), Some((valid.values.view(), &valid_y)), &config).stage("downstream")?;
                    f.save(&seed_dir.join("gbm.json"))?;
                    let scores = f.predict_proba(test.values.view())?;
                    if let Some(ex) = &plan.explain {
                        let rows = ex.max_rows.min(test.values.nrows());
                        let bg = BackgroundSet::sample(train.values.view(), ex.background, derived["explain"]).stage("explain")?;
                        let x = test.values.slice(s![..rows, ..]);
                        explanations = explain::shap_rows(&f, x, &bg).stage("explain")?;
                        let ids: Vec<String> = test_keys[..rows].iter().map(|(id, t)| format!("{id}@{t}")).collect();
                        explain::write_explain_csv(&seed_dir.join("explain.csv"), &ids, &explanations, x, &test.names)?;
                        let summary = explain::summary_data(&explanations, x, &test.names, ex.top_k)?;
                        explain::write_summary_csv(&seed_dir.join("summary.csv"), &summary)?;
                    }
                    forest = Some(f);
                    scores
                } else {
                    let scaler = ColumnScaler::fit(train.values.view(), &train.names)?;
                    let tx = scaler.transform(train.values.view())?;
                    let vx = scaler.transform(valid.values.view())?;
                    let (net, history) = train_downstream_mlp(tx.view(), &train_l.labels(), vx.view(), &valid_l.labels(), &plan.mlp, derived["downstream"]).stage("downstream")?;
                    write_json(&seed_dir.join("mlp.json"), &net)?;
                    write_json(&seed_dir.join("history.json"), &history)?;
                    mlp_scores(&net, scaler.transform(test.values.view())?.view())?
                }
            }
        };

        let report = eval::evaluate(
            plan.task.name(),
            &label,
            &target.cohort_id,
            &scores,
            &test_y,
            digest.clone(),
            plan.bootstrap.n_resamples,
            plan.bootstrap.level,
            derived["bootstrap"],
        )
        .stage("evaluate")?;
        let report_path = seed_dir.join("report.json");
        write_json(&report_path, &report)?;
        log::info!("{label} {} seed {seed}: AP {:.4} (base rate {:.4})", plan.task, report.ap, report.base_rate);

        if fixed && file_hashes(&records)? != before {
            return Err(PhaseError::data("a transferred embedder file changed during the run").at_stage("transfer"));
        }
        seed_records.push(SeedRecord {
            seed,
            derived_seeds: derived,
            embedders: records,
            report: report_path,
        });
        outcomes.push(SeedOutcome {
            seed,
            report,
            models,
            forest,
            explanations,
        });
    }

    let manifest = Manifest {
        plan_hash: hash,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        plan: plan.clone(),
        cohorts: cohort_records,
        n_train: train_l.len(),
        n_valid: valid_l.len(),
        n_test: test_l.len(),
        seeds: seed_records,
    };
    write_json(&run_dir.join("manifest.json"), &manifest)?;
    Ok(ExperimentOutcome {
        run_dir,
        manifest,
        seeds: outcomes,
    })
}

/// 1-based number of epochs until the loss first reaches `target`.
pub fn epochs_to_reach(losses: &[f64], target: f64) -> Option<usize> {
    losses.iter().position(|&l| l <= target).map(|i| i + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub signal: String,
    pub scratch_valid: Vec<f64>,
    pub fine_tuned_valid: Vec<f64>,
    pub scratch_best: f64,
    /// Epochs to come within `tolerance` of the scratch-best validation loss.
    pub scratch_epochs: Option<usize>,
    pub fine_tuned_epochs: Option<usize>,
}

/// Trains from scratch and fine-tunes `source_model` on the same target data
/// with the same schedule, and compares how fast each approaches the scratch
/// optimum.
pub fn convergence_run(source_model: &EmbedderModel, train: &SourceData, valid: &SourceData, config: &EmbedderConfig, tolerance: f64) -> Result<ConvergenceRecord> {
    let (_, scratch) = train_embedder(&source_model.task, train, valid, config)?;
    let (_, tuned) = fine_tune(source_model, train, valid, config)?;
    let best = scratch.valid_loss.iter().cloned().fold(f64::INFINITY, f64::min);
    let target = best * (1.0 + tolerance);
    Ok(ConvergenceRecord {
        signal: source_model.signal.clone(),
        scratch_epochs: epochs_to_reach(&scratch.valid_loss, target),
        fine_tuned_epochs: epochs_to_reach(&tuned.valid_loss, target),
        scratch_valid: scratch.valid_loss,
        fine_tuned_valid: tuned.valid_loss,
        scratch_best: best,
    })
}
