use std::fs;
use std::path::Path;

use ndarray::{s, Array3};
use phase_core::dataprep::{read_dataset_csv, write_dataset_csv, LabelSet, Task, DEFAULT_EMA_DECAYS, N_TIME};
use phase_core::embedder::{
    fine_tune, load_model, make_random_embedder, save_model, standardize_series, train_embedder,
    write_atomic, EmbedderConfig, SourceTask,
};
use phase_core::error::{PhaseError, Result, StageExt};
use phase_core::eval;
use phase_core::explain::{self, BackgroundSet};
use phase_core::gbm::Forest;
use phase_core::pipeline::{
    self, build_features, convergence_run, embedder_data, labels_for, prepare_split, CohortSource, EmbedderSampling,
    ExperimentPlan, FeatureScale, PreparedSplit, RepresentationSpec, Transfer,
};
use phase_core::synthgen::{generate_cohort, read_cohort, write_cohort, GeneratorConfig, RawCohort, SplitFractions};

use crate::args::*;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Prep(a) => prep(a),
        Command::TrainEmbedder(a) => train_embedder_cmd(a),
        Command::Embed(a) => embed(a),
        Command::TrainDownstream(a) => train_downstream(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Transfer(a) => transfer(a),
        Command::Finetune(a) => finetune(a),
        Command::Explain(a) => explain_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| PhaseError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| PhaseError::io(dir, e)),
        _ => Ok(()),
    }
}

/// Refuses outputs that would overwrite one of the inputs.
fn distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for input in inputs {
        if canon(out) == canon(input) {
            return Err(PhaseError::config("out", format!("{} is also an input", out.display())));
        }
    }
    Ok(())
}

fn task(name: &str) -> Result<Task> {
    name.parse()
}

fn fractions(a: &SplitArgs) -> SplitFractions {
    SplitFractions {
        train: a.train_frac,
        valid: a.valid_frac,
        test: a.test_frac,
    }
}

fn part_of<'a>(split: &'a PreparedSplit, part: Part, whole: &'a RawCohort) -> &'a RawCohort {
    match part {
        Part::Train => &split.split.train,
        Part::Valid => &split.split.valid,
        Part::Test => &split.split.test,
        Part::All => whole,
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut config = match (&a.config, a.preset) {
        (Some(path), _) => read_json::<GeneratorConfig>(path)?,
        (None, Some(p)) => {
            let preset = match p {
                Preset::Or0 => phase_core::synthgen::CohortPreset::Or0,
                Preset::Or1 => phase_core::synthgen::CohortPreset::Or1,
                Preset::Icu => phase_core::synthgen::CohortPreset::Icu,
            };
            GeneratorConfig::preset(preset, 1000, 0)
        }
        (None, None) => return Err(PhaseError::config("config", "give --config or --preset")),
    };
    if let Some(n) = a.n {
        config.n_procedures = n;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    if a.out.exists() && fs::read_dir(&a.out).map_err(|e| PhaseError::io(&a.out, e))?.next().is_some() {
        return Err(PhaseError::config("out", format!("{} exists and is not empty", a.out.display())));
    }
    let cohort = generate_cohort(&config).stage("generate")?;
    write_cohort(&cohort, Some(&config), &a.out)?;
    log::info!(
        "wrote {} procedures ({} minutes) of cohort {} to {}",
        cohort.procedures.len(),
        cohort.n_minutes(),
        cohort.cohort_id,
        a.out.display()
    );
    Ok(())
}

fn prep(a: PrepArgs) -> Result<()> {
    let task = task(&a.task)?;
    if a.stride == 0 {
        return Err(PhaseError::config("stride", "must be at least 1"));
    }
    let cohort = read_cohort(&a.cohort).stage("load cohort")?;
    let split = prepare_split(&cohort, None, fractions(&a.split), a.split.split_seed)?;
    let part = part_of(&split, a.part, &cohort);
    let labels = labels_for(part, task, a.stride).stage("label")?;
    let repr = match a.representation {
        PrepRepresentation::Raw => RepresentationSpec::Raw,
        PrepRepresentation::Ema => RepresentationSpec::Ema {
            decays: DEFAULT_EMA_DECAYS.to_vec(),
        },
    };
    let features = build_features(&repr, None, part, &labels.points, &split.stats, FeatureScale::Trees).stage("features")?;
    let ids: Vec<String> = part.procedures.iter().map(|p| p.id.clone()).collect();
    ensure_parent(&a.out)?;
    write_dataset_csv(&a.out, &ids, &labels, &features.names, &features.values)?;
    if let Some(path) = &a.stats_out {
        write_json(path, &split.stats)?;
    }
    log::info!(
        "{} rows x {} columns, base rate {:.4}",
        labels.len(),
        features.names.len(),
        labels.base_rate().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn embedder_config(a: &EmbedderTrainingArgs) -> Result<EmbedderConfig> {
    let mut config = match &a.config {
        Some(path) => read_json::<EmbedderConfig>(path)?,
        None => EmbedderConfig::default(),
    };
    if let Some(e) = a.epochs {
        config.epochs = e;
    }
    if let Some(h) = &a.hidden {
        config.hidden = h.clone();
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if a.window_stride == 0 {
        return Err(PhaseError::config("window-stride", "must be at least 1"));
    }
    Ok(config)
}

fn sampling(a: &EmbedderTrainingArgs) -> EmbedderSampling {
    EmbedderSampling {
        stride: a.window_stride,
        max_train_windows: a.max_windows,
        max_valid_windows: a.max_windows.map(|m| m.div_ceil(4)),
    }
}

fn train_embedder_cmd(a: TrainEmbedderArgs) -> Result<()> {
    let source_task = SourceTask::parse(&a.task, task(&a.downstream)?)?;
    let config = embedder_config(&a.training)?;
    let cohort = read_cohort(&a.cohort).stage("load cohort")?;
    let split = prepare_split(&cohort, None, fractions(&a.split), a.split.split_seed)?;
    let stats = split
        .stats
        .signal(&a.signal)
        .ok_or_else(|| PhaseError::data(format!("cohort {} has no signal {}", split.cohort_id, a.signal)))?
        .clone();
    if source_task == SourceTask::Rand {
        let spec = config.network_spec(&SourceTask::Next);
        let model = make_random_embedder(&a.signal, &split.cohort_id, &stats, spec, config.seed)?;
        ensure_parent(&a.out)?;
        return save_model(&model, &a.out);
    }
    let (train, valid) = embedder_data(&split, &a.signal, &stats, &source_task, &config, &sampling(&a.training)).stage("windows")?;
    log::info!("{} training and {} validation windows", train.data.len(), valid.data.len());
    let (model, history) = train_embedder(&source_task, &train, &valid, &config).stage("train embedder")?;
    ensure_parent(&a.out)?;
    save_model(&model, &a.out)?;
    if let Some(path) = &a.history_out {
        write_json(path, &history)?;
    }
    log::info!(
        "best validation loss {:.6} at epoch {}",
        history.valid_loss[history.selected_epoch],
        history.selected_epoch + 1
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let task = task(&a.task)?;
    distinct(&a.out, &[&a.model])?;
    let model = load_model(&a.model).stage("load model")?;
    let cohort = read_cohort(&a.cohort).stage("load cohort")?;
    let s = cohort
        .signal_index(&model.signal)
        .ok_or_else(|| PhaseError::data(format!("cohort {} has no signal {}", cohort.cohort_id, model.signal)))?;
    let split = prepare_split(&cohort, None, fractions(&a.split), a.split.split_seed)?;
    let part = part_of(&split, a.part, &cohort);
    let labels: LabelSet = labels_for(part, task, a.stride).stage("label")?;
    let series: Vec<Vec<f64>> = part.procedures.iter().map(|p| standardize_series(&model.stats, &p.signals[s])).collect();
    let width = model.hidden_width();
    let mut out = ndarray::Array2::zeros((labels.len(), width));
    const CHUNK: usize = 1024;
    for (c, points) in labels.points.chunks(CHUNK).enumerate() {
        let mut x = Array3::zeros((points.len(), N_TIME, 1));
        for (i, p) in points.iter().enumerate() {
            for (k, &v) in series[p.procedure][p.t + 1 - N_TIME..=p.t].iter().enumerate() {
                x[[i, k, 0]] = v;
            }
        }
        let h = model.network.penultimate(x.view())?;
        out.slice_mut(s![c * CHUNK..c * CHUNK + points.len(), ..]).assign(&h);
    }
    let names: Vec<String> = (0..width).map(|k| format!("{}_h{k}", model.signal)).collect();
    let ids: Vec<String> = part.procedures.iter().map(|p| p.id.clone()).collect();
    ensure_parent(&a.out)?;
    write_dataset_csv(&a.out, &ids, &labels, &names, &out)?;
    log::info!("embedded {} windows of {} into {width} columns", labels.len(), model.signal);
    Ok(())
}

fn load_plan(a: &PlanArgs) -> Result<ExperimentPlan> {
    let mut plan: ExperimentPlan = read_json(&a.plan)?;
    if let Some(seed) = a.seed {
        plan.seeds = vec![seed];
    }
    if let Some(out) = &a.out {
        plan.output_dir = out.clone();
    }
    plan.validate()?;
    Ok(plan)
}

fn run_plan(plan: &ExperimentPlan) -> Result<()> {
    let outcome = pipeline::run_experiment(plan)?;
    for s in &outcome.seeds {
        log::info!(
            "seed {}: AP {:.4} [{:.4}, {:.4}] base rate {:.4}",
            s.seed,
            s.report.ap,
            s.report.ci_low,
            s.report.ci_high,
            s.report.base_rate
        );
    }
    log::info!("outputs in {}", outcome.run_dir.display());
    Ok(())
}

fn train_downstream(a: PlanArgs) -> Result<()> {
    run_plan(&load_plan(&a)?)
}

fn transfer(a: TransferArgs) -> Result<()> {
    let mut plan = load_plan(&a.plan)?;
    let RepresentationSpec::Embedded { transfer, .. } = &mut plan.representation else {
        return Err(PhaseError::config("representation", "transfer needs an embedded representation"));
    };
    *transfer = match a.variant {
        Variant::Fixed => Transfer::Fixed,
        Variant::Paired => Transfer::Paired,
        Variant::Finetuned => Transfer::FineTuned,
    };
    plan.source = Some(CohortSource::Dir(a.source.clone()));
    if let Some(icu) = &a.icu {
        plan.icu = Some(CohortSource::Dir(icu.clone()));
    }
    plan.validate()?;
    run_plan(&plan)
}

fn finetune(a: FinetuneArgs) -> Result<()> {
    distinct(&a.out, &[&a.model])?;
    let config = embedder_config(&a.training)?;
    let model = load_model(&a.model).stage("load model")?;
    let cohort = read_cohort(&a.cohort).stage("load cohort")?;
    let split = prepare_split(&cohort, None, fractions(&a.split), a.split.split_seed)?;
    let (train, valid) = embedder_data(&split, &model.signal, &model.stats, &model.task, &config, &sampling(&a.training)).stage("windows")?;
    let (tuned, history) = fine_tune(&model, &train, &valid, &config).stage("fine-tune")?;
    ensure_parent(&a.out)?;
    save_model(&tuned, &a.out)?;
    if let Some(path) = &a.curves {
        let run = convergence_run(&model, &train, &valid, &config, 0.05).stage("convergence")?;
        ensure_parent(path)?;
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "scratch_valid", "fine_tuned_valid"])?;
        for (e, (s, f)) in run.scratch_valid.iter().zip(&run.fine_tuned_valid).enumerate() {
            w.write_record([(e + 1).to_string(), s.to_string(), f.to_string()])?;
        }
        w.flush().map_err(|e| PhaseError::io(path, e))?;
        log::info!(
            "epochs to within 5% of the scratch best: scratch {:?}, fine-tuned {:?}",
            run.scratch_epochs,
            run.fine_tuned_epochs
        );
    }
    if let Some(last) = history.valid_loss.last() {
        log::info!("final validation loss {last:.6}");
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    task(&a.task)?;
    distinct(&a.out, &[&a.scores])?;
    let mut r = csv::Reader::from_path(&a.scores)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| PhaseError::data(format!("{}: no `{name}` column", a.scores.display())))
    };
    let (si, li) = (col("score")?, col("label")?);
    let (ii, ti) = (headers.iter().position(|h| h == "procedure_id"), headers.iter().position(|h| h == "t"));
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut keys = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| PhaseError::data(format!("{}: row {}: bad number `{}`", a.scores.display(), n + 1, &rec[i])))
        };
        scores.push(num(si)?);
        labels.push(num(li)?);
        let id = ii.map(|i| rec[i].to_string()).unwrap_or_else(|| n.to_string());
        let t = ti.map(|i| rec[i].parse().unwrap_or(0)).unwrap_or(0);
        keys.push((id, t));
    }
    let digest = eval::split_digest(&keys, &labels);
    let report = eval::evaluate(&a.task, &a.representation, &a.cohort, &scores, &labels, digest, a.resamples, a.level, a.seed)?;
    ensure_parent(&a.out)?;
    eval::write_report_json(&a.out, &report)?;
    log::info!("AP {:.4} [{:.4}, {:.4}]", report.ap, report.ci_low, report.ci_high);
    Ok(())
}

fn explain_cmd(a: ExplainArgs) -> Result<()> {
    distinct(&a.out, &[&a.forest, &a.data])?;
    let forest = Forest::load(&a.forest).stage("load forest")?;
    let data = read_dataset_csv(&a.data)?;
    if data.features.ncols() != forest.n_features {
        return Err(PhaseError::shape("explained features", forest.n_features, data.features.ncols()));
    }
    let bg_table = match &a.background {
        Some(p) => read_dataset_csv(p)?,
        None => data.clone(),
    };
    let background = BackgroundSet::sample(bg_table.features.view(), a.background_size, a.seed)?;
    let rows = a.rows.unwrap_or(data.features.nrows()).min(data.features.nrows());
    let x = data.features.slice(s![..rows, ..]);
    let attributions = explain::shap_rows(&forest, x, &background).stage("explain")?;
    let ids: Vec<String> = (0..rows).map(|i| format!("{}@{}", data.procedure_ids[i], data.minutes[i])).collect();
    ensure_parent(&a.out)?;
    explain::write_explain_csv(&a.out, &ids, &attributions, x, &data.feature_names)?;
    if let Some(path) = &a.summary {
        let summary = explain::summary_data(&attributions, x, &data.feature_names, a.top_k)?;
        ensure_parent(path)?;
        explain::write_summary_csv(path, &summary)?;
    }
    log::info!("explained {rows} rows against {} background rows", background.rows.nrows());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let reports: Vec<_> = eval::collect_reports(&a.runs)?.into_iter().map(|(_, r)| r).collect();
    if reports.is_empty() {
        return Err(PhaseError::data(format!("no report.json under {}", a.runs.display())));
    }
    let rows = eval::figure2_rows(&reports);
    ensure_parent(&a.out)?;
    eval::write_figure2_csv(&a.out, &rows)?;
    log::info!("{} rows from {} reports", rows.len(), reports.len());
    Ok(())
}
