mod common;

use common::rng;
use ndarray::Array3;
use phase_core::dataprep::{fit_prep_stats, label_points, FeatureStats, LabelSpec, SignalWindow, Task};
use phase_core::embedder::{
    assemble_features, embed, fine_tune, load_model, make_random_embedder, save_model, source_dataset, train_embedder,
    EmbedderConfig, EmbedderModel, SourceTask, StaticScale, WindowSampling,
};
use phase_core::neuralnet::{Activation, NetworkSpec};
use phase_core::synthgen::{generate_cohort, CohortPreset, GeneratorConfig, Procedure, RawCohort, DEFAULT_SIGNALS, STATIC_FEATURES};
use rand::Rng;

fn decay_cohort(seed: u64, n: usize) -> RawCohort {
    let mut r = rng(seed);
    let procedures = (0..n)
        .map(|i| {
            let len = r.random_range(66..90);
            let mut x = r.random_range(-800.0..800.0);
            let series = (0..len)
                .map(|_| {
                    let v = x;
                    x *= 0.9;
                    v
                })
                .collect();
            Procedure {
                id: format!("d{i}"),
                statics: vec![0.0; STATIC_FEATURES.len()],
                signals: vec![series],
                phenylephrine: vec![false; len],
                latent: vec![],
            }
        })
        .collect();
    RawCohort {
        cohort_id: format!("decay{seed}"),
        signal_names: vec!["X".into()],
        procedures,
    }
}

fn tiny_config(epochs: usize, seed: u64) -> EmbedderConfig {
    EmbedderConfig {
        hidden: vec![8],
        dropout: 0.0,
        recurrent_dropout: 0.0,
        epochs,
        batch_size: 32,
        learning_rate: 1e-3,
        seed,
        ..Default::default()
    }
}

#[test]
fn next_learns_a_noiseless_decay() {
    let train = decay_cohort(1, 40);
    let valid = decay_cohort(2, 15);
    let stats = fit_prep_stats(&train).unwrap().signals[0].clone();
    let sampling = WindowSampling::default();
    let tr = source_dataset(&train, "X", &stats, &SourceTask::Next, &sampling).unwrap();
    let va = source_dataset(&valid, "X", &stats, &SourceTask::Next, &sampling).unwrap();
    let (model, history) = train_embedder(&SourceTask::Next, &tr, &va, &tiny_config(50, 3)).unwrap();
    let best = history.valid_loss[history.selected_epoch];
    assert!(best < 1e-3, "validation MSE {best}");
    assert_eq!(model.network.spec().output_dim(), 5);
    assert_eq!(model.source_cohort, "decay1");
}

#[test]
fn file_round_trip_preserves_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let stats = FeatureStats {
        name: "SAO2".into(),
        mean: 97.0,
        std: 2.0,
    };
    let spec = NetworkSpec::lstm_stack(60, &[6, 5], 5, Activation::Linear, 0.5, 0.5);
    let model = make_random_embedder("SAO2", "or1", &stats, spec, 8).unwrap();
    let path = EmbedderModel::cache_path(dir.path(), "or1", "SAO2", &SourceTask::Rand);
    save_model(&model, &path).unwrap();
    assert!(path.ends_with("or1/SAO2/rand.phase"));
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded, model);

    let mut r = rng(4);
    for _ in 0..100 {
        let window = SignalWindow {
            signal_name: "SAO2".into(),
            procedure_id: "x".into(),
            t: 59,
            values: (0..60).map(|_| r.random_range(-3.0..3.0)).collect(),
        };
        assert_eq!(embed(&model, &window).unwrap(), embed(&loaded, &window).unwrap());
    }

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_model(&path).unwrap_err().to_string().contains("checksum"));
}

#[test]
fn fifteen_signals_give_3006_columns() {
    let config = GeneratorConfig::preset(CohortPreset::Or0, 4, 2);
    let cohort = generate_cohort(&config).unwrap();
    assert_eq!(cohort.signal_names.len(), DEFAULT_SIGNALS.len());
    let stats = fit_prep_stats(&cohort).unwrap();
    let labels = label_points(&cohort, &LabelSpec::for_task(Task::Hypoxemia)).unwrap();
    let points = &labels.points[..3];
    let models: Vec<EmbedderModel> = stats
        .signals
        .iter()
        .enumerate()
        .map(|(s, st)| {
            let spec = NetworkSpec::default_embedder(5, Activation::Linear);
            make_random_embedder(&st.name, "or0", st, spec, s as u64).unwrap()
        })
        .collect();
    let m = assemble_features(&models, &cohort, points, &stats.statics, StaticScale::Standardized).unwrap();
    assert_eq!(m.values.dim(), (3, 3006));
    assert_eq!(m.provenance.len(), 3006);
    for (c, src) in m.provenance.iter().enumerate().take(3000) {
        assert_eq!(src.name(), DEFAULT_SIGNALS[c / 200]);
    }
}

#[test]
fn fine_tuning_records_both_cohorts() {
    let source = decay_cohort(5, 12);
    let target = decay_cohort(6, 12);
    let stats = fit_prep_stats(&source).unwrap().signals[0].clone();
    let sampling = WindowSampling {
        stride: 2,
        ..Default::default()
    };
    let src = source_dataset(&source, "X", &stats, &SourceTask::Min, &sampling).unwrap();
    let tgt = source_dataset(&target, "X", &stats, &SourceTask::Min, &sampling).unwrap();
    let (model, _) = train_embedder(&SourceTask::Min, &src, &src, &tiny_config(2, 1)).unwrap();
    let (tuned, history) = fine_tune(&model, &tgt, &tgt, &tiny_config(3, 2)).unwrap();
    assert_eq!(tuned.source_cohort, "decay5");
    assert_eq!(tuned.target_cohort.as_deref(), Some("decay6"));
    assert_eq!(history.valid_loss.len(), 3);
    assert_eq!(tuned.task, SourceTask::Min);
}

#[test]
fn hypo_targets_follow_the_label_signal() {
    let config = GeneratorConfig::preset(CohortPreset::Or0, 30, 11);
    let cohort = generate_cohort(&config).unwrap();
    let stats = fit_prep_stats(&cohort).unwrap();
    let etco2 = stats.signal("ETCO2").unwrap();
    let task = SourceTask::hypo(Task::Hypoxemia);
    let data = source_dataset(&cohort, "ETCO2", etco2, &task, &WindowSampling::default()).unwrap();
    assert_eq!(data.data.targets.ncols(), 1);
    let positives = data.data.targets.iter().filter(|&&y| y == 1.0).count();
    assert!(positives > 0 && positives < data.data.len());
    let inputs: &Array3<f64> = &data.data.inputs;
    assert_eq!(inputs.dim().1, 60);
}
