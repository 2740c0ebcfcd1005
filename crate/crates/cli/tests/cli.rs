use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn phase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phase"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn generated(dir: &Path, name: &str, preset: &str, n: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    let o = phase(&["generate", "--preset", preset, "--n", n, "--seed", seed, "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = generated(dir.path(), "a", "or0", "12", "7");
    let b = generated(dir.path(), "b", "or0", "12", "7");
    assert_eq!(tree(&a), tree(&b));
    let c = generated(dir.path(), "c", "or0", "12", "8");
    assert_ne!(tree(&a), tree(&c));

    let again = phase(&["generate", "--preset", "or0", "--n", "12", "--out", s(&a)]);
    assert_eq!(code(&again), 2, "refuses a non-empty output directory");
}

#[test]
fn train_embedder_writes_a_loadable_model() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generated(dir.path(), "c", "or0", "20", "1");
    let model = dir.path().join("models/or0/SAO2/next.phase");
    let o = phase(&[
        "train-embedder", "--signal", "SAO2", "--task", "next", "--cohort", s(&cohort), "--out", s(&model),
        "--epochs", "2", "--hidden", "8,6", "--window-stride", "10", "--seed", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = phase_core::embedder::load_model(&model).unwrap();
    assert_eq!(loaded.signal, "SAO2");
    assert_eq!(loaded.hidden_width(), 6);

    let emb = dir.path().join("emb.csv");
    let o = phase(&["embed", "--model", s(&model), "--cohort", s(&cohort), "--task", "hypotension", "--stride", "20", "--out", s(&emb)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = phase_core::dataprep::read_dataset_csv(&emb).unwrap();
    assert_eq!(table.feature_names.len(), 6);
    assert!(table.features.iter().all(|v| v.is_finite()));

    let tuned = dir.path().join("tuned.phase");
    let curves = dir.path().join("curves.csv");
    let target = generated(dir.path(), "t", "or1", "20", "2");
    let before = fs::read(&model).unwrap();
    let o = phase(&[
        "finetune", "--model", s(&model), "--cohort", s(&target), "--out", s(&tuned), "--epochs", "2",
        "--window-stride", "10", "--curves", s(&curves),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(&model).unwrap(), before);
    let tuned = phase_core::embedder::load_model(&tuned).unwrap();
    assert_eq!(tuned.target_cohort.as_deref(), Some("or1"));
    assert_eq!(fs::read_to_string(&curves).unwrap().lines().count(), 3);

    let o = phase(&["finetune", "--model", s(&model), "--cohort", s(&target), "--out", s(&model)]);
    assert_eq!(code(&o), 2, "refuses to overwrite its input");
}

#[test]
fn plan_run_explain_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = generated(dir.path(), "c", "or0", "60", "4");
    let runs = dir.path().join("runs");
    for repr in ["raw", "ema"] {
        let plan = serde_json::json!({
            "task": "hypotension",
            "target": {"dir": cohort},
            "representation": if repr == "raw" { serde_json::json!({"kind": "raw"}) } else { serde_json::json!({"kind": "ema", "decays": [0.5, 0.1, 0.02]}) },
            "downstream": "gbm",
            "seeds": [0, 1],
            "label_stride": 5,
            "gbm": {"learning_rate": 0.1, "max_depth": 4, "subsample_rate": 0.5, "max_rounds": 20,
                    "early_stopping_rounds": 5, "lambda": 1.0, "gamma": 0.0, "min_child_weight": 1.0, "seed": 0},
            "bootstrap": {"n_resamples": 200},
            "output_dir": runs,
        });
        let path = dir.path().join(format!("{repr}.json"));
        fs::write(&path, plan.to_string()).unwrap();
        let o = phase(&["train-downstream", "--plan", s(&path), "--threads", "1"]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let figure = dir.path().join("figure2.csv");
    let o = phase(&["report", "--runs", s(&runs), "--out", s(&figure)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&figure).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().any(|r| r.contains(",raw,")) && rows.iter().any(|r| r.contains(",ema,")));

    let table = dir.path().join("raw.csv");
    let o = phase(&["prep", "--cohort", s(&cohort), "--task", "hypotension", "--part", "test", "--stride", "5", "--out", s(&table)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let forest = fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path().join("seed-0/gbm.json"))
        .find(|p| p.exists() && phase_core::gbm::Forest::load(p).unwrap().n_features == 906)
        .expect("raw forest");
    let shap = dir.path().join("shap.csv");
    let summary = dir.path().join("summary.csv");
    let o = phase(&[
        "explain", "--forest", s(&forest), "--data", s(&table), "--rows", "5", "--background-size", "20",
        "--summary", s(&summary), "--top-k", "4", "--out", s(&shap),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&shap).unwrap().lines().count(), 1 + 5 * 906);
    assert!(summary.exists());
}

#[test]
fn evaluate_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    fs::write(&scores, "score,label\n0.9,1\n0.8,0\n0.7,1\n0.6,0\n").unwrap();
    let report = dir.path().join("report.json");
    let o = phase(&["evaluate", "--scores", s(&scores), "--task", "hypoxemia", "--resamples", "100", "--out", s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = phase_core::eval::read_report_json(&report).unwrap();
    assert_eq!(r.ap, 5.0 / 6.0);

    fs::write(&scores, "score,label\nNaN,1\n0.8,0\n").unwrap();
    let o = phase(&["evaluate", "--scores", s(&scores), "--task", "hypoxemia", "--out", s(&report)]);
    assert_eq!(code(&o), 3);

    let o = phase(&["evaluate", "--scores", s(&scores), "--task", "hypoxemia", "--out", s(&report), "--bogus"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--resamples") && err.contains("--scores"), "{err}");

    assert_eq!(code(&phase(&["frobnicate"])), 1);
    assert_eq!(code(&phase(&["--help"])), 0);
    let missing = dir.path().join("absent");
    let o = phase(&["prep", "--cohort", s(&missing), "--task", "hypoxemia", "--out", s(&dir.path().join("x.csv"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("load cohort"));
    let o = phase(&["prep", "--cohort", s(&missing), "--task", "hypoglycemia", "--out", "x.csv"]);
    assert_eq!(code(&o), 2);
}
