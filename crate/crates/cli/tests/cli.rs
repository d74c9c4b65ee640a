use eloquent::formats::{decode_patient, encode_patient};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
regions = 20
frames = 40
patients = 8
community_sizes = [2, 2, 2, 2]
tumor_size = [1, 3]
block_frames = [10, 15]
bilateral_fraction = 0.25

[window]
window_length = 15

[model]
filters = 3
fc_dims = [8, 6]
lstm_hidden = 4
leaky_slope = 0.1

[train]
epochs = 4
folds = 4
loss_mode = "softmax-ce"
"#;

struct Work {
    dir: TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.toml"), SMALL).unwrap();
        Work { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_eloquent"))
            .args(args)
            .current_dir(self.dir.path())
            .env("ELOQUENT_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    fn simulate(&self, out: &str) {
        self.ok(&["simulate", "--config", "small.toml", "--out", out]);
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn error_record(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().unwrap();
    serde_json::from_str(last).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "manifest.json" {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn simulate_writes_one_file_per_patient_and_is_reproducible() {
    let w = Work::new();
    w.simulate("a");
    w.simulate("b");
    let index = json(&w.path("a/index.json"));
    let entries = index["patients"].as_array().unwrap();
    assert_eq!(entries.len(), 8);
    for e in entries {
        assert!(w.path("a").join(e["file"].as_str().unwrap()).is_file());
    }
    assert_eq!(entries.iter().filter(|e| e["bilateral"] == true).count(), 2);
    assert_eq!(tree(&w.path("a")), tree(&w.path("b")));
    let manifest = json(&w.path("a/manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["config"]["synth"]["patients"], 8);
}

#[test]
fn default_cohort_has_56_patients() {
    let w = Work::new();
    w.ok(&["simulate", "--out", "full"]);
    let index = json(&w.path("full/index.json"));
    assert_eq!(index["patients"].as_array().unwrap().len(), 56);
    assert_eq!(fs::read_dir(w.path("full/patients")).unwrap().count(), 56);
}

#[test]
fn empty_cohort_is_a_config_error_and_writes_nothing() {
    let w = Work::new();
    fs::write(w.path("zero.toml"), SMALL.replace("patients = 8", "patients = 0")).unwrap();
    let out = w.run(&["simulate", "--config", "zero.toml", "--out", "none"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "usage");
    assert!(!w.path("none").exists());
}

#[test]
fn bad_flags_exit_with_usage_code() {
    let w = Work::new();
    for args in [
        vec!["crossval", "--cohort", "c", "--out", "o", "--variant", "dense"],
        vec!["crossval", "--cohort", "missing", "--out", "o"],
        vec!["frobnicate"],
    ] {
        let out = w.run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(error_record(&out)["message"].is_string());
    }
}

#[test]
fn crossval_reports_every_task_and_exports_attention() {
    let w = Work::new();
    w.simulate("cohort");
    w.ok(&["crossval", "--config", "small.toml", "--cohort", "cohort", "--out", "cv"]);
    let report = json(&w.path("cv/report.json"));
    for task in ["language", "finger", "foot", "tongue"] {
        assert_eq!(report["tasks"][task]["status"], "evaluated", "{task}");
    }
    assert_eq!(report["patients"].as_array().unwrap().len(), 8);
    for k in 0..4 {
        assert!(w.path(&format!("cv/checkpoints/fold-{k}.ckpt")).is_file());
    }
    // 40 frames, window 15, stride 5
    let tsv = fs::read_to_string(w.path("cv/attention/p000.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 6);
    let metrics = fs::read_to_string(w.path("cv/metrics.jsonl")).unwrap();
    let epochs = metrics.lines().filter(|l| l.contains("\"kind\":\"epoch\"")).count();
    assert_eq!(epochs, 4 * 4);
}

#[test]
fn static_variant_exports_a_single_time_point() {
    let w = Work::new();
    w.simulate("cohort");
    w.ok(&[
        "crossval", "--config", "small.toml", "--cohort", "cohort", "--out", "cv", "--variant", "mt-gnn-static",
    ]);
    let tsv = fs::read_to_string(w.path("cv/attention/p003.tsv")).unwrap();
    assert_eq!(tsv, "window\tlanguage\tmotor\n0\t1e0\t1e0\n");
}

#[test]
fn task_nobody_performed_is_marked_absent() {
    let w = Work::new();
    fs::write(w.path("nofoot.toml"), SMALL.replace("[synth]", "[synth]\ntask_presence = [1.0, 0.5, 0.0, 0.5]")).unwrap();
    w.ok(&["simulate", "--config", "nofoot.toml", "--out", "cohort"]);
    w.ok(&["crossval", "--config", "nofoot.toml", "--cohort", "cohort", "--out", "cv"]);
    let report = json(&w.path("cv/report.json"));
    assert_eq!(report["tasks"]["foot"]["status"], "absent");
    assert_eq!(report["tasks"]["language"]["status"], "evaluated");
}

#[test]
fn more_folds_than_patients_is_rejected() {
    let w = Work::new();
    w.simulate("cohort");
    let out = w.run(&["crossval", "--config", "small.toml", "--cohort", "cohort", "--out", "cv", "--folds", "9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!w.path("cv").exists());
}

#[test]
fn bilateral_lists_each_test_patient() {
    let w = Work::new();
    w.simulate("cohort");
    w.ok(&["bilateral", "--config", "small.toml", "--cohort", "cohort", "--out", "bi"]);
    let report = json(&w.path("bi/report.json"));
    let test = report["test_patients"].as_array().unwrap();
    assert_eq!(test.len(), 2);
    assert_eq!(report["train_patients"].as_array().unwrap().len(), 6);
    for p in test {
        assert!(p["right_hemisphere_detected"].is_boolean());
        assert!(w.path(&format!("bi/attention/{}.tsv", p["id"].as_str().unwrap())).is_file());
    }
    assert!(report["mean_language_eloquent_accuracy"].is_number());
}

#[test]
fn bilateral_needs_bilateral_patients() {
    let w = Work::new();
    fs::write(w.path("uni.toml"), SMALL.replace("bilateral_fraction = 0.25", "bilateral_fraction = 0.0")).unwrap();
    w.ok(&["simulate", "--config", "uni.toml", "--out", "cohort"]);
    let out = w.run(&["bilateral", "--config", "uni.toml", "--cohort", "cohort", "--out", "bi"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_record(&out)["message"].as_str().unwrap().contains("bilateral"));
}

#[test]
fn predict_is_repeatable_and_length_agnostic() {
    let w = Work::new();
    w.simulate("cohort");
    w.ok(&["train", "--config", "small.toml", "--cohort", "cohort", "--out", "model"]);
    let args = |out: &'static str, patient: &'static str| {
        vec!["predict", "--config", "small.toml", "--checkpoint", "model/model.ckpt", "--patient", patient, "--out", out]
    };
    w.ok(&args("p1", "cohort/patients/p001.elq"));
    w.ok(&args("p2", "cohort/patients/p001.elq"));
    assert_eq!(tree(&w.path("p1")), tree(&w.path("p2")));
    let pred = json(&w.path("p1/prediction.json"));
    assert_eq!(pred["windows"], 6);
    assert_eq!(pred["tasks"]["language"]["labels"].as_array().unwrap().len(), 20);

    let mut p = decode_patient(&fs::read(w.path("cohort/patients/p001.elq")).unwrap()).unwrap();
    p.series = p.series.segment(0, 25).unwrap();
    fs::write(w.path("short.elq"), encode_patient(&p).unwrap()).unwrap();
    w.ok(&args("p3", "short.elq"));
    assert_eq!(json(&w.path("p3/prediction.json"))["windows"], 3);
}

#[test]
fn predict_rejects_a_patient_of_another_size() {
    let w = Work::new();
    w.simulate("cohort");
    w.ok(&["train", "--config", "small.toml", "--cohort", "cohort", "--out", "model"]);
    fs::write(w.path("big.toml"), SMALL.replace("regions = 20", "regions = 24")).unwrap();
    w.ok(&["simulate", "--config", "big.toml", "--out", "big"]);
    let out = w.run(&[
        "predict", "--config", "small.toml", "--checkpoint", "model/model.ckpt", "--patient", "big/patients/p000.elq",
        "--out", "p",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn training_patient_is_recovered_after_convergence() {
    let w = Work::new();
    fs::write(w.path("long.toml"), SMALL.replace("epochs = 4", "epochs = 300\nlearning_rate = 0.02").replace("patients = 8", "patients = 3")).unwrap();
    w.ok(&["simulate", "--config", "long.toml", "--out", "cohort"]);
    w.ok(&["train", "--config", "long.toml", "--cohort", "cohort", "--out", "model"]);
    w.ok(&[
        "predict", "--config", "long.toml", "--checkpoint", "model/model.ckpt", "--patient", "cohort/patients/p000.elq",
        "--out", "p",
    ]);
    let pred = json(&w.path("p/prediction.json"));
    let lang = &pred["tasks"]["language"]["metrics"];
    assert!(lang["auc"].as_f64().unwrap() > 0.5, "{lang}");
    assert!(lang["eloquent_accuracy"].as_f64().unwrap() > 1.0 / 3.0, "{lang}");
}

#[test]
fn replay_reproduces_checkpoints_and_metrics() {
    let w = Work::new();
    w.simulate("cohort");
    w.ok(&["crossval", "--config", "small.toml", "--cohort", "cohort", "--out", "cv", "--seed", "5"]);
    w.ok(&["replay", "--manifest", "cv/manifest.json", "--out", "again"]);
    let (a, b) = (tree(&w.path("cv")), tree(&w.path("again")));
    assert!(a.iter().any(|(p, _)| p.ends_with("fold-0.ckpt")));
    assert_eq!(a, b);
    let m = json(&w.path("again/manifest.json"));
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"], json(&w.path("cv/manifest.json"))["config"]);
}
