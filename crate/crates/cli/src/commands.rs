//! The work behind each subcommand, split into a pure part that returns
//! records and a writer that puts them on disk.

use crate::config::ExperimentConfig;
use crate::manifest::{Inputs, RunManifest};
use eloquent::evaluation::{Summary, TaskMetrics};
use eloquent::formats::{attention_tsv, load_cohort, load_patient, save_cohort, write_atomic, write_json, write_jsonl};
use eloquent::layers::AttentionPair;
use eloquent::model::{load_checkpoint, save_checkpoint, ModelState, Task, ELOQUENT};
use eloquent::synthdata::{generate_cohort, Hemisphere, SynthPatient};
use eloquent::training::{
    cross_validate, evaluate_patient, train, CvReport, Example, PatientEvaluation, TrainOutcome,
};
use eloquent::{Error, Result};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Model inputs for every patient, with the model sized to the cohort.
pub fn prepare(patients: &[SynthPatient], cfg: &mut ExperimentConfig) -> Result<Vec<Example>> {
    let first = patients.first().ok_or(Error::Empty("cohort has no patients"))?;
    if cfg.model.regions != first.regions() {
        info!("model regions set to {} from the cohort", first.regions());
        cfg.model.regions = first.regions();
    }
    cfg.validate_training()?;
    // inputs only depend on the shape, not on parameter values
    let shape = ModelState::init(&cfg.model, 0)?;
    patients.iter().map(|p| p.example(&cfg.window, &shape)).collect()
}

/// One task's section of a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TaskSection {
    Absent,
    Evaluated {
        #[serde(flatten)]
        summary: Summary,
        /// Per fold; `null` where the fold's test split lacked the task.
        folds: Vec<Option<Summary>>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub fold: usize,
    pub metrics: BTreeMap<Task, TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub variant: String,
    pub loss_mode: String,
    pub folds: usize,
    pub tasks: BTreeMap<Task, TaskSection>,
    pub patients: Vec<PatientRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricRecord {
    Epoch {
        fold: Option<usize>,
        epoch: usize,
        loss: f64,
    },
    Fold {
        fold: usize,
        task: Task,
        #[serde(flatten)]
        summary: Summary,
    },
}

fn metric_map(metrics: &[Option<TaskMetrics>; 4]) -> BTreeMap<Task, TaskMetrics> {
    Task::ALL
        .into_iter()
        .filter_map(|t| metrics[t.index()].clone().map(|m| (t, m)))
        .collect()
}

fn epoch_records(fold: Option<usize>, history: &[f64]) -> impl Iterator<Item = MetricRecord> + '_ {
    history
        .iter()
        .enumerate()
        .map(move |(epoch, &loss)| MetricRecord::Epoch { fold, epoch, loss })
}

pub fn crossval_report(cv: &CvReport, cfg: &ExperimentConfig) -> CrossvalReport {
    let tasks = Task::ALL
        .into_iter()
        .map(|t| {
            let section = match &cv.summary[t.index()] {
                None => TaskSection::Absent,
                Some(s) => TaskSection::Evaluated {
                    summary: s.clone(),
                    folds: cv.folds.iter().map(|f| f.summary[t.index()].clone()).collect(),
                },
            };
            (t, section)
        })
        .collect();
    let mut patients: Vec<PatientRecord> = cv
        .folds
        .iter()
        .flat_map(|f| {
            f.patients.iter().map(|p| PatientRecord {
                id: p.id.clone(),
                fold: f.split.fold,
                metrics: metric_map(&p.metrics),
            })
        })
        .collect();
    patients.sort_by(|a, b| a.id.cmp(&b.id));
    CrossvalReport {
        variant: cfg.model.variant.to_string(),
        loss_mode: cfg.train.loss_mode.to_string(),
        folds: cv.folds.len(),
        tasks,
        patients,
    }
}

fn write_attention(out: &Path, patients: &[&PatientEvaluation]) -> Result<()> {
    for p in patients {
        let path = out.join("attention").join(format!("{}.tsv", p.id));
        write_atomic(&path, attention_tsv(&p.prediction.attention).as_bytes())?;
    }
    Ok(())
}

pub fn write_crossval(out: &Path, cv: &CvReport, cfg: &ExperimentConfig) -> Result<CrossvalReport> {
    let report = crossval_report(cv, cfg);
    let mut records = Vec::new();
    for f in &cv.folds {
        records.extend(epoch_records(Some(f.split.fold), &f.history));
        for t in Task::ALL {
            if let Some(s) = &f.summary[t.index()] {
                records.push(MetricRecord::Fold {
                    fold: f.split.fold,
                    task: t,
                    summary: s.clone(),
                });
            }
        }
        save_checkpoint(&f.state, &out.join("checkpoints").join(format!("fold-{}.ckpt", f.split.fold)))?;
    }
    let evaluated: Vec<&PatientEvaluation> = cv.folds.iter().flat_map(|f| &f.patients).collect();
    write_attention(out, &evaluated)?;
    write_jsonl(&out.join(METRICS_FILE), &records)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Result of training on unilateral patients and testing on bilateral ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralReport {
    pub train_patients: Vec<String>,
    pub test_patients: Vec<BilateralPatient>,
    pub mean_language_eloquent_accuracy: Option<f64>,
    pub right_hemisphere_detected: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BilateralPatient {
    pub id: String,
    pub language_eloquent_accuracy: Option<f64>,
    pub language_auc: Option<f64>,
    /// Right-hemisphere regions predicted eloquent for language.
    pub right_hemisphere_predicted: Vec<usize>,
    pub right_hemisphere_detected: bool,
}

pub struct BilateralRun {
    pub report: BilateralReport,
    pub outcome: TrainOutcome,
    pub evaluations: Vec<PatientEvaluation>,
}

pub fn bilateral(patients: &[SynthPatient], cfg: &mut ExperimentConfig) -> Result<BilateralRun> {
    let (test, train_set): (Vec<&SynthPatient>, Vec<&SynthPatient>) = patients.iter().partition(|p| p.bilateral);
    if test.is_empty() {
        return Err(Error::Config("cohort has no bilateral patients".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Config("cohort has no unilateral patients to train on".into()));
    }
    if let Some(p) = test.iter().find(|p| !p.labels.is_present(Task::Language)) {
        return Err(Error::Config(format!("bilateral patient {} has no language labels", p.id)));
    }
    let examples = prepare(patients, cfg)?;
    let (mut test_ex, mut train_ex) = (Vec::new(), Vec::new());
    for (ex, p) in examples.into_iter().zip(patients) {
        if p.bilateral {
            test_ex.push(ex);
        } else {
            train_ex.push(ex);
        }
    }
    let outcome = train(&train_ex, &cfg.train, &cfg.model)?;
    let evaluations = test_ex
        .iter()
        .map(|ex| evaluate_patient(&outcome.state, ex, cfg.train.loss_mode))
        .collect::<Result<Vec<_>>>()?;
    let test_patients: Vec<BilateralPatient> = evaluations
        .iter()
        .zip(&test)
        .map(|(e, p)| {
            let lang = Task::Language.index();
            let right: Vec<usize> = e.prediction.labels[lang]
                .iter()
                .enumerate()
                .filter(|&(r, &c)| c == ELOQUENT && p.hemisphere(r) == Hemisphere::Right)
                .map(|(r, _)| r)
                .collect();
            let m = e.metrics[lang].as_ref().expect("language present");
            BilateralPatient {
                id: e.id.clone(),
                language_eloquent_accuracy: m.eloquent_accuracy,
                language_auc: m.auc,
                right_hemisphere_detected: !right.is_empty(),
                right_hemisphere_predicted: right,
            }
        })
        .collect();
    let accs: Vec<f64> = test_patients.iter().filter_map(|p| p.language_eloquent_accuracy).collect();
    let report = BilateralReport {
        train_patients: train_ex.iter().map(|e| e.id.clone()).collect(),
        mean_language_eloquent_accuracy: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
        right_hemisphere_detected: test_patients.iter().filter(|p| p.right_hemisphere_detected).count(),
        test_patients,
    };
    Ok(BilateralRun {
        report,
        outcome,
        evaluations,
    })
}

/// Per-task output of `predict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPrediction {
    pub labels: Vec<usize>,
    pub scores: Vec<[f64; 3]>,
    /// Against the patient's labels, when it has them for this task.
    pub metrics: Option<TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionReport {
    pub id: String,
    pub windows: usize,
    pub tasks: BTreeMap<Task, TaskPrediction>,
    pub attention: AttentionPair,
}

pub fn predict(state: &ModelState, patient: &SynthPatient, cfg: &ExperimentConfig) -> Result<PredictionReport> {
    cfg.window.validate()?;
    if patient.regions() != state.config().regions {
        return Err(Error::Config(format!(
            "checkpoint expects {} regions but patient {} has {}",
            state.config().regions,
            patient.id,
            patient.regions()
        )));
    }
    let ex = patient.example(&cfg.window, state)?;
    let e = evaluate_patient(state, &ex, cfg.train.loss_mode)?;
    let tasks = Task::ALL
        .into_iter()
        .map(|t| {
            let k = t.index();
            let p = TaskPrediction {
                labels: e.prediction.labels[k].clone(),
                scores: e.prediction.scores[k].clone(),
                metrics: e.metrics[k].clone(),
            };
            (t, p)
        })
        .collect();
    Ok(PredictionReport {
        id: e.id,
        windows: e.prediction.attention.windows(),
        tasks,
        attention: e.prediction.attention,
    })
}

/// What a command reads; paths are resolved before they are recorded.
#[derive(Clone, Debug)]
pub enum Job {
    Simulate,
    Train { cohort: std::path::PathBuf },
    Crossval { cohort: std::path::PathBuf },
    Bilateral { cohort: std::path::PathBuf },
    Predict {
        checkpoint: std::path::PathBuf,
        patient: std::path::PathBuf,
    },
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Simulate => "simulate",
            Job::Train { .. } => "train",
            Job::Crossval { .. } => "crossval",
            Job::Bilateral { .. } => "bilateral",
            Job::Predict { .. } => "predict",
        }
    }

    pub fn inputs(&self) -> Inputs {
        let mut i = Inputs::default();
        match self {
            Job::Simulate => {}
            Job::Train { cohort } | Job::Crossval { cohort } | Job::Bilateral { cohort } => {
                i.cohort = Some(cohort.clone())
            }
            Job::Predict { checkpoint, patient } => {
                i.checkpoint = Some(checkpoint.clone());
                i.patient = Some(patient.clone());
            }
        }
        i
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Job> {
        let need = |p: &Option<std::path::PathBuf>, what: &str| {
            p.clone()
                .ok_or_else(|| Error::Config(format!("manifest of `{}` lacks the {what} input", m.command)))
        };
        Ok(match m.command.as_str() {
            "simulate" => Job::Simulate,
            "train" => Job::Train {
                cohort: need(&m.inputs.cohort, "cohort")?,
            },
            "crossval" => Job::Crossval {
                cohort: need(&m.inputs.cohort, "cohort")?,
            },
            "bilateral" => Job::Bilateral {
                cohort: need(&m.inputs.cohort, "cohort")?,
            },
            "predict" => Job::Predict {
                checkpoint: need(&m.inputs.checkpoint, "checkpoint")?,
                patient: need(&m.inputs.patient, "patient")?,
            },
            other => return Err(Error::Config(format!("manifest names unknown command `{other}`"))),
        })
    }
}

/// Runs a job with a fully resolved configuration and writes its outputs and
/// manifest under `out`. Nothing is written if the inputs fail validation.
pub fn execute(job: &Job, mut cfg: ExperimentConfig, out: &Path) -> Result<RunManifest> {
    let mut manifest = RunManifest::start(job, &cfg, out);
    match job {
        Job::Simulate => {
            cfg.synth.validate()?;
            let cohort = generate_cohort(&cfg.synth)?;
            save_cohort(out, &cohort)?;
            info!("wrote {} patients to {}", cohort.len(), out.display());
        }
        Job::Train { cohort } => {
            let patients = load_cohort(cohort)?;
            let examples = prepare(&patients, &mut cfg)?;
            let outcome = train(&examples, &cfg.train, &cfg.model)?;
            save_checkpoint(&outcome.state, &out.join("model.ckpt"))?;
            let records: Vec<MetricRecord> = epoch_records(None, &outcome.history).collect();
            write_jsonl(&out.join(METRICS_FILE), &records)?;
        }
        Job::Crossval { cohort } => {
            let patients = load_cohort(cohort)?;
            let examples = prepare(&patients, &mut cfg)?;
            if cfg.train.folds > examples.len() {
                return Err(Error::Config(format!(
                    "{} folds for {} patients",
                    cfg.train.folds,
                    examples.len()
                )));
            }
            let cv = cross_validate(&examples, &cfg.train, &cfg.model)?;
            let report = write_crossval(out, &cv, &cfg)?;
            for (t, s) in &report.tasks {
                if let TaskSection::Evaluated { summary, .. } = s {
                    info!(
                        "{t}: eloquent accuracy {:?}, auc {:?}",
                        summary.eloquent_accuracy, summary.auc
                    );
                } else {
                    warn!("{t}: no patient performed this task");
                }
            }
        }
        Job::Bilateral { cohort } => {
            let patients = load_cohort(cohort)?;
            let run = bilateral(&patients, &mut cfg)?;
            save_checkpoint(&run.outcome.state, &out.join("model.ckpt"))?;
            let records: Vec<MetricRecord> = epoch_records(None, &run.outcome.history).collect();
            write_jsonl(&out.join(METRICS_FILE), &records)?;
            write_attention(out, &run.evaluations.iter().collect::<Vec<_>>())?;
            write_json(&out.join(REPORT_FILE), &run.report)?;
        }
        Job::Predict { checkpoint, patient } => {
            let state = load_checkpoint(checkpoint)?;
            let patient = load_patient(patient)?;
            cfg.model = state.config().clone();
            let report = predict(&state, &patient, &cfg)?;
            write_atomic(&out.join("attention.tsv"), attention_tsv(&report.attention).as_bytes())?;
            write_json(&out.join("prediction.json"), &report)?;
        }
    }
    manifest.finish(cfg);
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
