//! SGD with momentum, the epoch loop, and k-fold cross-validation.

use crate::diffcore::{Gradients, Graph, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{aggregate_cv, compute_metrics, summarize, Summary, TaskMetrics};
use crate::layers::WindowStack;
use crate::loss::{total_loss_graph, LabelTensor, LossMode, RiskWeights};
use crate::model::{ModelConfig, ModelState, Prediction, Task};
use crate::seeding::derive_seed;
use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const FOLD_STREAM: u64 = 2;
const FOLD_SEED_BASE: u64 = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub folds: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    /// Patients per update; `None` uses the whole training set.
    pub batch_size: Option<usize>,
    /// Divide gradients by the node count, i.e. descend the per-node mean
    /// loss instead of the sum.
    pub node_mean: bool,
    pub risk: RiskWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 5e-5,
            epochs: 300,
            folds: 8,
            seed: 0,
            loss_mode: LossMode::Literal,
            batch_size: Some(1),
            node_mean: true,
            risk: RiskWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) || !finite_nonneg(self.weight_decay) {
            return Err(Error::Config(
                "learning_rate and weight_decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {}", self.folds)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.risk.validate()
    }
}

/// One patient prepared for the model.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub input: WindowStack,
    pub labels: LabelTensor,
}

/// Classical momentum with weight decay folded into the velocity.
#[derive(Clone, Debug)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Sgd {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: params.ids().map(|id| vec![0.0; params.get(id).len()]).collect(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> &[f64] {
        &self.velocity[id.index()]
    }

    /// `v <- momentum v + g + wd p` (decay on weights only), `p <- p - lr v`.
    /// Parameters in `frozen` are left untouched, velocity included.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Gradients, frozen: &[ParamId]) -> Result<()> {
        let ids: Vec<ParamId> = params.ids().collect();
        if let Some(&bad) = ids.iter().find(|&&id| grads.get(id).iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence(params.name(bad).to_string()));
        }
        for id in ids {
            if frozen.contains(&id) {
                continue;
            }
            let wd = if params.decays(id) { self.weight_decay } else { 0.0 };
            let v = &mut self.velocity[id.index()];
            let p = params.get_mut(id).values_mut();
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(grads.get(id)) {
                *v = self.momentum * *v + (g + wd * *p);
                *p -= self.learning_rate * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: ModelState,
    /// Mean per-patient loss of each epoch, measured during the epoch.
    pub history: Vec<f64>,
}

/// Loss and parameter adjoints for one patient.
pub fn example_gradient(state: &ModelState, example: &Example, cfg: &TrainConfig) -> Result<(f64, Gradients)> {
    let mut g = Graph::with_params(state.params());
    let vars = state.forward_graph(&mut g, &example.input)?;
    let (loss, _) = total_loss_graph(&mut g, &vars, &example.labels, &cfg.risk, cfg.loss_mode)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Divergence(format!("loss of patient {}", example.id)));
    }
    Ok((value, g.backward(loss)?))
}

fn check_examples(examples: &[Example], regions: usize) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for ex in examples {
        if ex.labels.present().next().is_none() {
            return Err(Error::EmptySupervision);
        }
        if ex.input.regions() != regions || ex.labels.regions() != regions {
            return Err(Error::dim(
                "training example regions",
                &[ex.input.regions(), ex.labels.regions()],
                &[regions, regions],
            ));
        }
    }
    Ok(())
}

/// Trains a freshly initialized model.
pub fn train(examples: &[Example], cfg: &TrainConfig, mcfg: &ModelConfig) -> Result<TrainOutcome> {
    let state = ModelState::init(mcfg, derive_seed(cfg.seed, INIT_STREAM))?;
    train_from(state, examples, cfg, |_, _| {})
}

/// Trains `state` in place of a fresh model; `on_epoch` sees each epoch's
/// index and mean loss.
pub fn train_from(
    mut state: ModelState,
    examples: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_examples(examples, state.config().regions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let mut sgd = Sgd::new(state.params(), cfg);
    let batch = cfg.batch_size.unwrap_or(examples.len()).min(examples.len());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.batch_size.is_some() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let results: Vec<Result<(f64, Gradients)>> = chunk
                .par_iter()
                .map(|&k| example_gradient(&state, &examples[k], cfg))
                .collect();
            let mut total = Gradients::zeros_like(state.params());
            let mut scale = 1.0 / chunk.len() as f64;
            if cfg.node_mean {
                scale /= state.config().regions as f64;
            }
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                total.add_scaled(&grads, scale);
            }
            let frozen: Vec<ParamId> = Task::ALL
                .into_iter()
                .filter(|&t| chunk.iter().all(|&k| !examples[k].labels.is_present(t)))
                .flat_map(|t| state.head_params(t))
                .collect();
            sgd.step(state.params_mut(), &total, &frozen)?;
        }
        let mean = epoch_loss / examples.len() as f64;
        debug!("epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainOutcome { state, history })
}

/// Disjoint train and test patient ids of one fold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Sorts the ids, shuffles them with `seed`, and cuts the result into
/// `folds` contiguous test blocks whose sizes differ by at most one.
pub fn make_folds(ids: &[String], folds: usize, seed: u64) -> Result<Vec<FoldSplit>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    if ids.len() < folds {
        return Err(Error::Config(format!(
            "{} patients cannot fill {folds} folds",
            ids.len()
        )));
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config("patient ids must be unique".into()));
    }
    let mut shuffled = sorted.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, FOLD_STREAM)));
    let (base, extra) = (ids.len() / folds, ids.len() % folds);
    let mut start = 0;
    let mut out = Vec::with_capacity(folds);
    for fold in 0..folds {
        let len = base + usize::from(fold < extra);
        let mut test = shuffled[start..start + len].to_vec();
        test.sort();
        let train = sorted.iter().filter(|id| !test.contains(id)).cloned().collect();
        out.push(FoldSplit { fold, train, test });
        start += len;
    }
    Ok(out)
}

/// Model output and metrics for one held-out patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientEvaluation {
    pub id: String,
    pub prediction: Prediction,
    /// Per task; `None` for tasks the patient did not perform.
    pub metrics: [Option<TaskMetrics>; 4],
}

/// Metrics rank nodes by class probability under `mode`.
pub fn evaluate_patient(state: &ModelState, example: &Example, mode: LossMode) -> Result<PatientEvaluation> {
    let prediction = state.predict_stack(&example.input)?;
    let mut metrics: [Option<TaskMetrics>; 4] = Default::default();
    for task in example.labels.present() {
        let k = task.index();
        let flat: Vec<f64> = prediction.scores[k].iter().flat_map(|&r| mode.probabilities(r)).collect();
        let scores = Tensor::matrix(flat.len() / 3, 3, flat)?;
        let truth = example.labels.get(task).expect("present");
        metrics[k] = Some(compute_metrics(&prediction.labels[k], &scores, truth)?);
    }
    Ok(PatientEvaluation {
        id: example.id.clone(),
        prediction,
        metrics,
    })
}

/// Per-task patient-averaged metrics.
pub fn summarize_patients(patients: &[PatientEvaluation]) -> [Option<Summary>; 4] {
    Task::ALL.map(|t| {
        let m: Vec<TaskMetrics> = patients
            .iter()
            .filter_map(|p| p.metrics[t.index()].clone())
            .collect();
        summarize(&m)
    })
}

#[derive(Clone, Debug)]
pub struct FoldResult {
    pub split: FoldSplit,
    pub state: ModelState,
    pub history: Vec<f64>,
    pub patients: Vec<PatientEvaluation>,
    pub summary: [Option<Summary>; 4],
}

#[derive(Clone, Debug)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    /// Per task, mean over folds where the task was evaluated.
    pub summary: [Option<Summary>; 4],
}

/// Training seed of one fold.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, FOLD_SEED_BASE + fold as u64)
}

/// Trains on each fold's training split and evaluates its test split.
pub fn cross_validate(examples: &[Example], cfg: &TrainConfig, mcfg: &ModelConfig) -> Result<CvReport> {
    cfg.validate()?;
    mcfg.validate()?;
    let ids: Vec<String> = examples.iter().map(|e| e.id.clone()).collect();
    let splits = make_folds(&ids, cfg.folds, cfg.seed)?;
    let by_id: HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut folds = Vec::with_capacity(splits.len());
    for split in splits {
        let pick = |ids: &[String]| -> Vec<Example> { ids.iter().map(|id| by_id[id.as_str()].clone()).collect() };
        let train_set = pick(&split.train);
        let test_set = pick(&split.test);
        let fold_cfg = TrainConfig {
            seed: fold_seed(cfg.seed, split.fold),
            ..cfg.clone()
        };
        let outcome = train(&train_set, &fold_cfg, mcfg)?;
        let patients = test_set
            .iter()
            .map(|ex| evaluate_patient(&outcome.state, ex, cfg.loss_mode))
            .collect::<Result<Vec<_>>>()?;
        let summary = summarize_patients(&patients);
        info!(
            "fold {}: final loss {:.4}, language auc {:?}",
            split.fold,
            outcome.history.last().copied().unwrap_or(f64::NAN),
            summary[0].as_ref().and_then(|s| s.auc)
        );
        folds.push(FoldResult {
            split,
            state: outcome.state,
            history: outcome.history,
            patients,
            summary,
        });
    }
    let summary = Task::ALL.map(|t| {
        let per_fold: Vec<Option<Summary>> = folds.iter().map(|f| f.summary[t.index()].clone()).collect();
        aggregate_cv(&per_fold)
    });
    Ok(CvReport { folds, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64, decays: bool) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let t = Tensor::vector(vec![value]);
        let id = if decays { ps.add("w", t) } else { ps.add_bias("b", t) };
        (ps, id)
    }

    fn step(sgd: &mut Sgd, ps: &mut ParamSet, id: ParamId, v: f64, frozen: &[ParamId]) -> Result<()> {
        let mut g = Gradients::zeros_like(ps);
        g.get_mut(id)[0] = v;
        sgd.step(ps, &g, frozen)
    }

    fn cfg(lr: f64, momentum: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn plain_gradient_descent() {
        let (mut ps, id) = single(1.0, true);
        let mut sgd = Sgd::new(&ps, &cfg(0.1, 0.0, 0.0));
        step(&mut sgd, &mut ps, id, 2.0, &[]).unwrap();
        assert_eq!(ps.get(id).values()[0], 1.0 - 0.1 * 2.0);
    }

    #[test]
    fn momentum_coasts() {
        let (mut ps, id) = single(0.0, true);
        let mut sgd = Sgd::new(&ps, &cfg(0.1, 0.9, 0.0));
        step(&mut sgd, &mut ps, id, 1.0, &[]).unwrap();
        let after_one = ps.get(id).values()[0];
        step(&mut sgd, &mut ps, id, 0.0, &[]).unwrap();
        assert!((ps.get(id).values()[0] - (after_one - 0.1 * 0.9)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let (mut ps, id) = single(0.37, true);
        let mut sgd = Sgd::new(&ps, &cfg(0.0, 0.9, 5e-5));
        step(&mut sgd, &mut ps, id, 3.0, &[]).unwrap();
        assert_eq!(ps.get(id).values()[0], 0.37);
    }

    #[test]
    fn decay_contracts_weights_but_not_biases() {
        let (lr, wd) = (0.5, 0.1);
        for decays in [true, false] {
            let (mut ps, id) = single(2.0, decays);
            let mut sgd = Sgd::new(&ps, &cfg(lr, 0.0, wd));
            let mut expected: f64 = 2.0;
            for _ in 0..10 {
                step(&mut sgd, &mut ps, id, 0.0, &[]).unwrap();
                if decays {
                    expected *= 1.0 - lr * wd;
                }
            }
            assert!((ps.get(id).values()[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn quadratic_bowl_settles() {
        // f(x) = x^2 with the default optimizer settings
        let (mut ps, id) = single(1.0, false);
        let mut sgd = Sgd::new(&ps, &cfg(0.002, 0.9, 0.0));
        let (mut x, mut v) = (1.0f64, 0.0f64);
        let mut xs = Vec::new();
        for _ in 0..300 {
            let p = ps.get(id).values()[0];
            assert_eq!(p, x);
            xs.push(p.abs());
            step(&mut sgd, &mut ps, id, 2.0 * p, &[]).unwrap();
            v = 0.9 * v + 2.0 * x;
            x -= 0.002 * v;
        }
        // complex roots of modulus sqrt(0.9): the sign oscillates but the
        // envelope over successive half-periods shrinks
        let peaks: Vec<f64> = xs
            .chunks(80)
            .map(|c| c.iter().copied().fold(0.0, f64::max))
            .collect();
        assert!(peaks.windows(2).all(|w| w[1] < w[0]), "{peaks:?}");
        assert!(xs[299] < 1e-4);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut ps, id) = single(1.0, true);
        let mut sgd = Sgd::new(&ps, &cfg(0.1, 0.0, 0.0));
        let err = step(&mut sgd, &mut ps, id, f64::NAN, &[]).unwrap_err();
        assert!(matches!(err, Error::Divergence(ref n) if n == "w"));
        assert_eq!(ps.get(id).values()[0], 1.0);
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let (mut ps, id) = single(1.0, true);
        let mut sgd = Sgd::new(&ps, &cfg(0.1, 0.9, 0.1));
        step(&mut sgd, &mut ps, id, 1.0, &[id]).unwrap();
        assert_eq!(ps.get(id).values()[0], 1.0);
        assert_eq!(sgd.velocity(id), &[0.0]);
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|k| format!("p{k:02}")).collect()
    }

    #[test]
    fn sixteen_patients_in_eight_folds() {
        let folds = make_folds(&ids(16), 8, 3).unwrap();
        let mut all: Vec<String> = Vec::new();
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len(), 14);
            assert!(f.test.iter().all(|id| !f.train.contains(id)));
            all.extend(f.test.iter().cloned());
        }
        all.sort();
        assert_eq!(all, ids(16));
    }

    #[test]
    fn folds_ignore_input_order() {
        let mut reversed = ids(11);
        reversed.reverse();
        assert_eq!(make_folds(&ids(11), 4, 9).unwrap(), make_folds(&reversed, 4, 9).unwrap());
        let sizes: Vec<usize> = make_folds(&ids(11), 4, 9).unwrap().iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 2]);
    }

    #[test]
    fn too_few_patients_rejected() {
        assert!(matches!(make_folds(&ids(5), 8, 0), Err(Error::Config(_))));
        let mut dup = ids(4);
        dup.push("p00".into());
        assert!(matches!(make_folds(&dup, 2, 0), Err(Error::Config(_))));
    }
}
