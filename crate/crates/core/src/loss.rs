//! Risk-weighted cross-entropy over attention-aggregated node scores, with
//! tasks that a patient did not perform left out entirely.

use crate::diffcore::{log_sigmoid, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardVars, HeadOutputs, Task, TUMOR};
use crate::connectivity::TumorMask;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How aggregated scores become class log-probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Independent sigmoid per class; only the true class is penalized.
    #[default]
    Literal,
    /// Softmax over the three classes of each node.
    SoftmaxCe,
}

impl LossMode {
    pub const ALL: [LossMode; 2] = [LossMode::Literal, LossMode::SoftmaxCe];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Literal => "literal",
            LossMode::SoftmaxCe => "softmax-ce",
        }
    }

    /// Class probabilities of one node's scores under the link this mode
    /// trains: independent sigmoids, or a softmax over the three classes.
    /// Softmax scores are only defined up to a per-node shift, so metrics
    /// that compare nodes must rank these rather than the raw scores.
    pub fn probabilities(self, scores: [f64; 3]) -> [f64; 3] {
        match self {
            LossMode::Literal => scores.map(|s| 1.0 / (1.0 + (-s).exp())),
            LossMode::SoftmaxCe => {
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e = scores.map(|s| (s - m).exp());
                let z: f64 = e.iter().sum();
                e.map(|v| v / z)
            }
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss mode `{s}`")))
    }
}

/// Per-class penalties, indexed (eloquent, tumor, background).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskWeights {
    pub language: [f64; 3],
    pub motor: [f64; 3],
}

impl Default for RiskWeights {
    fn default() -> Self {
        RiskWeights {
            language: [2.25, 0.5, 0.2],
            motor: [1.5, 0.5, 0.2],
        }
    }
}

impl RiskWeights {
    pub fn validate(&self) -> Result<()> {
        if self
            .language
            .iter()
            .chain(&self.motor)
            .all(|&d| d > 0.0 && d.is_finite())
        {
            Ok(())
        } else {
            Err(Error::Config("risk weights must be positive and finite".into()))
        }
    }

    pub fn for_task(&self, task: Task) -> [f64; 3] {
        if task.is_motor() {
            self.motor
        } else {
            self.language
        }
    }
}

/// One-hot `N x 3` labels per task; `None` marks a task the patient did not
/// perform.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTensor {
    regions: usize,
    tasks: [Option<Tensor>; 4],
}

impl LabelTensor {
    /// Builds one-hot matrices from class ids.
    pub fn from_classes(regions: usize, classes: [Option<Vec<usize>>; 4]) -> Result<Self> {
        let mut tasks: [Option<Tensor>; 4] = Default::default();
        for (slot, cls) in tasks.iter_mut().zip(classes) {
            if let Some(cls) = cls {
                if cls.len() != regions {
                    return Err(Error::Label(format!(
                        "{} class ids for {regions} regions",
                        cls.len()
                    )));
                }
                let mut y = Tensor::zeros(&[regions, 3]);
                for (i, &c) in cls.iter().enumerate() {
                    if c > 2 {
                        return Err(Error::Label(format!("class id {c} out of range")));
                    }
                    y.set(i, c, 1.0);
                }
                *slot = Some(y);
            }
        }
        Ok(LabelTensor { regions, tasks })
    }

    /// Validates and wraps one-hot matrices.
    pub fn new(regions: usize, tasks: [Option<Tensor>; 4]) -> Result<Self> {
        for y in tasks.iter().flatten() {
            check_one_hot(y, regions)?;
        }
        Ok(LabelTensor { regions, tasks })
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn get(&self, task: Task) -> Option<&Tensor> {
        self.tasks[task.index()].as_ref()
    }

    pub fn is_present(&self, task: Task) -> bool {
        self.tasks[task.index()].is_some()
    }

    pub fn present(&self) -> impl Iterator<Item = Task> + '_ {
        Task::ALL.into_iter().filter(|&t| self.is_present(t))
    }

    /// Class id per node for a present task.
    pub fn classes(&self, task: Task) -> Option<Vec<usize>> {
        self.get(task).map(|y| {
            (0..self.regions)
                .map(|i| (0..3).find(|&c| y.at(i, c) == 1.0).expect("one-hot row"))
                .collect()
        })
    }

    /// Every masked region must carry the tumor class in every present task.
    pub fn check_mask(&self, mask: &TumorMask) -> Result<()> {
        mask.validate(self.regions)?;
        for task in self.present() {
            let y = self.get(task).expect("present");
            if let Some(r) = mask.iter().find(|&r| y.at(r, TUMOR) != 1.0) {
                return Err(Error::Label(format!(
                    "masked region {r} is not labeled tumor for {task}"
                )));
            }
        }
        Ok(())
    }

    pub fn without(&self, task: Task) -> Self {
        let mut out = self.clone();
        out.tasks[task.index()] = None;
        out
    }
}

fn check_one_hot(y: &Tensor, regions: usize) -> Result<()> {
    if y.shape() != [regions, 3] {
        return Err(Error::Label(format!(
            "label shape {:?}, expected [{regions}, 3]",
            y.shape()
        )));
    }
    for i in 0..regions {
        let row = y.row(i);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != 2 {
            return Err(Error::Label(format!("row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

/// Loss of one task: `sum_n sum_c -delta_c log p(S)_{n,c} Y_{n,c}`.
pub fn task_loss(aggregated: &Tensor, y: &Tensor, delta: [f64; 3], mode: LossMode) -> Result<f64> {
    let n = aggregated.shape().first().copied().unwrap_or(0);
    if aggregated.shape() != [n, 3] {
        return Err(Error::dim("task_loss scores", aggregated.shape(), &[n, 3]));
    }
    check_one_hot(y, n)?;
    let mut total = 0.0;
    for i in 0..n {
        let s = aggregated.row(i);
        let lse = match mode {
            LossMode::Literal => None,
            LossMode::SoftmaxCe => {
                let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Some(m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln())
            }
        };
        for c in 0..3 {
            if y.at(i, c) == 1.0 {
                let logp = match lse {
                    None => log_sigmoid(s[c]),
                    Some(l) => s[c] - l,
                };
                total -= delta[c] * logp;
            }
        }
    }
    Ok(total)
}

/// Graph form of [`task_loss`].
pub fn task_loss_graph(g: &mut Graph<'_>, scores: Var, y: &Tensor, delta: [f64; 3], mode: LossMode) -> Result<Var> {
    let n = g.shape(scores)[0];
    check_one_hot(y, n)?;
    let logp = match mode {
        LossMode::Literal => g.log_sigmoid(scores),
        LossMode::SoftmaxCe => g.log_softmax(scores, 1)?,
    };
    let w = Tensor::from_fn(&[n, 3], |k| -delta[k % 3] * y.values()[k]);
    let w = g.constant(w);
    let weighted = g.mul(logp, w)?;
    Ok(g.sum(weighted))
}

/// Total loss and its per-task terms; absent tasks have no term.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub per_task: [Option<f64>; 4],
}

/// Sum of the present tasks' losses on graph outputs. Heads of absent tasks
/// are not touched, so they receive exactly zero gradient.
pub fn total_loss_graph(
    g: &mut Graph<'_>,
    vars: &ForwardVars,
    labels: &LabelTensor,
    weights: &RiskWeights,
    mode: LossMode,
) -> Result<(Var, [Option<Var>; 4])> {
    let mut terms: [Option<Var>; 4] = [None; 4];
    let mut total: Option<Var> = None;
    for task in labels.present() {
        let y = labels.get(task).expect("present");
        let term = task_loss_graph(g, vars.aggregated[task.index()], y, weights.for_task(task), mode)?;
        terms[task.index()] = Some(term);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let total = total.ok_or(Error::EmptySupervision)?;
    Ok((total, terms))
}

/// Value-level total loss from head outputs.
pub fn total_loss(
    outputs: &HeadOutputs,
    labels: &LabelTensor,
    weights: &RiskWeights,
    mode: LossMode,
) -> Result<LossBreakdown> {
    let aggregated = crate::model::aggregate_scores(outputs)?;
    let mut per_task = [None; 4];
    let mut total = 0.0;
    for task in labels.present() {
        let y = labels.get(task).expect("present");
        let l = task_loss(&aggregated[task.index()], y, weights.for_task(task), mode)?;
        per_task[task.index()] = Some(l);
        total += l;
    }
    if labels.present().next().is_none() {
        return Err(Error::EmptySupervision);
    }
    Ok(LossBreakdown { total, per_task })
}
