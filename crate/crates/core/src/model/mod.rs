//! The full network: a convolutional branch over every window's connectivity,
//! a recurrent attention branch over windows, and one scoring head per task.
//!
//! Node scores of each head are produced per window and combined with the
//! attention weights of the task's group (language, or motor for the three
//! motor heads).

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use crate::connectivity::DynamicConnectivity;
use crate::diffcore::{CustomOp, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{self, AttentionPair, WindowStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Classes scored per node, in channel order.
pub const CLASSES: [&str; 3] = ["eloquent", "tumor", "background"];
pub const ELOQUENT: usize = 0;
pub const TUMOR: usize = 1;
pub const BACKGROUND: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Language,
    Finger,
    Foot,
    Tongue,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Language, Task::Finger, Task::Foot, Task::Tongue];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Language => "language",
            Task::Finger => "finger",
            Task::Foot => "foot",
            Task::Tongue => "tongue",
        }
    }

    pub fn is_motor(self) -> bool {
        self != Task::Language
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Proposed,
    MtAnn,
    MtGnnStatic,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Proposed, Variant::MtAnn, Variant::MtGnnStatic];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proposed => "proposed",
            Variant::MtAnn => "mt-ann",
            Variant::MtGnnStatic => "mt-gnn-static",
        }
    }

    /// Whether the variant consumes sliding-window connectivity (as opposed to
    /// one whole-scan matrix).
    pub fn is_dynamic(self) -> bool {
        self != Variant::MtGnnStatic
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub regions: usize,
    pub filters: usize,
    /// Widths of the shared node-wise layers between the convolutional branch
    /// and the heads.
    pub fc_dims: Vec<usize>,
    pub lstm_hidden: usize,
    /// Multiplier applied to negative inputs of the leaky activation.
    pub leaky_slope: f64,
    pub variant: Variant,
    /// E2N filters read every E2E map instead of only their own.
    pub e2n_channel_mixing: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            regions: 90,
            filters: 25,
            fc_dims: vec![64, 32],
            lstm_hidden: 16,
            leaky_slope: -0.1,
            variant: Variant::Proposed,
            e2n_channel_mixing: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.regions < 2 {
            return Err(Error::Config("model needs at least 2 regions".into()));
        }
        if self.filters == 0 || self.lstm_hidden == 0 {
            return Err(Error::Config(
                "filters and lstm_hidden must be positive".into(),
            ));
        }
        if self.fc_dims.is_empty() || self.fc_dims.contains(&0) {
            return Err(Error::Config(
                "fc_dims must be non-empty and positive".into(),
            ));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::Config("leaky_slope must be finite".into()));
        }
        if self.e2n_channel_mixing && self.variant == Variant::MtAnn {
            return Err(Error::Config(
                "e2n_channel_mixing has no effect on the mt-ann variant".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Weight,
    Bias,
    /// LSTM gate bias: forget gate starts at 1.
    GateBias {
        hidden: usize,
    },
}

#[derive(Clone, Debug)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
    kind: Kind,
}

fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Spec {
    Spec {
        name: name.into(),
        shape: shape.to_vec(),
        fan_in,
        kind: Kind::Weight,
    }
}

fn bias(name: impl Into<String>, len: usize) -> Spec {
    Spec {
        name: name.into(),
        shape: vec![len],
        fan_in: 1,
        kind: Kind::Bias,
    }
}

/// Bottleneck width and per-node feature count of the dense replacement for
/// the convolutional branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnnDims {
    pub bottleneck: usize,
    pub node_features: usize,
}

fn specs(cfg: &ModelConfig, ann: Option<AnnDims>) -> Vec<Spec> {
    let (n, f) = (cfg.regions, cfg.filters);
    let mut out = Vec::new();
    let node_features = match ann {
        None => {
            out.push(weight("e2e.row", &[f, n], 2 * n));
            out.push(weight("e2e.col", &[f, n], 2 * n));
            out.push(bias("e2e.bias", f));
            if cfg.e2n_channel_mixing {
                out.push(weight("e2n.filters", &[f, f, n], f * n));
            } else {
                out.push(weight("e2n.filters", &[f, n], n));
            }
            out.push(bias("e2n.bias", f));
            f
        }
        Some(d) => {
            let (k, fa) = (d.bottleneck, d.node_features);
            out.push(weight("ann.in.weight", &[n * n, k], n * n));
            out.push(bias("ann.in.bias", k));
            out.push(weight("ann.out.weight", &[k, n * fa], k));
            out.push(bias("ann.out.bias", n * fa));
            fa
        }
    };
    if cfg.variant.is_dynamic() {
        out.push(weight("n2g.filters", &[node_features, n], n));
        out.push(bias("n2g.bias", node_features));
        let mut input = node_features;
        for (l, hidden) in [cfg.lstm_hidden, 2].into_iter().enumerate() {
            out.push(weight(
                format!("lstm{l}.input"),
                &[input, 4 * hidden],
                input + hidden,
            ));
            out.push(weight(
                format!("lstm{l}.recurrent"),
                &[hidden, 4 * hidden],
                input + hidden,
            ));
            out.push(Spec {
                name: format!("lstm{l}.bias"),
                shape: vec![4 * hidden],
                fan_in: 1,
                kind: Kind::GateBias { hidden },
            });
            input = hidden;
        }
    }
    let mut width = node_features;
    for (l, &d) in cfg.fc_dims.iter().enumerate() {
        out.push(weight(format!("fc{l}.weight"), &[width, d], width));
        out.push(bias(format!("fc{l}.bias"), d));
        width = d;
    }
    for task in Task::ALL {
        out.push(weight(format!("head.{task}.weight"), &[width, 3], width));
        out.push(bias(format!("head.{task}.bias"), 3));
    }
    out
}

fn count(specs: &[Spec]) -> usize {
    specs
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// Parameter count of the convolutional model with the same configuration.
fn reference_count(cfg: &ModelConfig) -> usize {
    let reference = ModelConfig {
        variant: Variant::Proposed,
        ..cfg.clone()
    };
    count(&specs(&reference, None))
}

/// Sizes the dense branch so the whole model's parameter count lands within 5%
/// of the proposed model's. Prefers the widest bottleneck that can still match,
/// then the closest count.
pub fn ann_dims(cfg: &ModelConfig) -> Result<AnnDims> {
    let target = reference_count(cfg) as f64;
    let ann_cfg = ModelConfig {
        variant: Variant::MtAnn,
        e2n_channel_mixing: false,
        ..cfg.clone()
    };
    for bottleneck in (1..=64).rev() {
        let best = (1..=4 * cfg.filters.max(8))
            .map(|node_features| {
                let d = AnnDims {
                    bottleneck,
                    node_features,
                };
                let c = count(&specs(&ann_cfg, Some(d))) as f64;
                (((c - target) / target).abs(), d)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if let Some((gap, d)) = best {
            if gap <= 0.05 {
                return Ok(d);
            }
        }
    }
    Err(Error::Config(format!(
        "no dense branch matches the {target} parameters of the proposed model within 5%"
    )))
}

#[derive(Clone, Copy, Debug)]
struct Layer {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Layout {
    conv: Option<[ParamId; 5]>,
    ann: Option<(Layer, Layer, AnnDims)>,
    n2g: Option<Layer>,
    lstm: Vec<[ParamId; 3]>,
    fc: Vec<Layer>,
    heads: [Layer; 4],
}

impl Layout {
    fn resolve(params: &ParamSet, cfg: &ModelConfig, ann: Option<AnnDims>) -> Result<Self> {
        let id = |name: &str| {
            params
                .find(name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))
        };
        let layer = |w: &str, b: &str| -> Result<Layer> {
            Ok(Layer {
                w: id(w)?,
                b: id(b)?,
            })
        };
        let conv = match ann {
            None => Some([
                id("e2e.row")?,
                id("e2e.col")?,
                id("e2e.bias")?,
                id("e2n.filters")?,
                id("e2n.bias")?,
            ]),
            Some(_) => None,
        };
        let ann = match ann {
            Some(d) => Some((
                layer("ann.in.weight", "ann.in.bias")?,
                layer("ann.out.weight", "ann.out.bias")?,
                d,
            )),
            None => None,
        };
        let (n2g, lstm) = if cfg.variant.is_dynamic() {
            let lstm = (0..2)
                .map(|l| {
                    Ok([
                        id(&format!("lstm{l}.input"))?,
                        id(&format!("lstm{l}.recurrent"))?,
                        id(&format!("lstm{l}.bias"))?,
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(layer("n2g.filters", "n2g.bias")?), lstm)
        } else {
            (None, Vec::new())
        };
        let fc = (0..cfg.fc_dims.len())
            .map(|l| layer(&format!("fc{l}.weight"), &format!("fc{l}.bias")))
            .collect::<Result<Vec<_>>>()?;
        let mut heads = Vec::with_capacity(4);
        for task in Task::ALL {
            heads.push(layer(
                &format!("head.{task}.weight"),
                &format!("head.{task}.bias"),
            )?);
        }
        Ok(Layout {
            conv,
            ann,
            n2g,
            lstm,
            fc,
            heads: [heads[0], heads[1], heads[2], heads[3]],
        })
    }
}

/// Trainable parameters together with the configuration that shapes them.
#[derive(Clone, Debug)]
pub struct ModelState {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Per task, window-wise node scores `T*N x 3`.
    pub scores: [Var; 4],
    /// Attention `T x 2` (language, motor); `None` for the static variant.
    pub attention: Option<Var>,
    /// Per task, attention-weighted scores `N x 3`.
    pub aggregated: [Var; 4],
}

/// Per-window head scores and attention of one scan.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs {
    /// Per task (in [`Task::ALL`] order), a `T x N x 3` tensor.
    pub scores: Vec<Tensor>,
    pub attention: AttentionPair,
}

impl HeadOutputs {
    pub fn windows(&self) -> usize {
        self.attention.windows()
    }
}

/// Model output for one scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Per task, `N` rows of 3 aggregated class scores.
    pub scores: Vec<Vec<[f64; 3]>>,
    /// Per task, predicted class per node.
    pub labels: Vec<Vec<usize>>,
    pub attention: AttentionPair,
}

impl ModelState {
    /// Freshly initialized parameters: weights uniform in `+-1/sqrt(fan_in)`,
    /// biases zero except LSTM forget gates at one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ann = match config.variant {
            Variant::MtAnn => Some(ann_dims(config)?),
            _ => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in specs(config, ann) {
            let len: usize = spec.shape.iter().product();
            match spec.kind {
                Kind::Weight => {
                    let r = 1.0 / (spec.fan_in as f64).sqrt();
                    let values = (0..len).map(|_| rng.random_range(-r..=r)).collect();
                    params.add(spec.name, Tensor::new(spec.shape, values)?);
                }
                Kind::Bias => {
                    params.add_bias(spec.name, Tensor::zeros(&spec.shape));
                }
                Kind::GateBias { hidden } => {
                    let mut t = Tensor::zeros(&spec.shape);
                    t.values_mut()[hidden..2 * hidden].fill(1.0);
                    params.add_bias(spec.name, t);
                }
            }
        }
        let layout = Layout::resolve(&params, config, ann)?;
        Ok(ModelState {
            config: config.clone(),
            params,
            layout,
        })
    }

    /// Rebuilds a state from stored parameters, checking names and shapes.
    pub(crate) fn from_parts(config: ModelConfig, stored: Vec<(String, Tensor)>) -> Result<Self> {
        let mut state = ModelState::init(&config, 0)?;
        if stored.len() != state.params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                state.params.len(),
                stored.len()
            )));
        }
        for (name, tensor) in stored {
            let id = state
                .params
                .find(&name)
                .ok_or_else(|| Error::Format(format!("unexpected parameter `{name}`")))?;
            if state.params.get(id).shape() != tensor.shape() {
                return Err(Error::dim(
                    "checkpoint parameter",
                    tensor.shape(),
                    state.params.get(id).shape(),
                ));
            }
            *state.params.get_mut(id) = tensor;
        }
        Ok(state)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_values()
    }

    pub fn ann_dims(&self) -> Option<AnnDims> {
        self.layout.ann.map(|(_, _, d)| d)
    }

    /// Weight and bias of one task's head.
    pub fn head_params(&self, task: Task) -> [ParamId; 2] {
        let h = self.layout.heads[task.index()];
        [h.w, h.b]
    }

    /// Builds the forward pass for one scan on `g`, which must be bound to
    /// this state's parameters.
    pub fn forward_graph(&self, g: &mut Graph<'_>, input: &WindowStack) -> Result<ForwardVars> {
        let cfg = &self.config;
        let (n, t) = (input.regions(), input.windows());
        if n != cfg.regions {
            return Err(Error::dim("model input regions", &[n], &[cfg.regions]));
        }
        if !cfg.variant.is_dynamic() && t != 1 {
            return Err(Error::dim("static model windows", &[t], &[1]));
        }
        let slope = cfg.leaky_slope;
        let lay = &self.layout;

        let nodes = match (&lay.conv, &lay.ann) {
            (Some(ids), _) => {
                let [r, c, b, k, p] = ids.map(|id| g.param(id));
                if cfg.e2n_channel_mixing {
                    unfused_nodes(g, input, [r, c, b, k, p], slope)?
                } else {
                    layers::edge_to_node_stack(g, input, r, c, b, k, p, slope)?
                }
            }
            (None, Some((l_in, l_out, d))) => {
                let x = g.constant(Tensor::new(vec![t, n * n], input.values().to_vec())?);
                let (w, b) = (g.param(l_in.w), g.param(l_in.b));
                let h = layers::dense(g, x, w, b, Some(slope))?;
                let (w, b) = (g.param(l_out.w), g.param(l_out.b));
                let h = layers::dense(g, h, w, b, Some(slope))?;
                g.reshape(h, &[t * n, d.node_features])?
            }
            (None, None) => unreachable!("layout always has a node branch"),
        };

        let attention = match &lay.n2g {
            Some(n2g) => {
                let (k, d) = (g.param(n2g.w), g.param(n2g.b));
                let q = layers::node_to_graph_stack(g, nodes, k, d, slope)?;
                let stack: Vec<(Var, Var, Var)> = lay
                    .lstm
                    .iter()
                    .map(|ids| (g.param(ids[0]), g.param(ids[1]), g.param(ids[2])))
                    .collect();
                Some(layers::lstm_attention_graph(g, q, &stack)?)
            }
            None => None,
        };

        let mut h = nodes;
        for l in &lay.fc {
            let (w, b) = (g.param(l.w), g.param(l.b));
            h = layers::dense(g, h, w, b, Some(slope))?;
        }
        let mut scores = Vec::with_capacity(4);
        let mut aggregated = Vec::with_capacity(4);
        for task in Task::ALL {
            let head = lay.heads[task.index()];
            let (w, b) = (g.param(head.w), g.param(head.b));
            let s = layers::dense(g, h, w, b, None)?;
            scores.push(s);
            let agg = match attention {
                Some(a) => {
                    // S = sum_t a[t] * scores_t, as a (1 x T) (T x 3N) product
                    let col = g.columns(a, usize::from(task.is_motor()), 1)?;
                    let row = g.transpose(col)?;
                    let flat = g.reshape(s, &[t, n * 3])?;
                    let agg = g.matmul(row, flat)?;
                    g.reshape(agg, &[n, 3])?
                }
                None => s,
            };
            aggregated.push(agg);
        }
        Ok(ForwardVars {
            scores: [scores[0], scores[1], scores[2], scores[3]],
            attention,
            aggregated: [aggregated[0], aggregated[1], aggregated[2], aggregated[3]],
        })
    }

    /// Connectivity in the form this variant consumes.
    pub fn check_input(&self, dc: &DynamicConnectivity) -> Result<WindowStack> {
        if dc.regions() != self.config.regions {
            return Err(Error::dim(
                "model input regions",
                &[dc.regions()],
                &[self.config.regions],
            ));
        }
        WindowStack::new(dc.matrices())
    }

    /// Window-wise head scores and attention.
    pub fn forward(&self, dc: &DynamicConnectivity) -> Result<HeadOutputs> {
        self.forward_stack(&self.check_input(dc)?)
    }

    pub fn forward_stack(&self, input: &WindowStack) -> Result<HeadOutputs> {
        let (t, n) = (input.windows(), input.regions());
        let mut g = Graph::with_params(&self.params);
        let vars = self.forward_graph(&mut g, input)?;
        let scores = vars
            .scores
            .iter()
            .map(|&v| g.value(v).clone().reshaped(&[t, n, 3]))
            .collect::<Result<Vec<_>>>()?;
        let attention = match vars.attention {
            Some(a) => AttentionPair::from_columns(g.value(a))?,
            None => AttentionPair {
                language: vec![1.0],
                motor: vec![1.0],
            },
        };
        Ok(HeadOutputs { scores, attention })
    }

    /// Aggregated scores, predicted classes and attention for one scan.
    pub fn predict(&self, dc: &DynamicConnectivity) -> Result<Prediction> {
        self.predict_stack(&self.check_input(dc)?)
    }

    pub fn predict_stack(&self, input: &WindowStack) -> Result<Prediction> {
        let outputs = self.forward_stack(input)?;
        let aggregated = aggregate_scores(&outputs)?;
        let scores: Vec<Vec<[f64; 3]>> = aggregated
            .iter()
            .map(|s| {
                (0..s.rows())
                    .map(|i| [s.at(i, 0), s.at(i, 1), s.at(i, 2)])
                    .collect()
            })
            .collect();
        let labels = aggregated
            .iter()
            .map(predict_labels)
            .collect::<Result<Vec<_>>>()?;
        Ok(Prediction {
            scores,
            labels,
            attention: outputs.attention,
        })
    }
}

/// Per-window E2E then channel-mixing E2N, stacked into `T*N x F`.
fn unfused_nodes(g: &mut Graph<'_>, input: &WindowStack, p: [Var; 5], slope: f64) -> Result<Var> {
    let n = input.regions();
    let mut parts = Vec::with_capacity(input.windows());
    for t in 0..input.windows() {
        let w = input.values()[t * n * n..(t + 1) * n * n].to_vec();
        let w = g.constant(Tensor::matrix(n, n, w)?);
        let h = layers::e2e(g, w, p[0], p[1], p[2], slope)?;
        let u = layers::e2n(g, h, p[3], p[4], slope)?;
        parts.push(g.transpose(u)?);
    }
    concat_rows(g, &parts)
}

struct ConcatRows {
    rows: Vec<usize>,
    cols: usize,
}

impl CustomOp for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let mut start = 0;
        for (slot, &r) in grads.iter_mut().zip(&self.rows) {
            let len = r * self.cols;
            if let Some(d) = slot.as_mut() {
                d.iter_mut()
                    .zip(&gy[start..start + len])
                    .for_each(|(a, b)| *a += b);
            }
            start += len;
        }
    }
}

fn concat_rows(g: &mut Graph<'_>, parts: &[Var]) -> Result<Var> {
    let cols = g.shape(parts[0])[1];
    let mut rows = Vec::with_capacity(parts.len());
    let mut values = Vec::new();
    for &p in parts {
        let s = g.shape(p);
        if s.len() != 2 || s[1] != cols {
            return Err(Error::dim("concat_rows", s, &[s[0], cols]));
        }
        rows.push(s[0]);
        values.extend_from_slice(g.value(p).values());
    }
    let total = rows.iter().sum();
    let out = Tensor::matrix(total, cols, values)?;
    Ok(g.custom(Box::new(ConcatRows { rows, cols }), parts, out))
}

/// Attention-weighted scores per task: language by `a^l`, motor heads by `a^m`.
pub fn aggregate_scores(outputs: &HeadOutputs) -> Result<Vec<Tensor>> {
    let t = outputs.windows();
    outputs
        .scores
        .iter()
        .zip(Task::ALL)
        .map(|(s, task)| {
            let shape = s.shape();
            if shape.len() != 3 || shape[0] != t || shape[2] != 3 {
                return Err(Error::dim("head scores", shape, &[t, 0, 3]));
            }
            let n = shape[1];
            let a = if task.is_motor() {
                &outputs.attention.motor
            } else {
                &outputs.attention.language
            };
            let mut agg = vec![0.0; n * 3];
            for (k, &w) in a.iter().enumerate() {
                for (dst, v) in agg.iter_mut().zip(&s.values()[k * n * 3..(k + 1) * n * 3]) {
                    *dst += w * v;
                }
            }
            Tensor::matrix(n, 3, agg)
        })
        .collect()
}

/// Argmax class per node; ties go to the lowest class index.
pub fn predict_labels(scores: &Tensor) -> Result<Vec<usize>> {
    if scores.rank() != 2 || scores.cols() != 3 {
        return Err(Error::dim("predict_labels", scores.shape(), &[0, 3]));
    }
    if !scores.is_finite() {
        return Err(Error::Shape("non-finite scores".into()));
    }
    Ok((0..scores.rows())
        .map(|i| {
            let row = scores.row(i);
            let mut best = 0;
            for c in 1..3 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            regions: 8,
            filters: 2,
            fc_dims: vec![6, 4],
            lstm_hidden: 3,
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn e2e_weight_count_at_full_atlas() {
        let cfg = ModelConfig {
            regions: 384,
            ..ModelConfig::default()
        };
        let s = specs(&cfg, None);
        let e2e: usize = s
            .iter()
            .filter(|p| p.name.starts_with("e2e."))
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(e2e, 19_225);
    }

    #[test]
    fn ann_matches_parameter_count() {
        for cfg in [ModelConfig::default(), small(Variant::MtAnn)] {
            let cfg = ModelConfig {
                variant: Variant::MtAnn,
                ..cfg
            };
            let ann = ModelState::init(&cfg, 1).unwrap();
            let reference = reference_count(&cfg) as f64;
            let gap = (ann.parameter_count() as f64 - reference).abs() / reference;
            assert!(gap <= 0.05, "gap {gap}");
        }
    }

    #[test]
    fn init_is_seeded_and_forget_bias_is_one() {
        let cfg = small(Variant::Proposed);
        let a = ModelState::init(&cfg, 5).unwrap();
        let b = ModelState::init(&cfg, 5).unwrap();
        let c = ModelState::init(&cfg, 6).unwrap();
        let vals = |s: &ModelState| -> Vec<f64> {
            s.params()
                .ids()
                .flat_map(|id| s.params().get(id).values().to_vec())
                .collect()
        };
        assert_eq!(vals(&a), vals(&b));
        assert_ne!(vals(&a), vals(&c));
        let id = a.params().find("lstm0.bias").unwrap();
        let h = cfg.lstm_hidden;
        assert!(a.params().get(id).values()[h..2 * h]
            .iter()
            .all(|&v| v == 1.0));
        assert!(!a.params().decays(id));
    }

    #[test]
    fn tie_break_prefers_lowest_class() {
        let s = Tensor::matrix(3, 3, vec![2.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 3.0, 3.0]).unwrap();
        assert_eq!(predict_labels(&s).unwrap(), vec![0, 0, 1]);
    }

    #[test]
    fn unknown_variant_is_config_error() {
        assert!(matches!("mt-cnn".parse::<Variant>(), Err(Error::Config(_))));
        assert_eq!(
            "mt-gnn-static".parse::<Variant>().unwrap(),
            Variant::MtGnnStatic
        );
    }
}
