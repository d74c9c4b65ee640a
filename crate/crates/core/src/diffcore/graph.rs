//! Recorded forward pass with reverse-mode adjoint replay.
//!
//! A [`Graph`] is built once per forward pass. Every primitive appends a node
//! holding its output value; [`Graph::backward`] then walks the nodes in
//! reverse, visiting each exactly once, and returns the parameter adjoints.

use std::fmt;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ParamEntry {
    name: String,
    decay: bool,
    tensor: Tensor,
}

/// Named learnable tensors, each carrying its own gradient accumulator.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a weight. Weights take part in weight decay.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    /// Registers a bias, which is excluded from weight decay.
    pub fn add_bias(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, decay: bool) -> ParamId {
        let tensor = if value.requires_grad() {
            value
        } else {
            value.with_grad()
        };
        self.entries.push(ParamEntry {
            name,
            decay,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Adds a full set of adjoints into the per-parameter accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (e, g) in self.entries.iter_mut().zip(&grads.values) {
            e.tensor.accumulate_grad(g);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.tensor.is_finite())
    }
}

/// Parameter adjoints produced by one backward pass, aligned with a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Gradients {
            values: params
                .entries
                .iter()
                .map(|e| vec![0.0; e.tensor.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Per-parameter slices in registration order.
    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.iter().map(Vec::as_slice)
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.values.iter_mut().flatten() {
            *v *= k;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .iter()
            .flatten()
            .fold(0.0, |m: f64, v| m.max(v.abs()))
    }
}

/// Backward rule for an operation implemented outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Writes input adjoints. `grads[k]` is a zeroed buffer shaped like input
    /// `k` when that input needs a gradient, `None` otherwise.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        grads: &mut [Option<Vec<f64>>],
    );
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    LeakyRelu {
        x: Var,
        slope: f64,
        mask: Option<Vec<bool>>,
    },
    Sigmoid(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Columns {
        x: Var,
        start: usize,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom { op, .. } => write!(f, "Custom({})", op.name()),
            Op::Constant => write!(f, "Constant"),
            Op::Param(p) => write!(f, "Param({})", p.0),
            _ => write!(f, "Primitive"),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// How piecewise-linear activations choose their branch.
#[derive(Clone, Debug, Default)]
enum BranchTape {
    /// Branch from the sign of the pre-activation.
    #[default]
    Live,
    /// Like `Live`, but remember every decision.
    Record(Vec<bool>),
    /// Reuse decisions captured by an earlier `Record` pass.
    Replay {
        bits: Vec<bool>,
        cursor: usize,
        overrun: bool,
    },
}

/// Activation branch decisions captured from a recorded forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BranchPattern(Vec<bool>);

impl BranchPattern {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: Option<&'p ParamSet>,
    nodes: Vec<Node>,
    consumed: bool,
    branches: BranchTape,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph over constants only.
    pub fn new() -> Self {
        Graph {
            params: None,
            nodes: Vec::new(),
            consumed: false,
            branches: BranchTape::Live,
        }
    }

    pub fn with_params(params: &'p ParamSet) -> Self {
        Graph {
            params: Some(params),
            ..Self::new()
        }
    }

    /// Graph that records every activation branch taken during the forward pass.
    pub fn recording(params: &'p ParamSet) -> Self {
        Graph {
            branches: BranchTape::Record(Vec::new()),
            ..Self::with_params(params)
        }
    }

    /// Graph whose activations follow a previously recorded branch pattern.
    pub fn replaying(params: &'p ParamSet, pattern: BranchPattern) -> Self {
        Graph {
            branches: BranchTape::Replay {
                bits: pattern.0,
                cursor: 0,
                overrun: false,
            },
            ..Self::with_params(params)
        }
    }

    /// Branch pattern recorded so far (empty unless built with [`Graph::recording`]).
    pub fn branch_pattern(&self) -> BranchPattern {
        match &self.branches {
            BranchTape::Record(bits) => BranchPattern(bits.clone()),
            _ => BranchPattern::default(),
        }
    }

    /// Whether a replayed pattern was consumed exactly.
    pub fn replay_consistent(&self) -> bool {
        match &self.branches {
            BranchTape::Replay {
                bits,
                cursor,
                overrun,
            } => !overrun && *cursor == bits.len(),
            _ => true,
        }
    }

    pub fn tracks_branches(&self) -> bool {
        !matches!(self.branches, BranchTape::Live)
    }

    /// Positive-branch decisions for a batch of pre-activations.
    ///
    /// Returns `None` in live mode, where callers decide with `z >= 0`.
    pub fn branch_mask(&mut self, pre: &[f64]) -> Option<Vec<bool>> {
        match &mut self.branches {
            BranchTape::Live => None,
            BranchTape::Record(bits) => {
                let mask: Vec<bool> = pre.iter().map(|&z| z >= 0.0).collect();
                bits.extend_from_slice(&mask);
                Some(mask)
            }
            BranchTape::Replay {
                bits,
                cursor,
                overrun,
            } => {
                let end = *cursor + pre.len();
                if end > bits.len() {
                    *overrun = true;
                    return Some(pre.iter().map(|&z| z >= 0.0).collect());
                }
                let mask = bits[*cursor..end].to_vec();
                *cursor = end;
                Some(mask)
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.values()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.detached(), Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self
            .params
            .expect("graph was built without a parameter set");
        let value = params.get(id).detached();
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            false,
            self.value(b).values(),
            false,
            0.0,
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let out = va
            .values()
            .iter()
            .zip(vb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), out).expect("shapes checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        Tensor::new(
            va.shape().to_vec(),
            va.values().iter().map(|&x| f(x)).collect(),
        )
        .expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.map(a, |x| k * x);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 2 || sr.len() != 1 || sx[1] != sr[0] {
            return Err(Error::dim("add_row", sx, sr));
        }
        let n = sx[1];
        let r = self.value(row).values().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.values_mut().chunks_exact_mut(n) {
            add_into(chunk, &r);
        }
        let ng = self.needs(x) || self.needs(row);
        Ok(self.push(v, Op::AddRow(x, row), ng))
    }

    /// `x` where `x > 0`, `slope * x` elsewhere. The adjoint at exactly 0 is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let pre = self.value(x).values().to_vec();
        let mask = self.branch_mask(&pre);
        let out: Vec<f64> = match &mask {
            None => pre
                .iter()
                .map(|&z| if z >= 0.0 { z } else { slope * z })
                .collect(),
            Some(m) => pre
                .iter()
                .zip(m)
                .map(|(&z, &p)| if p { z } else { slope * z })
                .collect(),
        };
        let v = Tensor::new(self.shape(x).to_vec(), out).expect("shape preserved");
        let ng = self.needs(x);
        self.push(v, Op::LeakyRelu { x, slope, mask }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, stable_sigmoid);
        let ng = self.needs(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::tanh);
        let ng = self.needs(x);
        self.push(v, Op::Tanh(x), ng)
    }

    /// `log(sigmoid(x))`, computed without forming the sigmoid.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let v = self.map(x, log_sigmoid);
        let ng = self.needs(x);
        self.push(v, Op::LogSigmoid(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut out = self.value(x).values().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| out[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (out[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Softmax { x, axis }, ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut out = self.value(x).values().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| out[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..len)
                        .map(|k| (out[idx(k)] - max).exp())
                        .sum::<f64>()
                        .ln();
                for k in 0..len {
                    out[idx(k)] -= lse;
                }
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::LogSoftmax { x, axis }, ng))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).detached().reshaped(shape)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).transposed()?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Transpose(x), ng))
    }

    /// Columns `start..start + count` of a matrix.
    pub fn columns(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || start + count > s[1] {
            return Err(Error::Shape(format!(
                "columns {start}..{} out of range for {s:?}",
                start + count
            )));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(x).values();
        let mut out = Vec::with_capacity(r * count);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + count]);
        }
        let v = Tensor::new(vec![r, count], out)?;
        let ng = self.needs(x);
        Ok(self.push(v, Op::Columns { x, start }, ng))
    }

    /// Appends a node computed by an external op with its own backward rule.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            output,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            ng,
        )
    }

    /// Replays adjoints from a scalar output back to every parameter.
    ///
    /// Parameters the output does not depend on receive exact zeros. A graph
    /// can be differentiated once; a second call fails.
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        self.consumed = true;

        let mut grads = match self.params {
            Some(p) => Gradients::zeros_like(p),
            None => Gradients { values: Vec::new() },
        };
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        adj.resize_with(self.nodes.len(), || None);
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                let slot = adj[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    for (a, b) in grads.values[id.0].iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                    // dA = G * B^T, dB = A^T * G
                    acc(*a, &mut |s| {
                        gemm(m, n, k, &g, false, vb.values(), true, 1.0, s)
                    });
                    acc(*b, &mut |s| {
                        gemm(k, m, n, va.values(), true, &g, false, 1.0, s)
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.values(), nodes[b.0].value.values());
                    acc(*a, &mut |s| {
                        for ((x, gy), w) in s.iter_mut().zip(&g).zip(vb) {
                            *x += gy * w;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((x, gy), w) in s.iter_mut().zip(&g).zip(va) {
                            *x += gy * w;
                        }
                    });
                }
                Op::Scale(a, k) => {
                    acc(*a, &mut |s| {
                        s.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y)
                    });
                }
                Op::AddRow(x, row) => {
                    let n = nodes[row.0].value.len();
                    acc(*x, &mut |s| add_into(s, &g));
                    acc(*row, &mut |s| {
                        for chunk in g.chunks_exact(n) {
                            add_into(s, chunk);
                        }
                    });
                }
                Op::LeakyRelu { x, slope, mask } => {
                    let pre = nodes[x.0].value.values();
                    acc(*x, &mut |s| match mask {
                        None => {
                            for ((d, gy), z) in s.iter_mut().zip(&g).zip(pre) {
                                *d += gy * if *z >= 0.0 { 1.0 } else { *slope };
                            }
                        }
                        Some(m) => {
                            for ((d, gy), p) in s.iter_mut().zip(&g).zip(m) {
                                *d += if *p { *gy } else { slope * gy };
                            }
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = node.value.values();
                    acc(*x, &mut |s| {
                        for ((d, gy), yv) in s.iter_mut().zip(&g).zip(y) {
                            *d += gy * yv * (1.0 - yv);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.values();
                    acc(*x, &mut |s| {
                        for ((d, gy), yv) in s.iter_mut().zip(&g).zip(y) {
                            *d += gy * (1.0 - yv * yv);
                        }
                    });
                }
                Op::LogSigmoid(x) => {
                    let pre = nodes[x.0].value.values();
                    acc(*x, &mut |s| {
                        for ((d, gy), z) in s.iter_mut().zip(&g).zip(pre) {
                            // d/dz log(sigmoid(z)) = sigmoid(-z)
                            *d += gy * stable_sigmoid(-z);
                        }
                    });
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.values();
                    let (outer, len, inner) =
                        axis_split(node.value.shape(), *axis).expect("validated in forward");
                    acc(*x, &mut |s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |k: usize| (o * len + k) * inner + i;
                                let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                                for k in 0..len {
                                    s[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                                }
                            }
                        }
                    });
                }
                Op::LogSoftmax { x, axis } => {
                    let y = node.value.values();
                    let (outer, len, inner) =
                        axis_split(node.value.shape(), *axis).expect("validated in forward");
                    acc(*x, &mut |s| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let idx = |k: usize| (o * len + k) * inner + i;
                                let total: f64 = (0..len).map(|k| g[idx(k)]).sum();
                                for k in 0..len {
                                    s[idx(k)] += g[idx(k)] - y[idx(k)].exp() * total;
                                }
                            }
                        }
                    });
                }
                Op::Sum(x) => {
                    let gy = g[0];
                    acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += gy));
                }
                Op::Reshape(x) => acc(*x, &mut |s| add_into(s, &g)),
                Op::Transpose(x) => {
                    // node is c x r, input is r x c
                    let (c, r) = (node.value.rows(), node.value.cols());
                    acc(*x, &mut |s| {
                        for i in 0..r {
                            for j in 0..c {
                                s[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Columns { x, start } => {
                    let c = nodes[x.0].value.cols();
                    let (r, count) = (node.value.rows(), node.value.cols());
                    acc(*x, &mut |s| {
                        for i in 0..r {
                            for j in 0..count {
                                s[i * c + start + j] += g[i * count + j];
                            }
                        }
                    });
                }
                Op::Custom { op, inputs } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let mut bufs: Vec<Option<Vec<f64>>> = inputs
                        .iter()
                        .map(|v| {
                            nodes[v.0]
                                .needs_grad
                                .then(|| vec![0.0; nodes[v.0].value.len()])
                        })
                        .collect();
                    op.backward(&ins, &node.value, &g, &mut bufs);
                    for (v, b) in inputs.iter().zip(bufs) {
                        if let Some(b) = b {
                            acc(*v, &mut |s| add_into(s, &b));
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} is invalid for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Logistic function without overflow for large `|x|`.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 / (1 + exp(-x)))`
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
