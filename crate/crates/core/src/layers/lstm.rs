//! Stacked LSTM producing per-window attention weights.
//!
//! Gates are packed `[input, forget, cell, output]` along the last axis of the
//! weight matrices. Hidden and cell states start at zero.

use crate::diffcore::{gemm, stable_sigmoid, CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// `I x 4H`
    pub input_weights: Tensor,
    /// `H x 4H`
    pub recurrent_weights: Tensor,
    /// `4H`
    pub bias: Tensor,
}

impl LstmLayerParams {
    pub fn hidden(&self) -> usize {
        self.recurrent_weights.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub layers: Vec<LstmLayerParams>,
}

/// Attention over windows for the two task groups; each vector sums to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPair {
    pub language: Vec<f64>,
    pub motor: Vec<f64>,
}

impl AttentionPair {
    /// Splits a `T x 2` column-softmaxed matrix.
    pub fn from_columns(a: &Tensor) -> Result<Self> {
        if a.rank() != 2 || a.cols() != 2 {
            return Err(Error::dim("attention", a.shape(), &[a.shape()[0], 2]));
        }
        let t = a.rows();
        Ok(AttentionPair {
            language: (0..t).map(|k| a.at(k, 0)).collect(),
            motor: (0..t).map(|k| a.at(k, 1)).collect(),
        })
    }

    pub fn windows(&self) -> usize {
        self.language.len()
    }
}

struct LstmLayer {
    steps: usize,
    input: usize,
    hidden: usize,
    /// Activated gates per step, `T x 4H`.
    gates: Vec<f64>,
    /// Cell states per step, `T x H`.
    cells: Vec<f64>,
}

impl CustomOp for LstmLayer {
    fn name(&self) -> &'static str {
        "lstm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (t_len, d_in, h) = (self.steps, self.input, self.hidden);
        let h4 = 4 * h;
        let (x, wh) = (inputs[0].values(), inputs[2].values());
        let hs = out.values();
        let mut dz = vec![0.0; t_len * h4];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..t_len).rev() {
            let gate = &self.gates[t * h4..(t + 1) * h4];
            let dzt = &mut dz[t * h4..(t + 1) * h4];
            for u in 0..h {
                let (ig, fg, cg, og) = (gate[u], gate[h + u], gate[2 * h + u], gate[3 * h + u]);
                let c = self.cells[t * h + u];
                let c_prev = if t > 0 {
                    self.cells[(t - 1) * h + u]
                } else {
                    0.0
                };
                let tc = c.tanh();
                let dh = gy[t * h + u] + dh_next[u];
                let dc = dh * og * (1.0 - tc * tc) + dc_next[u];
                dzt[u] = dc * cg * ig * (1.0 - ig);
                dzt[h + u] = dc * c_prev * fg * (1.0 - fg);
                dzt[2 * h + u] = dc * ig * (1.0 - cg * cg);
                dzt[3 * h + u] = dh * tc * og * (1.0 - og);
                dc_next[u] = dc * fg;
            }
            // dh_{t-1} = dz_t wh^T
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            gemm(1, h4, h, dzt, false, wh, true, 0.0, &mut dh_next);
        }
        if let Some(dx) = grads[0].as_mut() {
            gemm(
                t_len,
                h4,
                d_in,
                &dz,
                false,
                inputs[1].values(),
                true,
                1.0,
                dx,
            );
        }
        if let Some(dwx) = grads[1].as_mut() {
            gemm(d_in, t_len, h4, x, true, &dz, false, 1.0, dwx);
        }
        if let Some(dwh) = grads[2].as_mut() {
            // previous hidden states; the first is zero
            if t_len > 1 {
                gemm(
                    h,
                    t_len - 1,
                    h4,
                    &hs[..(t_len - 1) * h],
                    true,
                    &dz[h4..],
                    false,
                    1.0,
                    dwh,
                );
            }
        }
        if let Some(db) = grads[3].as_mut() {
            for t in 0..t_len {
                for (d, v) in db.iter_mut().zip(&dz[t * h4..(t + 1) * h4]) {
                    *d += v;
                }
            }
        }
    }
}

/// One LSTM layer over a `T x I` sequence; output is the hidden sequence `T x H`.
pub fn lstm_layer(g: &mut Graph<'_>, x: Var, wx: Var, wh: Var, b: Var) -> Result<Var> {
    let sx = g.shape(x).to_vec();
    if sx.len() != 2 || sx[0] == 0 {
        return Err(Error::EmptySequence("lstm input has no steps"));
    }
    let (t_len, d_in) = (sx[0], sx[1]);
    let sh = g.shape(wh).to_vec();
    if sh.len() != 2 || sh[1] != 4 * sh[0] || sh[0] == 0 {
        return Err(Error::Shape(format!(
            "recurrent weights must be H x 4H, got {sh:?}"
        )));
    }
    let h = sh[0];
    let h4 = 4 * h;
    if g.shape(wx) != [d_in, h4] {
        return Err(Error::dim("lstm input weights", g.shape(wx), &[d_in, h4]));
    }
    if g.shape(b) != [h4] {
        return Err(Error::dim("lstm bias", g.shape(b), &[h4]));
    }

    // input contributions for every step at once
    let mut z = vec![0.0; t_len * h4];
    gemm(
        t_len,
        d_in,
        h4,
        g.value(x).values(),
        false,
        g.value(wx).values(),
        false,
        0.0,
        &mut z,
    );
    let (whv, bv) = (g.value(wh).values(), g.value(b).values());
    let mut hs = vec![0.0; t_len * h];
    let mut cells = vec![0.0; t_len * h];
    for t in 0..t_len {
        let zt = &mut z[t * h4..(t + 1) * h4];
        for (v, bb) in zt.iter_mut().zip(bv) {
            *v += bb;
        }
        if t > 0 {
            gemm(
                1,
                h,
                h4,
                &hs[(t - 1) * h..t * h],
                false,
                whv,
                false,
                1.0,
                zt,
            );
        }
        for u in 0..h {
            zt[u] = stable_sigmoid(zt[u]);
            zt[h + u] = stable_sigmoid(zt[h + u]);
            zt[2 * h + u] = zt[2 * h + u].tanh();
            zt[3 * h + u] = stable_sigmoid(zt[3 * h + u]);
            let c_prev = if t > 0 { cells[(t - 1) * h + u] } else { 0.0 };
            let c = zt[h + u] * c_prev + zt[u] * zt[2 * h + u];
            cells[t * h + u] = c;
            hs[t * h + u] = zt[3 * h + u] * c.tanh();
        }
    }
    let out = Tensor::matrix(t_len, h, hs)?;
    let op = LstmLayer {
        steps: t_len,
        input: d_in,
        hidden: h,
        gates: z,
        cells,
    };
    Ok(g.custom(Box::new(op), &[x, wx, wh, b], out))
}

/// Runs the stack over `q` (`T x F`) and softmaxes its `T x 2` output over the
/// window axis, so each column is a distribution over windows.
pub fn lstm_attention_graph(g: &mut Graph<'_>, q: Var, layers: &[(Var, Var, Var)]) -> Result<Var> {
    let mut x = q;
    for &(wx, wh, b) in layers {
        x = lstm_layer(g, x, wx, wh, b)?;
    }
    if g.shape(x)[1] != 2 {
        return Err(Error::dim(
            "attention output",
            g.shape(x),
            &[g.shape(x)[0], 2],
        ));
    }
    g.softmax(x, 0)
}

/// Value-level attention for a `T x F` sequence of graph summaries.
pub fn lstm_attention(q: &Tensor, params: &LstmParams) -> Result<AttentionPair> {
    if params.layers.is_empty() {
        return Err(Error::Shape("lstm needs at least one layer".into()));
    }
    let mut g = Graph::new();
    let qv = g.constant(q.clone());
    let layers: Vec<(Var, Var, Var)> = params
        .layers
        .iter()
        .map(|l| {
            (
                g.constant(l.input_weights.clone()),
                g.constant(l.recurrent_weights.clone()),
                g.constant(l.bias.clone()),
            )
        })
        .collect();
    let a = lstm_attention_graph(&mut g, qv, &layers)?;
    AttentionPair::from_columns(g.value(a))
}
