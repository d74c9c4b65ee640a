//! E2E followed by channel-wise E2N, fused over a stack of windows.
//!
//! For one window `t` and filter `k` the E2E pre-activation is the outer sum
//! `z[i,j] = a[i] + b[j]` with `a = R[(t,.),k]` and `b = C[(t,.),k] + beta[k]`,
//! and E2N reduces `U[i] = sum_j g[j] phi(z[i,j]) + p[k]`, so the `N x N` maps
//! exist only inside the pair loops.
//!
//! When the graph tracks branch decisions a scalar loop reads the recorded
//! per-pair branches instead of the vectorized kernels.

use super::conv::filter_bank;
use super::kernel::{pair_backward, pair_forward};
use crate::diffcore::{gemm, CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use std::sync::Arc;

/// Connectivity matrices of one scan stacked row-wise into `T*N x N`, shared
/// cheaply between graphs.
#[derive(Clone, Debug)]
pub struct WindowStack {
    n: usize,
    windows: usize,
    stack: Arc<Vec<f64>>,
    /// Block-transposed stack; `None` when every matrix is symmetric.
    transposed: Option<Arc<Vec<f64>>>,
}

impl WindowStack {
    pub fn new(mats: &[Tensor]) -> Result<Self> {
        let n = mats
            .first()
            .map(|m| m.shape()[0])
            .ok_or(Error::EmptySequence("no windows"))?;
        let mut stack = Vec::with_capacity(mats.len() * n * n);
        let mut symmetric = true;
        for m in mats {
            if m.shape() != [n, n] {
                return Err(Error::dim("window stack", m.shape(), &[n, n]));
            }
            symmetric &= (0..n).all(|i| (0..i).all(|j| m.at(i, j) == m.at(j, i)));
            stack.extend_from_slice(m.values());
        }
        let transposed = if symmetric {
            None
        } else {
            let mut tr = Vec::with_capacity(stack.len());
            for m in mats {
                tr.extend_from_slice(m.transposed()?.values());
            }
            Some(Arc::new(tr))
        };
        Ok(WindowStack {
            n,
            windows: mats.len(),
            stack: Arc::new(stack),
            transposed,
        })
    }

    pub fn regions(&self) -> usize {
        self.n
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    /// Matrices of the stack, row-major and concatenated.
    pub fn values(&self) -> &[f64] {
        &self.stack
    }

    fn stack_t(&self) -> &[f64] {
        self.transposed.as_deref().unwrap_or(&self.stack)
    }
}

struct FusedEdgeToNode {
    windows: usize,
    n: usize,
    filters: usize,
    slope: f64,
    input: WindowStack,
    /// Row terms `R[(t,i),k] = sum_m r[k,m] W_t[i,m]`, `T*N x F`.
    rows: Vec<f64>,
    /// Column terms `C[(t,j),k] = sum_m c[k,m] W_t[m,j]`, `T*N x F`.
    cols: Vec<f64>,
    /// Per-pair branch decisions, present only when the graph tracks them.
    mask: Option<Vec<bool>>,
}

impl FusedEdgeToNode {
    fn gather(&self, src: &[f64], t: usize, k: usize, dst: &mut [f64]) {
        let (n, f) = (self.n, self.filters);
        for (i, d) in dst.iter_mut().enumerate() {
            *d = src[(t * n + i) * f + k];
        }
    }

    /// Row terms and shifted column terms for one `(t, k)`.
    fn sides(&self, rv: &[f64], cv: &[f64], beta: f64, t: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = vec![0.0; self.n];
        let mut b = vec![0.0; self.n];
        self.gather(rv, t, k, &mut a);
        self.gather(cv, t, k, &mut b);
        b.iter_mut().for_each(|v| *v += beta);
        (a, b)
    }

    fn forward(&self, rv: &[f64], cv: &[f64], bv: &[f64], gv: &[f64], pv: &[f64]) -> Vec<f64> {
        let (n, f, s) = (self.n, self.filters, self.slope);
        let mut u = vec![0.0; self.windows * n * f];
        for t in 0..self.windows {
            for k in 0..f {
                let (a, b) = self.sides(rv, cv, bv[k], t, k);
                let gk = &gv[k * n..(k + 1) * n];
                match &self.mask {
                    None => {
                        let mut out = vec![0.0; n];
                        pair_forward(&a, &b, gk, s, &mut out);
                        for (i, v) in out.into_iter().enumerate() {
                            u[(t * n + i) * f + k] = v + pv[k];
                        }
                    }
                    Some(mask) => {
                        for i in 0..n {
                            let off = ((t * f + k) * n + i) * n;
                            let acc: f64 = (0..n)
                                .map(|j| {
                                    let z = a[i] + b[j];
                                    gk[j] * if mask[off + j] { z } else { s * z }
                                })
                                .sum();
                            u[(t * n + i) * f + k] = acc + pv[k];
                        }
                    }
                }
            }
        }
        u
    }
}

impl CustomOp for FusedEdgeToNode {
    fn name(&self) -> &'static str {
        "e2e_e2n_fused"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, f, s) = (self.n, self.filters, self.slope);
        let (rv, cv) = (&self.rows, &self.cols);
        let (bv, gv) = (inputs[2].values(), inputs[3].values());
        let tn = self.windows * n;
        let mut da_all = vec![0.0; self.windows * n * f];
        let mut db_all = vec![0.0; self.windows * n * f];
        let mut dbeta = vec![0.0; f];
        let mut dg = vec![0.0; f * n];
        let mut dp = vec![0.0; f];
        let mut du = vec![0.0; n];
        for t in 0..self.windows {
            for k in 0..f {
                let (a, b) = self.sides(rv, cv, bv[k], t, k);
                self.gather(gy, t, k, &mut du);
                let gk = &gv[k * n..(k + 1) * n];
                let dgk = &mut dg[k * n..(k + 1) * n];
                let mut da = vec![0.0; n];
                let mut db = vec![0.0; n];
                match &self.mask {
                    None => pair_backward(&a, &b, gk, &du, s, &mut da, &mut db, dgk),
                    Some(mask) => {
                        for i in 0..n {
                            let off = ((t * f + k) * n + i) * n;
                            let mut acc = 0.0;
                            for j in 0..n {
                                let z = a[i] + b[j];
                                let d1 = if mask[off + j] { 1.0 } else { s };
                                acc += gk[j] * d1;
                                db[j] += du[i] * gk[j] * d1;
                                dgk[j] += du[i] * d1 * z;
                            }
                            da[i] = du[i] * acc;
                        }
                    }
                }
                dp[k] += du.iter().sum::<f64>();
                dbeta[k] += da.iter().sum::<f64>();
                for i in 0..n {
                    da_all[(t * n + i) * f + k] = da[i];
                    db_all[(t * n + i) * f + k] = db[i];
                }
            }
        }
        // dr = dR^T stack, dc = dC^T stack_t
        if let Some(dr) = grads[0].as_mut() {
            gemm(f, tn, n, &da_all, true, &self.input.stack, false, 1.0, dr);
        }
        if let Some(dc) = grads[1].as_mut() {
            gemm(
                f,
                tn,
                n,
                &db_all,
                true,
                self.input.stack_t(),
                false,
                1.0,
                dc,
            );
        }
        for (slot, delta) in grads[2..].iter_mut().zip([&dbeta, &dg, &dp]) {
            if let Some(x) = slot.as_mut() {
                x.iter_mut().zip(delta).for_each(|(d, v)| *d += v);
            }
        }
    }
}

/// Node features `T*N x F` for a stack of windows: E2E then channel-wise E2N,
/// both activated.
#[allow(clippy::too_many_arguments)]
pub fn edge_to_node_stack(
    g: &mut Graph<'_>,
    input: &WindowStack,
    e2e_row: Var,
    e2e_col: Var,
    e2e_bias: Var,
    e2n_filters: Var,
    e2n_bias: Var,
    slope: f64,
) -> Result<Var> {
    let (n, windows) = (input.n, input.windows);
    let f = filter_bank("e2e row filters", g.shape(e2e_row), g.shape(e2e_bias), n)?;
    if g.shape(e2e_col) != g.shape(e2e_row) {
        return Err(Error::dim(
            "e2e column filters",
            g.shape(e2e_col),
            g.shape(e2e_row),
        ));
    }
    let f2 = filter_bank("e2n filters", g.shape(e2n_filters), g.shape(e2n_bias), n)?;
    if f2 != f {
        return Err(Error::dim("e2n filters", g.shape(e2n_filters), &[f, n]));
    }

    let tn = windows * n;
    let mut rows = vec![0.0; tn * f];
    let mut cols = vec![0.0; tn * f];
    gemm(
        tn,
        n,
        f,
        &input.stack,
        false,
        g.value(e2e_row).values(),
        true,
        0.0,
        &mut rows,
    );
    gemm(
        tn,
        n,
        f,
        input.stack_t(),
        false,
        g.value(e2e_col).values(),
        true,
        0.0,
        &mut cols,
    );

    let mut op = FusedEdgeToNode {
        windows,
        n,
        filters: f,
        slope,
        input: input.clone(),
        rows,
        cols,
        mask: None,
    };
    if g.tracks_branches() {
        let bv = g.value(e2e_bias).values();
        let mut z = Vec::with_capacity(windows * f * n * n);
        for t in 0..windows {
            for k in 0..f {
                let (a, b) = op.sides(&op.rows, &op.cols, bv[k], t, k);
                for ai in &a {
                    z.extend(b.iter().map(|bj| ai + bj));
                }
            }
        }
        op.mask = g.branch_mask(&z);
    }
    let u = op.forward(
        &op.rows,
        &op.cols,
        g.value(e2e_bias).values(),
        g.value(e2n_filters).values(),
        g.value(e2n_bias).values(),
    );
    let pre = Tensor::new(vec![tn, f], u)?;
    let pre = g.custom(
        Box::new(op),
        &[e2e_row, e2e_col, e2e_bias, e2n_filters, e2n_bias],
        pre,
    );
    Ok(g.leaky_relu(pre, slope))
}
