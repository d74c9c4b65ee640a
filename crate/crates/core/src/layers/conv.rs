//! Edge-to-edge, edge-to-node and node-to-graph filters.
//!
//! With `phi` the leaky activation:
//!
//! * E2E: `H[f,i,j] = phi(sum_n r[f,n] W[i,n] + sum_n c[f,n] W[n,j] + b[f])`
//! * E2N: `h[f,i] = phi(sum_n g[f,n] H[f,i,n] + p[f])`
//! * N2G: `q[f] = phi(sum_n k[f,n] h[f,n] + d[f])`
//!
//! The bias of E2E is added once per entry. E2N reads only its own feature map
//! unless its filters carry a channel axis (`F x F x N`), in which case every
//! output map mixes all input maps.

use crate::diffcore::{gemm, CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct E2EParams {
    /// `F x N`
    pub row: Tensor,
    /// `F x N`
    pub col: Tensor,
    /// `F`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct E2NParams {
    /// `F x N`, or `F x F x N` for the channel-mixing variant.
    pub filters: Tensor,
    /// `F`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct N2GParams {
    /// `F x N`
    pub filters: Tensor,
    /// `F`
    pub bias: Tensor,
}

pub(super) fn filter_bank(
    op: &'static str,
    filters: &[usize],
    bias: &[usize],
    n: usize,
) -> Result<usize> {
    if filters.len() != 2 || filters[1] != n || filters[0] == 0 {
        return Err(Error::dim(op, filters, &[0, n]));
    }
    if bias != [filters[0]] {
        return Err(Error::dim(op, bias, &filters[..1]));
    }
    Ok(filters[0])
}

/// Pre-activation of the edge-to-edge layer.
struct E2EPre {
    filters: usize,
    n: usize,
}

impl CustomOp for E2EPre {
    fn name(&self) -> &'static str {
        "e2e"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (f, n) = (self.filters, self.n);
        let (w, r, c) = (inputs[0].values(), inputs[1].values(), inputs[2].values());
        // row and column sums of every output map
        let mut sa = vec![0.0; f * n];
        let mut sb = vec![0.0; f * n];
        for k in 0..f {
            for i in 0..n {
                let row = &gy[(k * n + i) * n..(k * n + i + 1) * n];
                sa[k * n + i] = row.iter().sum();
                for (j, v) in row.iter().enumerate() {
                    sb[k * n + j] += v;
                }
            }
        }
        if let Some(dw) = grads[0].as_mut() {
            // dW[i,n] += sum_f sa[f,i] r[f,n];  dW[n,j] += sum_f c[f,n] sb[f,j]
            gemm(n, f, n, &sa, true, r, false, 1.0, dw);
            gemm(n, f, n, c, true, &sb, false, 1.0, dw);
        }
        if let Some(dr) = grads[1].as_mut() {
            gemm(f, n, n, &sa, false, w, false, 1.0, dr);
        }
        if let Some(dc) = grads[2].as_mut() {
            gemm(f, n, n, &sb, false, w, true, 1.0, dc);
        }
        if let Some(db) = grads[3].as_mut() {
            for k in 0..f {
                db[k] += sa[k * n..(k + 1) * n].iter().sum::<f64>();
            }
        }
    }
}

/// Edge-to-edge layer on one `N x N` matrix; output is `F x N x N`.
pub fn e2e(g: &mut Graph<'_>, w: Var, row: Var, col: Var, bias: Var, slope: f64) -> Result<Var> {
    let sw = g.shape(w).to_vec();
    if sw.len() != 2 || sw[0] != sw[1] {
        return Err(Error::Shape(format!(
            "e2e input must be square, got {sw:?}"
        )));
    }
    let n = sw[0];
    let f = filter_bank("e2e row filters", g.shape(row), g.shape(bias), n)?;
    if g.shape(col) != g.shape(row) {
        return Err(Error::dim("e2e column filters", g.shape(col), g.shape(row)));
    }
    let (wv, r, c, b) = (
        g.value(w).values(),
        g.value(row).values(),
        g.value(col).values(),
        g.value(bias).values(),
    );
    // A = r W^T (F x N), B = c W (F x N)
    let mut a = vec![0.0; f * n];
    let mut bb = vec![0.0; f * n];
    gemm(f, n, n, r, false, wv, true, 0.0, &mut a);
    gemm(f, n, n, c, false, wv, false, 0.0, &mut bb);
    let mut z = vec![0.0; f * n * n];
    for k in 0..f {
        for i in 0..n {
            let base = (k * n + i) * n;
            let ai = a[k * n + i] + b[k];
            for j in 0..n {
                z[base + j] = ai + bb[k * n + j];
            }
        }
    }
    let pre = Tensor::new(vec![f, n, n], z)?;
    let pre = g.custom(
        Box::new(E2EPre { filters: f, n }),
        &[w, row, col, bias],
        pre,
    );
    Ok(g.leaky_relu(pre, slope))
}

struct E2NPre {
    filters: usize,
    n: usize,
    mixing: bool,
}

impl CustomOp for E2NPre {
    fn name(&self) -> &'static str {
        "e2n"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (f, n) = (self.filters, self.n);
        let (h, gf) = (inputs[0].values(), inputs[1].values());
        // (output map, input map) pairs that interact
        let pairs: Vec<(usize, usize, usize)> = if self.mixing {
            (0..f)
                .flat_map(|o| (0..f).map(move |s| (o, s, (o * f + s) * n)))
                .collect()
        } else {
            (0..f).map(|o| (o, o, o * n)).collect()
        };
        for &(o, s, goff) in &pairs {
            for i in 0..n {
                let d = gy[o * n + i];
                let hrow = &h[(s * n + i) * n..(s * n + i + 1) * n];
                if let Some(dh) = grads[0].as_mut() {
                    let dst = &mut dh[(s * n + i) * n..(s * n + i + 1) * n];
                    for (x, gv) in dst.iter_mut().zip(&gf[goff..goff + n]) {
                        *x += d * gv;
                    }
                }
                if let Some(dg) = grads[1].as_mut() {
                    for (x, hv) in dg[goff..goff + n].iter_mut().zip(hrow) {
                        *x += d * hv;
                    }
                }
            }
        }
        if let Some(dp) = grads[2].as_mut() {
            for o in 0..f {
                dp[o] += gy[o * n..(o + 1) * n].iter().sum::<f64>();
            }
        }
    }
}

/// Edge-to-node layer on `F x N x N` maps; output is `F x N`.
pub fn e2n(g: &mut Graph<'_>, h: Var, filters: Var, bias: Var, slope: f64) -> Result<Var> {
    let sh = g.shape(h).to_vec();
    if sh.len() != 3 || sh[1] != sh[2] {
        return Err(Error::Shape(format!(
            "e2n input must be F x N x N, got {sh:?}"
        )));
    }
    let (f, n) = (sh[0], sh[1]);
    let sf = g.shape(filters).to_vec();
    let mixing = match sf.as_slice() {
        [a, b] if *a == f && *b == n => false,
        [a, b, c] if *a == f && *b == f && *c == n => true,
        _ => return Err(Error::dim("e2n filters", &sf, &[f, n])),
    };
    if g.shape(bias) != [f] {
        return Err(Error::dim("e2n bias", g.shape(bias), &[f]));
    }
    let (hv, gf, p) = (
        g.value(h).values(),
        g.value(filters).values(),
        g.value(bias).values(),
    );
    let mut u = vec![0.0; f * n];
    for o in 0..f {
        for i in 0..n {
            let mut acc = p[o];
            let sources: Vec<(usize, usize)> = if mixing {
                (0..f).map(|s| (s, (o * f + s) * n)).collect()
            } else {
                vec![(o, o * n)]
            };
            for (s, goff) in sources {
                let hrow = &hv[(s * n + i) * n..(s * n + i + 1) * n];
                acc += hrow
                    .iter()
                    .zip(&gf[goff..goff + n])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            }
            u[o * n + i] = acc;
        }
    }
    let pre = Tensor::new(vec![f, n], u)?;
    let pre = g.custom(
        Box::new(E2NPre {
            filters: f,
            n,
            mixing,
        }),
        &[h, filters, bias],
        pre,
    );
    Ok(g.leaky_relu(pre, slope))
}

struct N2GPre {
    filters: usize,
    n: usize,
}

impl CustomOp for N2GPre {
    fn name(&self) -> &'static str {
        "n2g"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (f, n) = (self.filters, self.n);
        let (h, k) = (inputs[0].values(), inputs[1].values());
        for o in 0..f {
            if let Some(dh) = grads[0].as_mut() {
                for i in 0..n {
                    dh[o * n + i] += gy[o] * k[o * n + i];
                }
            }
            if let Some(dk) = grads[1].as_mut() {
                for i in 0..n {
                    dk[o * n + i] += gy[o] * h[o * n + i];
                }
            }
            if let Some(dd) = grads[2].as_mut() {
                dd[o] += gy[o];
            }
        }
    }
}

/// Node-to-graph layer on `F x N` node features; output is length `F`.
pub fn n2g(g: &mut Graph<'_>, h: Var, filters: Var, bias: Var, slope: f64) -> Result<Var> {
    let sh = g.shape(h).to_vec();
    if sh.len() != 2 {
        return Err(Error::Shape(format!("n2g input must be F x N, got {sh:?}")));
    }
    let f = filter_bank("n2g filters", g.shape(filters), g.shape(bias), sh[1])?;
    if f != sh[0] {
        return Err(Error::dim("n2g", &sh, g.shape(filters)));
    }
    let n = sh[1];
    let (hv, k, d) = (
        g.value(h).values(),
        g.value(filters).values(),
        g.value(bias).values(),
    );
    let q: Vec<f64> = (0..f)
        .map(|o| {
            d[o] + hv[o * n..(o + 1) * n]
                .iter()
                .zip(&k[o * n..(o + 1) * n])
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .collect();
    let pre = g.custom(
        Box::new(N2GPre { filters: f, n }),
        &[h, filters, bias],
        Tensor::vector(q),
    );
    Ok(g.leaky_relu(pre, slope))
}

/// Node-to-graph over stacked node features `T*N x F`; output `T x F`.
struct N2GStack {
    windows: usize,
    n: usize,
    filters: usize,
}

impl CustomOp for N2GStack {
    fn name(&self) -> &'static str {
        "n2g_stack"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _out: &Tensor,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tn, n, f) = (self.windows, self.n, self.filters);
        let (h, k) = (inputs[0].values(), inputs[1].values());
        for t in 0..tn {
            for i in 0..n {
                for o in 0..f {
                    let d = gy[t * f + o];
                    if let Some(dh) = grads[0].as_mut() {
                        dh[(t * n + i) * f + o] += d * k[o * n + i];
                    }
                    if let Some(dk) = grads[1].as_mut() {
                        dk[o * n + i] += d * h[(t * n + i) * f + o];
                    }
                }
            }
            if let Some(dd) = grads[2].as_mut() {
                for o in 0..f {
                    dd[o] += gy[t * f + o];
                }
            }
        }
    }
}

/// Activated node-to-graph summaries `T x F` of stacked node features.
pub fn node_to_graph_stack(
    g: &mut Graph<'_>,
    nodes: Var,
    filters: Var,
    bias: Var,
    slope: f64,
) -> Result<Var> {
    let sf = g.shape(filters).to_vec();
    if sf.len() != 2 {
        return Err(Error::Shape(format!(
            "n2g filters must be F x N, got {sf:?}"
        )));
    }
    let (f, n) = (sf[0], sf[1]);
    filter_bank("n2g filters", &sf, g.shape(bias), n)?;
    let sh = g.shape(nodes).to_vec();
    if sh.len() != 2 || sh[1] != f || sh[0] % n != 0 {
        return Err(Error::dim("n2g stack", &sh, &sf));
    }
    let windows = sh[0] / n;
    let (h, k, d) = (
        g.value(nodes).values(),
        g.value(filters).values(),
        g.value(bias).values(),
    );
    let mut q = vec![0.0; windows * f];
    for t in 0..windows {
        for o in 0..f {
            let mut acc = d[o];
            for i in 0..n {
                acc += k[o * n + i] * h[(t * n + i) * f + o];
            }
            q[t * f + o] = acc;
        }
    }
    let pre = Tensor::new(vec![windows, f], q)?;
    let pre = g.custom(
        Box::new(N2GStack {
            windows,
            n,
            filters: f,
        }),
        &[nodes, filters, bias],
        pre,
    );
    Ok(g.leaky_relu(pre, slope))
}

/// Value-level E2E: `F x N x N` feature maps.
pub fn e2e_forward(w: &Tensor, params: &E2EParams, slope: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (wv, r, c, b) = (
        g.constant(w.clone()),
        g.constant(params.row.clone()),
        g.constant(params.col.clone()),
        g.constant(params.bias.clone()),
    );
    let out = e2e(&mut g, wv, r, c, b, slope)?;
    Ok(g.value(out).clone())
}

/// Value-level E2N: `F x N` node features.
pub fn e2n_forward(h: &Tensor, params: &E2NParams, slope: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (hv, k, p) = (
        g.constant(h.clone()),
        g.constant(params.filters.clone()),
        g.constant(params.bias.clone()),
    );
    let out = e2n(&mut g, hv, k, p, slope)?;
    Ok(g.value(out).clone())
}

/// Value-level N2G: length-`F` graph summary.
pub fn n2g_forward(h: &Tensor, params: &N2GParams, slope: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (hv, k, d) = (
        g.constant(h.clone()),
        g.constant(params.filters.clone()),
        g.constant(params.bias.clone()),
    );
    let out = n2g(&mut g, hv, k, d, slope)?;
    Ok(g.value(out).clone())
}
