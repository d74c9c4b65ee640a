//! Network building blocks, each available both as a graph operation and as a
//! plain forward function.

mod conv;
mod fused;
mod kernel;
mod lstm;

pub use conv::{
    e2e, e2e_forward, e2n, e2n_forward, n2g, n2g_forward, node_to_graph_stack, E2EParams,
    E2NParams, N2GParams,
};
pub use fused::{edge_to_node_stack, WindowStack};
pub use lstm::{
    lstm_attention, lstm_attention_graph, lstm_layer, AttentionPair, LstmLayerParams, LstmParams,
};

use crate::diffcore::{Graph, Var};
use crate::error::Result;

/// Row-wise affine map `x w + b`, optionally followed by the leaky activation.
pub fn dense(g: &mut Graph<'_>, x: Var, w: Var, b: Var, slope: Option<f64>) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let y = g.add_row(y, b)?;
    Ok(match slope {
        Some(s) => g.leaky_relu(y, s),
        None => y,
    })
}
