//! Multi-head graph attention over the structural adjacency.
//!
//! For head `h`, with `z = W_h v`:
//!
//! ```text
//! e_ij  = LeakyReLU_0.2(a_src · z_i + a_dst · z_j)      j ∈ N(i) ∪ {i}
//! α_ij  = softmax_j(e_ij)
//! out_i = Σ_h ELU(Σ_j α_ij z_j)
//! ```
//!
//! Heads are summed, so every head keeps the full width `d`.

use ndarray::{s, Array1, Array2, ArrayView1};

use super::params::{GatHead, GatLayer, ModelParams};
use crate::data::{RoadNetwork, SegmentId};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Attention neighbourhoods in compressed form; each node's list starts
/// with the node itself followed by its out-neighbours.
#[derive(Debug, Clone)]
pub struct GatGraph {
    offsets: Vec<usize>,
    nbrs: Vec<SegmentId>,
}

impl GatGraph {
    pub fn new(network: &RoadNetwork) -> Self {
        let n = network.num_segments();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut nbrs = Vec::with_capacity(n + network.num_edges());
        offsets.push(0);
        for i in 0..n {
            nbrs.push(i);
            nbrs.extend(network.out_neighbors(i).iter().filter(|&&j| j != i));
            offsets.push(nbrs.len());
        }
        Self { offsets, nbrs }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn neighborhood(&self, i: usize) -> &[SegmentId] {
        &self.nbrs[self.offsets[i]..self.offsets[i + 1]]
    }

    fn span(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

fn leaky_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    z: Array2<f64>,
    /// Pre-activation scores, aligned with the graph's neighbour array.
    e: Vec<f64>,
    /// Attention weights, aligned with the graph's neighbour array.
    pub alpha: Vec<f64>,
    m: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct GatLayerTrace {
    input: Array2<f64>,
    pub heads: Vec<HeadTrace>,
}

#[derive(Debug, Clone)]
pub struct GatTrace {
    pub layers: Vec<GatLayerTrace>,
}

impl GatTrace {
    /// Signs of every LeakyReLU input; the forward map is smooth while
    /// this pattern is fixed.
    pub fn activation_pattern(&self, out: &mut Vec<bool>) {
        for l in &self.layers {
            for h in &l.heads {
                out.extend(h.e.iter().map(|&e| e > 0.0));
            }
        }
    }

    /// Attention row of node `i` for `(layer, head)`, aligned with
    /// [`GatGraph::neighborhood`].
    pub fn attention_row<'a>(&'a self, graph: &GatGraph, layer: usize, head: usize, i: usize) -> &'a [f64] {
        &self.layers[layer].heads[head].alpha[graph.span(i)]
    }
}

fn head_forward(head: &GatHead, graph: &GatGraph, x: &Array2<f64>) -> HeadTrace {
    let d = head.w.ncols();
    let z = x.dot(&head.w);
    let a_src = head.a.slice(s![..d]);
    let a_dst = head.a.slice(s![d..]);
    let f: Array1<f64> = z.dot(&a_src);
    let g: Array1<f64> = z.dot(&a_dst);
    let mut e = vec![0.0; graph.nbrs.len()];
    let mut alpha = vec![0.0; graph.nbrs.len()];
    let mut m = Array2::zeros(z.raw_dim());
    for i in 0..graph.num_nodes() {
        let span = graph.span(i);
        let mut max = f64::NEG_INFINITY;
        for k in span.clone() {
            e[k] = f[i] + g[graph.nbrs[k]];
            max = max.max(leaky(e[k]));
        }
        let mut sum = 0.0;
        for k in span.clone() {
            alpha[k] = (leaky(e[k]) - max).exp();
            sum += alpha[k];
        }
        let mut row = m.row_mut(i);
        for k in span {
            alpha[k] /= sum;
            row.scaled_add(alpha[k], &z.row(graph.nbrs[k]));
        }
    }
    HeadTrace { z, e, alpha, m }
}

fn layer_forward(layer: &GatLayer, graph: &GatGraph, x: &Array2<f64>) -> (Array2<f64>, GatLayerTrace) {
    let mut out = Array2::zeros(x.raw_dim());
    let heads: Vec<HeadTrace> = layer
        .heads
        .iter()
        .map(|h| head_forward(h, graph, x))
        .collect();
    for h in &heads {
        out.zip_mut_with(&h.m, |o, &m| *o += elu(m));
    }
    (
        out,
        GatLayerTrace {
            input: x.clone(),
            heads,
        },
    )
}

/// Runs all GAT layers on the segment table and returns `H_S`.
pub fn gat_forward(params: &ModelParams, graph: &GatGraph) -> (Array2<f64>, GatTrace) {
    let mut x = params.seg_embed.clone();
    let mut layers = Vec::with_capacity(params.gat.len());
    for layer in &params.gat {
        let (next, trace) = layer_forward(layer, graph, &x);
        layers.push(trace);
        x = next;
    }
    (x, GatTrace { layers })
}

fn head_backward(
    head: &GatHead,
    graph: &GatGraph,
    input: &Array2<f64>,
    tr: &HeadTrace,
    d_out: &Array2<f64>,
    grad: &mut GatHead,
    d_input: &mut Array2<f64>,
) {
    let d = head.w.ncols();
    let n = graph.num_nodes();
    let mut dm = d_out.clone();
    dm.zip_mut_with(&tr.m, |g, &m| *g *= elu_grad(m));

    let mut dz = Array2::<f64>::zeros(tr.z.raw_dim());
    let mut df = Array1::<f64>::zeros(n);
    let mut dg = Array1::<f64>::zeros(n);
    let mut dalpha = Vec::new();
    for i in 0..n {
        let span = graph.span(i);
        let dmi = dm.row(i);
        dalpha.clear();
        let mut weighted = 0.0;
        for k in span.clone() {
            let j = graph.nbrs[k];
            let da = dmi.dot(&tr.z.row(j));
            weighted += tr.alpha[k] * da;
            dalpha.push(da);
            dz.row_mut(j).scaled_add(tr.alpha[k], &dmi);
        }
        for (k, &da) in span.zip(&dalpha) {
            let de = tr.alpha[k] * (da - weighted) * leaky_grad(tr.e[k]);
            df[i] += de;
            dg[graph.nbrs[k]] += de;
        }
    }
    let a_src: ArrayView1<f64> = head.a.slice(s![..d]);
    let a_dst: ArrayView1<f64> = head.a.slice(s![d..]);
    // a · z_i terms
    grad.a.slice_mut(s![..d]).scaled_add(1.0, &tr.z.t().dot(&df));
    grad.a.slice_mut(s![d..]).scaled_add(1.0, &tr.z.t().dot(&dg));
    for i in 0..n {
        let mut row = dz.row_mut(i);
        row.scaled_add(df[i], &a_src);
        row.scaled_add(dg[i], &a_dst);
    }
    grad.w.scaled_add(1.0, &input.t().dot(&dz));
    d_input.scaled_add(1.0, &dz.dot(&head.w.t()));
}

/// Accumulates gradients of all GAT parameters and of `seg_embed` given
/// `d_h_s = ∂L/∂H_S`.
pub fn gat_backward(
    params: &ModelParams,
    graph: &GatGraph,
    trace: &GatTrace,
    d_h_s: &Array2<f64>,
    grads: &mut ModelParams,
) {
    let mut d_out = d_h_s.clone();
    for (l, layer) in params.gat.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        let mut d_input = Array2::zeros(lt.input.raw_dim());
        for (h, head) in layer.heads.iter().enumerate() {
            head_backward(
                head,
                graph,
                &lt.input,
                &lt.heads[h],
                &d_out,
                &mut grads.gat[l].heads[h],
                &mut d_input,
            );
        }
        d_out = d_input;
    }
    grads.seg_embed.scaled_add(1.0, &d_out);
}
