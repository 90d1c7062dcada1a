//! Segment table → graph attention → Transformer → mean-pooled trajectory
//! embedding, with hand-written reverse-mode gradients.

pub mod gat;
pub mod params;
pub mod transformer;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;

pub use gat::{gat_backward, gat_forward, GatGraph, GatTrace};
pub use params::{EncoderLayer, GatHead, GatLayer, Hyper, ModelParams};
pub use transformer::{masked_mean, positional_encoding, Dropout, EncoderLayerTrace};

use crate::data::{SegmentId, Trajectory, TrajectoryCorpus};

/// `|S| × d` road-segment embeddings `H_S`.
pub type EmbeddingMatrix = Array2<f64>;
/// `d`-dimensional trajectory embedding `h_τ`.
pub type TrajectoryEmbedding = Array1<f64>;

/// Runs every encoder layer on `x`. `pad_mask[p]` marks padded positions,
/// which are excluded as attention keys.
pub fn transformer_forward(
    params: &ModelParams,
    x: &Array2<f64>,
    pad_mask: &[bool],
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<f64>, Vec<EncoderLayerTrace>) {
    assert_eq!(x.nrows(), pad_mask.len(), "pad mask length");
    let heads = params.hyper.heads;
    let mut h = x.clone();
    let mut traces = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (next, tr) = transformer::encoder_layer_forward(layer, heads, &h, pad_mask, dropout.as_deref_mut());
        traces.push(tr);
        h = next;
    }
    (h, traces)
}

/// Gradient of the encoder input given the output gradient; parameter
/// gradients accumulate into `grads`.
pub fn transformer_backward(
    params: &ModelParams,
    traces: &[EncoderLayerTrace],
    dy: Array2<f64>,
    grads: &mut ModelParams,
) -> Array2<f64> {
    let heads = params.hyper.heads;
    let mut d = dy;
    for (l, layer) in params.encoder.iter().enumerate().rev() {
        d = transformer::encoder_layer_backward(layer, heads, &traces[l], &d, &mut grads.encoder[l]);
    }
    d
}

/// Cached intermediates of one sequence encoding.
#[derive(Debug, Clone)]
pub struct SequenceTrace {
    pub segments: Vec<SegmentId>,
    pub layers: Vec<EncoderLayerTrace>,
}

/// Sequence input `H_τ + P` for the (truncated) segment list.
pub fn sequence_input(params: &ModelParams, h_s: &EmbeddingMatrix, segments: &[SegmentId]) -> Array2<f64> {
    let d = params.hyper.d;
    let mut x = positional_encoding(segments.len(), d);
    for (mut row, &s) in x.rows_mut().into_iter().zip(segments) {
        row += &h_s.row(s);
    }
    x
}

/// Encodes a segment sequence (tail-truncated to `max_seq_len`) into a
/// pooled embedding and keeps what backward needs.
pub fn encode_segments(
    params: &ModelParams,
    h_s: &EmbeddingMatrix,
    segments: &[SegmentId],
    dropout: Option<&mut Dropout<'_>>,
) -> (TrajectoryEmbedding, SequenceTrace) {
    let segs = &segments[..segments.len().min(params.hyper.max_seq_len)];
    let x = sequence_input(params, h_s, segs);
    let pad = vec![false; segs.len()];
    let (y, layers) = transformer_forward(params, &x, &pad, dropout);
    (
        masked_mean(&y, &pad),
        SequenceTrace {
            segments: segs.to_vec(),
            layers,
        },
    )
}

/// Evaluation-mode trajectory embedding.
pub fn encode_trajectory(params: &ModelParams, h_s: &EmbeddingMatrix, traj: &Trajectory) -> TrajectoryEmbedding {
    encode_segments(params, h_s, &traj.segments, None).0
}

/// Backpropagates `dh = ∂L/∂h_τ` through pooling and the encoder; the
/// gradient reaching the gathered rows is scattered into `d_h_s`.
pub fn sequence_backward(
    params: &ModelParams,
    trace: &SequenceTrace,
    dh: ArrayView1<f64>,
    grads: &mut ModelParams,
    d_h_s: &mut Array2<f64>,
) {
    let len = trace.segments.len();
    let mut dy = Array2::zeros((len, params.hyper.d));
    let share = &dh / len as f64;
    for mut row in dy.rows_mut() {
        row.assign(&share);
    }
    let dx = transformer_backward(params, &trace.layers, dy, grads);
    for (row, &s) in dx.rows().into_iter().zip(&trace.segments) {
        let mut dst = d_h_s.row_mut(s);
        dst += &row;
    }
}

/// Everything a full backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardState {
    pub h_s: EmbeddingMatrix,
    pub gat: GatTrace,
    pub sequences: Vec<SequenceTrace>,
}

impl ForwardState {
    /// Concatenated activation signs of the GAT and every traced sequence.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        self.gat.activation_pattern(&mut out);
        for seq in &self.sequences {
            for l in &seq.layers {
                l.activation_pattern(&mut out);
            }
        }
        out
    }
}

/// Gradients flowing into the encoder outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads {
    pub d_h_s: Array2<f64>,
    /// One row per traced sequence.
    pub d_traj: Array2<f64>,
}

/// Runs the GAT and encodes every sequence in evaluation mode.
pub fn forward(params: &ModelParams, graph: &GatGraph, sequences: &[&[SegmentId]]) -> (Array2<f64>, ForwardState) {
    let (h_s, gat) = gat_forward(params, graph);
    let encoded: Vec<_> = sequences
        .par_iter()
        .map(|segs| encode_segments(params, &h_s, segs, None))
        .collect();
    let mut out = Array2::zeros((sequences.len(), params.hyper.d));
    let mut traces = Vec::with_capacity(sequences.len());
    for (i, (h, tr)) in encoded.into_iter().enumerate() {
        out.row_mut(i).assign(&h);
        traces.push(tr);
    }
    (
        out,
        ForwardState {
            h_s,
            gat,
            sequences: traces,
        },
    )
}

/// Sequences per gradient-reduction chunk. Fixed so the summation order,
/// and therefore the result, does not depend on the thread count.
const REDUCE_CHUNK: usize = 8;

/// Exact gradients of every parameter given output gradients.
pub fn backward(params: &ModelParams, graph: &GatGraph, state: &ForwardState, out: &OutputGrads) -> ModelParams {
    let idx: Vec<usize> = (0..state.sequences.len()).collect();
    let partials: Vec<(ModelParams, Array2<f64>)> = idx
        .par_chunks(REDUCE_CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let mut dhs = Array2::zeros(state.h_s.raw_dim());
            for &i in chunk {
                let dh = out.d_traj.row(i);
                if dh.iter().any(|&v| v != 0.0) {
                    sequence_backward(params, &state.sequences[i], dh, &mut g, &mut dhs);
                }
            }
            (g, dhs)
        })
        .collect();
    let mut grads = params.zeros_like();
    let mut d_h_s = out.d_h_s.clone();
    for (g, dhs) in partials {
        grads.add_scaled(&g, 1.0);
        d_h_s += &dhs;
    }
    gat_backward(params, graph, &state.gat, &d_h_s, &mut grads);
    grads
}

/// Evaluation-mode `H_S`.
pub fn embed_segments(params: &ModelParams, graph: &GatGraph) -> EmbeddingMatrix {
    gat_forward(params, graph).0
}

/// Evaluation-mode embeddings of every trajectory, one row each.
pub fn embed_trajectories(params: &ModelParams, h_s: &EmbeddingMatrix, trajs: &[Trajectory]) -> Array2<f64> {
    let rows: Vec<TrajectoryEmbedding> = trajs
        .par_iter()
        .map(|t| encode_trajectory(params, h_s, t))
        .collect();
    let mut out = Array2::zeros((trajs.len(), params.hyper.d));
    for (i, r) in rows.into_iter().enumerate() {
        out.row_mut(i).assign(&r);
    }
    out
}

pub fn embed_corpus(params: &ModelParams, h_s: &EmbeddingMatrix, corpus: &TrajectoryCorpus) -> Array2<f64> {
    embed_trajectories(params, h_s, corpus.trajectories())
}
