//! Encoder checks against straight-line reference implementations written
//! with plain loops over `Vec<f64>`.

use jclr::data::{RoadNetwork, SegmentMeta};
use jclr::encoders::{
    backward, encode_segments, forward, gat_forward, masked_mean, positional_encoding, transformer_forward,
    EncoderLayer, GatGraph, Hyper, ModelParams, OutputGrads,
};
use ndarray::{Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matmul(a: &Mat, b: &Array2<f64>) -> Mat {
    a.iter()
        .map(|row| {
            (0..b.ncols())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b[[k, j]]).sum())
                .collect()
        })
        .collect()
}

fn network(n: usize, seed: u64) -> RoadNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = vec![];
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.25) {
                edges.push((i, j));
            }
        }
    }
    let segs = (0..n)
        .map(|id| SegmentMeta {
            id,
            length_m: 50.0,
            label: None,
            avg_speed: None,
        })
        .collect();
    RoadNetwork::new(segs, &edges).unwrap()
}

fn params(n: usize, d: usize, layers: usize, seed: u64) -> ModelParams {
    let mut h = Hyper::new(n, d);
    h.trans_layers = layers;
    ModelParams::init(seed, h).unwrap()
}

/// Per head: e_ij = LeakyReLU(a₁·Wx_i + a₂·Wx_j) over j ∈ {i} ∪ out(i),
/// softmax over j, then the ELU of the weighted sum; heads add.
fn gat_reference(p: &ModelParams, net: &RoadNetwork) -> Mat {
    let d = p.hyper.d;
    let mut x = to_mat(&p.seg_embed);
    for layer in &p.gat {
        let n = x.len();
        let mut out = vec![vec![0.0; d]; n];
        for head in &layer.heads {
            let z = matmul(&x, &head.w);
            for i in 0..n {
                let mut nb = vec![i];
                nb.extend(net.out_neighbors(i).iter().copied().filter(|&j| j != i));
                let scores: Vec<f64> = nb
                    .iter()
                    .map(|&j| {
                        let mut e = 0.0;
                        for c in 0..d {
                            e += head.a[c] * z[i][c] + head.a[d + c] * z[j][c];
                        }
                        if e > 0.0 {
                            e
                        } else {
                            0.2 * e
                        }
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                for c in 0..d {
                    let m: f64 = nb.iter().zip(&exps).map(|(&j, e)| e / total * z[j][c]).sum();
                    out[i][c] += if m > 0.0 { m } else { m.exp_m1() };
                }
            }
        }
        x = out;
    }
    x
}

fn layer_norm_ref(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gain[i] + bias[i])
        .collect()
}

fn encoder_layer_ref(p: &EncoderLayer, heads: usize, x: &Mat) -> Mat {
    let len = x.len();
    let d = x[0].len();
    let dk = d / heads;
    let q = matmul(x, &p.wq);
    let k = matmul(x, &p.wk);
    let v = matmul(x, &p.wv);
    let mut concat = vec![vec![0.0; d]; len];
    for h in 0..heads {
        for i in 0..len {
            let s: Vec<f64> = (0..len)
                .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
            let t: f64 = e.iter().sum();
            for c in 0..dk {
                concat[i][h * dk + c] = (0..len).map(|j| e[j] / t * v[j][h * dk + c]).sum();
            }
        }
    }
    let mh = matmul(&concat, &p.wo);
    let g1 = p.ln1_gain.to_vec();
    let b1 = p.ln1_bias.to_vec();
    let z: Mat = (0..len)
        .map(|i| {
            let r: Vec<f64> = (0..d).map(|c| x[i][c] + mh[i][c]).collect();
            layer_norm_ref(&r, &g1, &b1)
        })
        .collect();
    let mut hidden = matmul(&z, &p.w1);
    for row in &mut hidden {
        for (c, v) in row.iter_mut().enumerate() {
            *v = (*v + p.b1[c]).max(0.0);
        }
    }
    let ffn = matmul(&hidden, &p.w2);
    let g2 = p.ln2_gain.to_vec();
    let b2 = p.ln2_bias.to_vec();
    (0..len)
        .map(|i| {
            let r: Vec<f64> = (0..d).map(|c| z[i][c] + ffn[i][c] + p.b2[c]).collect();
            layer_norm_ref(&r, &g2, &b2)
        })
        .collect()
}

fn max_abs_diff(a: &Mat, b: &Array2<f64>) -> f64 {
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b[[i, j]]).abs());
        }
    }
    m
}

#[test]
fn gat_matches_reference() {
    for seed in 0..5 {
        let net = network(15, seed);
        let p = params(15, 8, 2, seed);
        let (h, _) = gat_forward(&p, &GatGraph::new(&net));
        assert!(max_abs_diff(&gat_reference(&p, &net), &h) < 1e-12, "seed {seed}");
    }
}

#[test]
fn transformer_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let p = params(10, 8, 3, seed);
        let len = 2 + seed as usize;
        let x = Array2::from_shape_simple_fn((len, 8), || rng.random_range(-1.0..1.0));
        let (y, _) = transformer_forward(&p, &x, &vec![false; len], None);
        let mut r = to_mat(&x);
        for layer in &p.encoder {
            r = encoder_layer_ref(layer, p.hyper.heads, &r);
        }
        assert!(max_abs_diff(&r, &y) < 1e-12, "seed {seed}");
    }
}

#[test]
fn positional_encoding_values() {
    let p = positional_encoding(3, 4);
    assert_eq!(p[[0, 0]], 0.0);
    assert_eq!(p[[0, 1]], 1.0);
    assert!((p[[1, 0]] - 0.841471).abs() < 1e-6);
    assert!((p[[1, 2]] - (1.0f64 / 100.0).sin()).abs() < 1e-15);
    assert!((p[[2, 3]] - (2.0f64 / 100.0).cos()).abs() < 1e-15);
}

#[test]
fn padding_does_not_change_pooled_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = params(10, 8, 2, 1);
    let x = Array2::from_shape_simple_fn((4, 8), || rng.random_range(-1.0..1.0));
    let (y, _) = transformer_forward(&p, &x, &[false; 4], None);
    let pooled = masked_mean(&y, &[false; 4]);
    let mut padded = Array2::from_shape_simple_fn((7, 8), || rng.random_range(-5.0..5.0));
    padded.slice_mut(ndarray::s![..4, ..]).assign(&x);
    let mask = [false, false, false, false, true, true, true];
    let (yp, _) = transformer_forward(&p, &padded, &mask, None);
    let pooled_p = masked_mean(&yp, &mask);
    for (a, b) in pooled.iter().zip(pooled_p.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn single_token_attends_to_itself() {
    let p = params(4, 8, 1, 0);
    let h = p.seg_embed.clone();
    let (_, trace) = encode_segments(&p, &h, &[2], None);
    for a in &trace.layers[0].attention {
        assert_eq!(a.dim(), (1, 1));
        assert!((a[[0, 0]] - 1.0).abs() < 1e-15);
    }
}

#[test]
fn long_sequences_are_tail_truncated() {
    let mut p = params(6, 8, 1, 0);
    p.hyper.max_seq_len = 5;
    let h = p.seg_embed.clone();
    let long: Vec<usize> = (0..9).map(|i| i % 6).collect();
    let (a, trace) = encode_segments(&p, &h, &long, None);
    let (b, _) = encode_segments(&p, &h, &long[..5], None);
    assert_eq!(trace.segments.len(), 5);
    assert_eq!(a, b);
}

#[test]
fn zero_attention_vectors_give_uniform_weights() {
    let net = network(12, 4);
    let graph = GatGraph::new(&net);
    let mut p = params(12, 8, 1, 4);
    for layer in &mut p.gat {
        for h in &mut layer.heads {
            h.a.fill(0.0);
        }
    }
    let (_, trace) = gat_forward(&p, &graph);
    for i in 0..12 {
        let row = trace.attention_row(&graph, 0, 0, i);
        let u = 1.0 / graph.neighborhood(i).len() as f64;
        assert!(row.iter().all(|&a| (a - u).abs() < 1e-15));
    }
}

#[test]
fn pooling_identical_rows_returns_the_row() {
    let row = [0.5, -1.25, 3.0, 0.0];
    let x = Array2::from_shape_fn((5, 4), |(_, j)| row[j]);
    assert_eq!(masked_mean(&x, &[false; 5]).to_vec(), row.to_vec());
}

#[test]
fn zero_output_gradient_gives_zero_parameter_gradients() {
    let net = network(10, 2);
    let graph = GatGraph::new(&net);
    let p = params(10, 8, 2, 2);
    let seqs: Vec<&[usize]> = vec![&[0, 1, 2], &[3, 4]];
    let (_, state) = forward(&p, &graph, &seqs);
    let out = OutputGrads {
        d_h_s: Array2::zeros((10, 8)),
        d_traj: Array2::zeros((2, 8)),
    };
    assert!(backward(&p, &graph, &state, &out).to_flat().iter().all(|&g| g == 0.0));
}

#[test]
fn untouched_segments_get_exactly_zero_gradient() {
    // segments 8 and 9 have no edges and appear in no sequence or contrast
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut edges = vec![];
    for i in 0..8 {
        for j in 0..8 {
            if i != j && rng.random_bool(0.3) {
                edges.push((i, j));
            }
        }
    }
    let segs = (0..10)
        .map(|id| SegmentMeta {
            id,
            length_m: 50.0,
            label: None,
            avg_speed: None,
        })
        .collect();
    let net = RoadNetwork::new(segs, &edges).unwrap();
    let graph = GatGraph::new(&net);
    let p = params(10, 8, 2, 5);
    let seqs: Vec<&[usize]> = vec![&[0, 1, 2, 3], &[4, 5, 6, 7]];
    let (_, state) = forward(&p, &graph, &seqs);
    let mut d_h_s = Array2::from_shape_simple_fn((10, 8), || rng.random_range(-1.0..1.0));
    d_h_s.slice_mut(ndarray::s![8.., ..]).fill(0.0);
    let d_traj = Array2::from_shape_simple_fn((2, 8), || rng.random_range(-1.0..1.0));
    let g = backward(&p, &graph, &state, &OutputGrads { d_h_s, d_traj });
    for s in 0..8 {
        assert!(g.seg_embed.row(s).iter().any(|&v| v != 0.0));
    }
    for s in 8..10 {
        assert!(g.seg_embed.row(s).iter().all(|&v| v == 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_rows_sum_to_one(seed in 0u64..10_000, n in 2usize..25, len in 1usize..20, scale in 0.1f64..20.0) {
        let net = network(n, seed);
        let graph = GatGraph::new(&net);
        let mut p = params(n, 8, 2, seed);
        p.scale(scale);
        let (h_s, gat) = gat_forward(&p, &graph);
        for l in 0..p.hyper.gat_layers {
            for hd in 0..p.hyper.heads {
                for i in 0..n {
                    let s: f64 = gat.attention_row(&graph, l, hd, i).iter().sum();
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segs: Vec<usize> = (0..len).map(|_| rng.random_range(0..n)).collect();
        let (_, trace) = encode_segments(&p, &h_s, &segs, None);
        for layer in &trace.layers {
            for a in &layer.attention {
                for s in a.sum_axis(Axis(1)).iter() {
                    prop_assert!((s - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}
