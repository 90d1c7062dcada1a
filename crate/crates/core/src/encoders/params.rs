use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture sizes. Everything needed to allocate a [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub num_segments: usize,
    pub d: usize,
    pub heads: usize,
    pub gat_layers: usize,
    pub trans_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Hyper {
    pub fn new(num_segments: usize, d: usize) -> Self {
        Self {
            num_segments,
            d,
            heads: 4,
            gat_layers: 2,
            trans_layers: 4,
            d_ff: 4 * d,
            max_seq_len: 128,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {} must be a positive multiple of the head count {}",
                self.d, self.heads
            )));
        }
        if self.d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "model width {} must be even for positional encoding",
                self.d
            )));
        }
        if self.num_segments == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return Err(Error::InvalidArgument(
                "segment count, feed-forward width and sequence cap must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One graph-attention head: projection `W` (d×d) and attention vector
/// `a` (2d), the first half scoring the centre node and the second half the
/// neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct GatHead {
    pub w: Array2<f64>,
    pub a: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
}

/// One post-norm Transformer encoder layer. Per-head query/key/value
/// projections are the column blocks `h·d_k .. (h+1)·d_k` of `wq`, `wk`, `wv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

/// Every learnable tensor. The same type doubles as a gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub seg_embed: Array2<f64>,
    pub gat: Vec<GatLayer>,
    pub encoder: Vec<EncoderLayer>,
}

fn uniform2<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-b..=b))
}

fn uniform1<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Array1<f64> {
    let b = 1.0 / (fan_in as f64).sqrt();
    Array1::from_shape_simple_fn(len, || rng.random_range(-b..=b))
}

impl ModelParams {
    /// Uniform `±1/√fan_in` initialisation; layer-norm gains 1 and biases 0.
    pub fn init(seed: u64, hyper: Hyper) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let Hyper {
            num_segments: n,
            d,
            d_ff,
            ..
        } = hyper;
        let seg_embed = uniform2(&mut rng, n, d, d);
        let gat = (0..hyper.gat_layers)
            .map(|_| GatLayer {
                heads: (0..hyper.heads)
                    .map(|_| GatHead {
                        w: uniform2(&mut rng, d, d, d),
                        a: uniform1(&mut rng, 2 * d, 2 * d),
                    })
                    .collect(),
            })
            .collect();
        let encoder = (0..hyper.trans_layers)
            .map(|_| EncoderLayer {
                wq: uniform2(&mut rng, d, d, d),
                wk: uniform2(&mut rng, d, d, d),
                wv: uniform2(&mut rng, d, d, d),
                wo: uniform2(&mut rng, d, d, d),
                w1: uniform2(&mut rng, d, d_ff, d),
                b1: uniform1(&mut rng, d_ff, d),
                w2: uniform2(&mut rng, d_ff, d, d_ff),
                b2: uniform1(&mut rng, d, d_ff),
                ln1_gain: Array1::ones(d),
                ln1_bias: Array1::zeros(d),
                ln2_gain: Array1::ones(d),
                ln2_bias: Array1::zeros(d),
            })
            .collect();
        Ok(Self {
            hyper,
            seg_embed,
            gat,
            encoder,
        })
    }

    /// All-zero tensors with the shapes of `self`.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.fill(0.0);
        out
    }

    pub fn fill(&mut self, value: f64) {
        for t in self.tensors_mut() {
            t.data.fill(value);
        }
    }

    /// Named read-only views of every tensor, in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![TensorRef::new("seg_embed".into(), &self.seg_embed)];
        for (l, layer) in self.gat.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push(TensorRef::new(format!("gat.{l}.head.{h}.w"), &head.w));
                out.push(TensorRef::new1(format!("gat.{l}.head.{h}.a"), &head.a));
            }
        }
        for (l, e) in self.encoder.iter().enumerate() {
            out.push(TensorRef::new(format!("encoder.{l}.wq"), &e.wq));
            out.push(TensorRef::new(format!("encoder.{l}.wk"), &e.wk));
            out.push(TensorRef::new(format!("encoder.{l}.wv"), &e.wv));
            out.push(TensorRef::new(format!("encoder.{l}.wo"), &e.wo));
            out.push(TensorRef::new(format!("encoder.{l}.w1"), &e.w1));
            out.push(TensorRef::new1(format!("encoder.{l}.b1"), &e.b1));
            out.push(TensorRef::new(format!("encoder.{l}.w2"), &e.w2));
            out.push(TensorRef::new1(format!("encoder.{l}.b2"), &e.b2));
            out.push(TensorRef::new1(format!("encoder.{l}.ln1_gain"), &e.ln1_gain));
            out.push(TensorRef::new1(format!("encoder.{l}.ln1_bias"), &e.ln1_bias));
            out.push(TensorRef::new1(format!("encoder.{l}.ln2_gain"), &e.ln2_gain));
            out.push(TensorRef::new1(format!("encoder.{l}.ln2_bias"), &e.ln2_bias));
        }
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![TensorMut {
            name: "seg_embed".into(),
            data: self.seg_embed.as_slice_mut().expect("standard layout"),
        }];
        for (l, layer) in self.gat.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                let GatHead { w, a } = head;
                out.push(TensorMut::new(format!("gat.{l}.head.{h}.w"), w.as_slice_mut()));
                out.push(TensorMut::new(format!("gat.{l}.head.{h}.a"), a.as_slice_mut()));
            }
        }
        for (l, e) in self.encoder.iter_mut().enumerate() {
            let EncoderLayer {
                wq,
                wk,
                wv,
                wo,
                w1,
                b1,
                w2,
                b2,
                ln1_gain,
                ln1_bias,
                ln2_gain,
                ln2_bias,
            } = e;
            out.push(TensorMut::new(format!("encoder.{l}.wq"), wq.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.wk"), wk.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.wv"), wv.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.wo"), wo.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.w1"), w1.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.b1"), b1.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.w2"), w2.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.b2"), b2.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.ln1_gain"), ln1_gain.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.ln1_bias"), ln1_bias.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.ln2_gain"), ln2_gain.as_slice_mut()));
            out.push(TensorMut::new(format!("encoder.{l}.ln2_bias"), ln2_bias.as_slice_mut()));
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Concatenation of all tensors in canonical order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_values(), "flat parameter length");
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// `self += scale · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, &b) in dst.data.iter_mut().zip(src.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl<'a> TensorRef<'a> {
    fn new(name: String, a: &'a Array2<f64>) -> Self {
        Self {
            name,
            shape: a.shape().to_vec(),
            data: a.as_slice().expect("standard layout"),
        }
    }

    fn new1(name: String, a: &'a Array1<f64>) -> Self {
        Self {
            name,
            shape: vec![a.len()],
            data: a.as_slice().expect("standard layout"),
        }
    }
}

pub struct TensorMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

impl<'a> TensorMut<'a> {
    fn new(name: String, data: Option<&'a mut [f64]>) -> Self {
        Self {
            name,
            data: data.expect("standard layout"),
        }
    }
}
