//! Post-norm Transformer encoder over segment sequences.
//!
//! ```text
//! Z   = LayerNorm(X + MultiHead(X))
//! out = LayerNorm(Z + FFN(Z)),   FFN(Z) = ReLU(Z W1 + b1) W2 + b2
//! ```
//!
//! Attention is `softmax(Q Kᵀ / √d_k) V` per head with padded keys masked.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, RngCore};

use super::params::EncoderLayer;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Sinusoidal positions: `P[p, 2i] = sin(p / 10000^(2i/d))`,
/// `P[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(length: usize, d: usize) -> Array2<f64> {
    assert!(d % 2 == 0, "positional encoding needs an even width");
    let mut p = Array2::zeros((length, d));
    for pos in 0..length {
        for i in 0..d / 2 {
            let omega = 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 / omega;
            p[[pos, 2 * i]] = angle.sin();
            p[[pos, 2 * i + 1]] = angle.cos();
        }
    }
    p
}

/// Inverted dropout; `None` in evaluation mode.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        if self.rate <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if self.rng.random_bool(rate) {
                0.0
            } else {
                keep
            }
        }))
    }
}

#[derive(Debug, Clone)]
struct LayerNormTrace {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormTrace) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, istd) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let s = *istd;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormTrace { xhat, inv_std })
}

fn layer_norm_backward(
    tr: &LayerNormTrace,
    gain: &Array1<f64>,
    dy: &Array2<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *d_gain += &(dy * &tr.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let g = dxhat.row(r);
        let xh = tr.xhat.row(r);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let istd = tr.inv_std[r];
        for c in 0..dy.ncols() {
            dx[[r, c]] = istd * (g[c] - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

/// Row-wise softmax of `scores` with masked columns forced to zero weight.
fn masked_softmax(scores: &mut Array2<f64>, key_pad: &[bool]) {
    for mut row in scores.rows_mut() {
        let mut max = f64::NEG_INFINITY;
        for (v, &pad) in row.iter().zip(key_pad) {
            if !pad {
                max = max.max(*v);
            }
        }
        let mut sum = 0.0;
        for (v, &pad) in row.iter_mut().zip(key_pad) {
            *v = if pad { 0.0 } else { (*v - max).exp() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayerTrace {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per head, `len × len`.
    pub attention: Vec<Array2<f64>>,
    concat: Array2<f64>,
    drop_attn: Option<Array2<f64>>,
    ln1: LayerNormTrace,
    z: Array2<f64>,
    pre_relu: Array2<f64>,
    hidden: Array2<f64>,
    drop_ffn: Option<Array2<f64>>,
    ln2: LayerNormTrace,
}

impl EncoderLayerTrace {
    /// Signs of every ReLU input.
    pub fn activation_pattern(&self, out: &mut Vec<bool>) {
        out.extend(self.pre_relu.iter().map(|&v| v > 0.0));
    }
}

pub fn encoder_layer_forward(
    p: &EncoderLayer,
    heads: usize,
    x: &Array2<f64>,
    key_pad: &[bool],
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Array2<f64>, EncoderLayerTrace) {
    let (len, d) = x.dim();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let mut concat = Array2::zeros((len, d));
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let mut a = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        masked_softmax(&mut a, key_pad);
        concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
        attention.push(a);
    }
    let mut mh = concat.dot(&p.wo);
    let drop_attn = dropout.as_mut().and_then(|dr| dr.mask(len, d));
    if let Some(m) = &drop_attn {
        mh *= m;
    }
    let (z, ln1) = layer_norm(&(x + &mh), &p.ln1_gain, &p.ln1_bias);
    let pre_relu = z.dot(&p.w1) + &p.b1;
    let hidden = pre_relu.mapv(|v| v.max(0.0));
    let mut ffn = hidden.dot(&p.w2) + &p.b2;
    let drop_ffn = dropout.as_mut().and_then(|dr| dr.mask(len, d));
    if let Some(m) = &drop_ffn {
        ffn *= m;
    }
    let (out, ln2) = layer_norm(&(&z + &ffn), &p.ln2_gain, &p.ln2_bias);
    (
        out,
        EncoderLayerTrace {
            x: x.clone(),
            q,
            k,
            v,
            attention,
            concat,
            drop_attn,
            ln1,
            z,
            pre_relu,
            hidden,
            drop_ffn,
            ln2,
        },
    )
}

/// Backpropagates `dy` through one layer, accumulating into `g`; returns
/// the gradient with respect to the layer input.
pub fn encoder_layer_backward(
    p: &EncoderLayer,
    heads: usize,
    tr: &EncoderLayerTrace,
    dy: &Array2<f64>,
    g: &mut EncoderLayer,
) -> Array2<f64> {
    let d = tr.x.ncols();
    let dk = d / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let dr2 = layer_norm_backward(&tr.ln2, &p.ln2_gain, dy, &mut g.ln2_gain, &mut g.ln2_bias);
    let mut dz = dr2.clone();
    let mut dffn = dr2;
    if let Some(m) = &tr.drop_ffn {
        dffn *= m;
    }
    g.w2 += &tr.hidden.t().dot(&dffn);
    g.b2 += &dffn.sum_axis(Axis(0));
    let mut dpre = dffn.dot(&p.w2.t());
    dpre.zip_mut_with(&tr.pre_relu, |g, &x| {
        if x <= 0.0 {
            *g = 0.0
        }
    });
    g.w1 += &tr.z.t().dot(&dpre);
    g.b1 += &dpre.sum_axis(Axis(0));
    dz += &dpre.dot(&p.w1.t());

    let dr1 = layer_norm_backward(&tr.ln1, &p.ln1_gain, &dz, &mut g.ln1_gain, &mut g.ln1_bias);
    let mut dx = dr1.clone();
    let mut dmh = dr1;
    if let Some(m) = &tr.drop_attn {
        dmh *= m;
    }
    g.wo += &tr.concat.t().dot(&dmh);
    let dconcat = dmh.dot(&p.wo.t());

    let mut dq = Array2::zeros(tr.q.raw_dim());
    let mut dkey = Array2::zeros(tr.k.raw_dim());
    let mut dv = Array2::zeros(tr.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dk..(h + 1) * dk];
        let a = &tr.attention[h];
        let dhead = dconcat.slice(cols);
        let da = dhead.dot(&tr.v.slice(cols).t());
        dv.slice_mut(cols).assign(&a.t().dot(&dhead));
        // softmax Jacobian: dS = A ⊙ (dA − rowsum(dA ⊙ A))
        let rowsum = (&da * a).sum_axis(Axis(1));
        let mut dsc = da;
        for (mut row, rs) in dsc.rows_mut().into_iter().zip(rowsum.iter()) {
            row.mapv_inplace(|v| v - rs);
        }
        dsc *= a;
        dsc *= scale;
        dq.slice_mut(cols).assign(&dsc.dot(&tr.k.slice(cols)));
        dkey.slice_mut(cols).assign(&dsc.t().dot(&tr.q.slice(cols)));
    }
    g.wq += &tr.x.t().dot(&dq);
    g.wk += &tr.x.t().dot(&dkey);
    g.wv += &tr.x.t().dot(&dv);
    dx += &dq.dot(&p.wq.t());
    dx += &dkey.dot(&p.wk.t());
    dx += &dv.dot(&p.wv.t());
    dx
}

/// Mean of the rows not marked as padding.
pub fn masked_mean(x: &Array2<f64>, pad: &[bool]) -> Array1<f64> {
    let mut acc = Array1::zeros(x.ncols());
    let mut n = 0usize;
    for (row, &p) in x.rows().into_iter().zip(pad) {
        if !p {
            acc += &row;
            n += 1;
        }
    }
    acc / n.max(1) as f64
}
