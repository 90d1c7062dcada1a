//! Small models trained on frozen embeddings.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Per-column affine map to zero mean and unit variance; constant columns
/// are only centred.
#[derive(Debug, Clone)]
pub struct Standardizer {
    mean: Array1<f64>,
    scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        let scale = var.mapv(|v| if v > 1e-24 { 1.0 / v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) * &self.scale
    }
}

/// Adam over a flat parameter vector.
#[derive(Debug, Clone)]
struct FlatAdam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl FlatAdam {
    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        use crate::trainer::adam::{BETA1, BETA2, EPSILON};
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
        }
    }
}

/// Linear layer followed by softmax, trained with full-batch cross-entropy.
#[derive(Debug, Clone)]
pub struct SoftmaxProbe {
    std: Standardizer,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl SoftmaxProbe {
    pub fn train(x: ArrayView2<f64>, y: &[u32], num_classes: usize, epochs: usize, lr: f64) -> Self {
        let std = Standardizer::fit(x);
        let xs = std.transform(x);
        let (n, d) = xs.dim();
        let mut w = Array2::<f64>::zeros((d, num_classes));
        let mut b = Array1::<f64>::zeros(num_classes);
        let mut opt = FlatAdam::new(d * num_classes + num_classes, lr);
        let mut flat = vec![0.0; d * num_classes + num_classes];
        for _ in 0..epochs {
            let mut p = softmax_rows(xs.dot(&w) + &b);
            for (i, &c) in y.iter().enumerate() {
                p[[i, c as usize]] -= 1.0;
            }
            p /= n as f64;
            let gw = xs.t().dot(&p);
            let gb = p.sum_axis(Axis(0));
            let grads: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
            for (dst, src) in flat.iter_mut().zip(w.iter().chain(b.iter())) {
                *dst = *src;
            }
            opt.step(&mut flat, &grads);
            for (dst, src) in w.iter_mut().chain(b.iter_mut()).zip(&flat) {
                *dst = *src;
            }
        }
        Self { std, w, b }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<u32> {
        let logits = self.std.transform(x).dot(&self.w) + &self.b;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    }
}

fn softmax_rows(mut z: Array2<f64>) -> Array2<f64> {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    z
}

/// Ordinary least squares with an intercept, solved by SVD.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// Intercept first, then one coefficient per column.
    pub coef: Vec<f64>,
}

impl LinearProbe {
    pub fn fit(x: ArrayView2<f64>, y: &[f64]) -> Result<Self> {
        let (n, d) = x.dim();
        if n < d + 1 {
            return Err(Error::Eval(format!(
                "least squares needs at least {} samples, got {n}",
                d + 1
            )));
        }
        let a = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
        let b = DVector::from_column_slice(y);
        let svd = a.svd(true, true);
        let sol = svd
            .solve(&b, 1e-12)
            .map_err(|e| Error::Eval(format!("least squares failed: {e}")))?;
        Ok(Self {
            coef: sol.iter().copied().collect(),
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| self.coef[0] + r.iter().zip(&self.coef[1..]).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// `d → h1 → h2 → 1` perceptron with ReLU, trained on standardised inputs
/// and targets with mean-squared error.
#[derive(Debug, Clone)]
pub struct MlpRegressor {
    std: Standardizer,
    y_mean: f64,
    y_scale: f64,
    layers: Vec<(Array2<f64>, Array1<f64>)>,
}

impl MlpRegressor {
    pub fn train(x: ArrayView2<f64>, y: &[f64], hidden: [usize; 2], cfg: &MlpConfig) -> Self {
        let std = Standardizer::fit(x);
        let xs = std.transform(x);
        let n = xs.nrows();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
        // A constant target is predicted exactly; the network output is then
        // scaled by zero.
        let (y_scale, out_scale) = if var > 1e-24 { (var.sqrt(), var.sqrt()) } else { (1.0, 0.0) };
        let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let widths = [xs.ncols(), hidden[0], hidden[1], 1];
        let mut layers: Vec<(Array2<f64>, Array1<f64>)> = widths
            .windows(2)
            .map(|w| {
                let b = 1.0 / (w[0] as f64).sqrt();
                (
                    Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-b..=b)),
                    Array1::from_shape_simple_fn(w[1], || rng.random_range(-b..=b)),
                )
            })
            .collect();
        let total: usize = layers.iter().map(|(w, b)| w.len() + b.len()).sum();
        let mut opt = FlatAdam::new(total, cfg.lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut flat = vec![0.0; total];
        let mut grads = vec![0.0; total];
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let xb = xs.select(Axis(0), chunk);
                let yb: Array1<f64> = chunk.iter().map(|&i| ys[i]).collect();
                // forward
                let mut acts = vec![xb];
                for (l, (w, b)) in layers.iter().enumerate() {
                    let mut z = acts[l].dot(w) + b;
                    if l + 1 < layers.len() {
                        z.mapv_inplace(|v| v.max(0.0));
                    }
                    acts.push(z);
                }
                let out = acts.last().unwrap().column(0).to_owned();
                let m = chunk.len() as f64;
                let mut delta = ((&out - &yb) * (2.0 / m)).insert_axis(Axis(1));
                // backward, last layer first
                let mut layer_grads = Vec::with_capacity(layers.len());
                for l in (0..layers.len()).rev() {
                    let gw = acts[l].t().dot(&delta);
                    let gb = delta.sum_axis(Axis(0));
                    if l > 0 {
                        let mut prev = delta.dot(&layers[l].0.t());
                        prev.zip_mut_with(&acts[l], |g, &a| {
                            if a <= 0.0 {
                                *g = 0.0
                            }
                        });
                        delta = prev;
                    }
                    layer_grads.push((gw, gb));
                }
                layer_grads.reverse();
                let mut k = 0;
                for ((w, b), (gw, gb)) in layers.iter().zip(&layer_grads) {
                    for (v, g) in w.iter().chain(b.iter()).zip(gw.iter().chain(gb.iter())) {
                        flat[k] = *v;
                        grads[k] = *g;
                        k += 1;
                    }
                }
                opt.step(&mut flat, &grads);
                let mut k = 0;
                for (w, b) in layers.iter_mut() {
                    for v in w.iter_mut().chain(b.iter_mut()) {
                        *v = flat[k];
                        k += 1;
                    }
                }
            }
        }
        Self {
            std,
            y_mean,
            y_scale: out_scale,
            layers,
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let mut a = self.std.transform(x);
        for (l, (w, b)) in self.layers.iter().enumerate() {
            a = a.dot(w) + b;
            if l + 1 < self.layers.len() {
                a.mapv_inplace(|v| v.max(0.0));
            }
        }
        a.column(0).iter().map(|v| v * self.y_scale + self.y_mean).collect()
    }
}
