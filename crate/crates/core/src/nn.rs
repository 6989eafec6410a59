//! Minimal dense networks with hand-written backpropagation.
//!
//! Activations are batches stored column-wise (`features x samples`), the
//! same layout as [`FeatureMatrix`](crate::FeatureMatrix).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{inf_norm, row_major, spectral_norm};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    #[serde(with = "row_major")]
    pub weight: DMatrix<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Xavier-style Gaussian initialization with zero bias.
    pub fn random(inputs: usize, outputs: usize, rng: &mut rng::Rng) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        Dense {
            weight: rng::gaussian_matrix(outputs, inputs, std, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: DMatrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.weight * x;
        for mut col in y.column_iter_mut() {
            for (v, b) in col.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }
}

/// Affine layers with `tanh` between consecutive layers (none after the
/// last one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: DMatrix::zeros(l.outputs(), l.inputs()),
                    bias: DVector::zeros(l.outputs()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }
}

impl Mlp {
    /// Random network with the given layer widths, e.g. `[16, 64, 10]`.
    pub fn random(widths: &[usize], rng: &mut rng::Rng) -> Self {
        assert!(
            widths.len() >= 2,
            "an MLP needs at least input and output widths"
        );
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| Dense::random(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros(widths: &[usize]) -> Self {
        Mlp {
            layers: widths
                .windows(2)
                .map(|w| Dense::zeros(w[0], w[1]))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Dense::outputs).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(Dense::outputs));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn check_input(&self, x: &DMatrix<f64>, context: &'static str) -> Result<()> {
        if x.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.input_dim(),
                actual: x.nrows(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.apply(|v| *v = v.tanh());
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            cache.inputs.push(h);
            h = if i < last {
                z.map(f64::tanh)
            } else {
                z.clone()
            };
            cache.pre.push(z);
        }
        (h, cache)
    }

    /// Gradients of a scalar loss with respect to every parameter and to the
    /// input, given `grad_out = dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache, grad_out: &DMatrix<f64>) -> (MlpGrads, DMatrix<f64>) {
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // d tanh(z) = 1 - tanh(z)^2
                g.zip_apply(&cache.pre[i], |gv, z| {
                    let t = z.tanh();
                    *gv *= 1.0 - t * t;
                });
            }
            let weight = &g * cache.inputs[i].transpose();
            let bias = g.column_sum();
            let next = self.layers[i].weight.transpose() * &g;
            grads.push(LayerGrad { weight, bias });
            g = next;
        }
        grads.reverse();
        (MlpGrads { layers: grads }, g)
    }

    /// Product of per-layer induced infinity norms; `tanh` is 1-Lipschitz,
    /// so this bounds the network's Lipschitz constant in the infinity norm.
    pub fn inf_norm_bound(&self) -> f64 {
        self.layers.iter().map(|l| inf_norm(&l.weight)).product()
    }

    /// Rescales any weight matrix whose spectral norm exceeds `max`.
    pub fn clip_spectral_norm(&mut self, max: f64) {
        for l in &mut self.layers {
            let s = spectral_norm(&l.weight);
            if s > max {
                l.weight *= max / s;
            }
        }
    }

    pub fn scale_weights(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
        }
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.as_mut_slice().iter_mut().chain(l.bias.iter_mut()))
    }

    /// Flattened parameters in the same order as [`MlpGrads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()).copied())
            .collect()
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        if let Some(p) = self.params_mut().nth(index) {
            *p = value;
        }
    }
}

/// Adam optimizer over one or more networks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, nets: &[&Mlp]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: nets.iter().map(|n| vec![0.0; n.param_count()]).collect(),
            second: nets.iter().map(|n| vec![0.0; n.param_count()]).collect(),
        }
    }

    pub fn step(&mut self, nets: &mut [&mut Mlp], grads: &[&MlpGrads]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (net, g)) in nets.iter_mut().zip(grads).enumerate() {
            let flat = g.flatten();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, p) in net.params_mut().enumerate() {
                let gi = flat[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *p -= self.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Consecutive loss increases tolerated before aborting.
const DIVERGENCE_PATIENCE: usize = 10;

/// Aborts training when the loss turns non-finite or keeps rising.
pub(crate) struct DivergenceWatch {
    last: f64,
    first: Option<f64>,
    rising: usize,
}

impl DivergenceWatch {
    pub(crate) fn new() -> Self {
        DivergenceWatch {
            last: f64::INFINITY,
            first: None,
            rising: 0,
        }
    }

    pub(crate) fn observe(&mut self, epoch: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                loss,
                reason: "non-finite loss",
            });
        }
        if loss > self.last {
            self.rising += 1;
            // Adam spikes near a small minimum are not divergence; the streak
            // must also undo all progress since the first epoch.
            if self.rising >= DIVERGENCE_PATIENCE && loss > self.first.unwrap_or(f64::INFINITY) {
                return Err(Error::Divergence {
                    epoch,
                    loss,
                    reason: "loss increased for 10 consecutive epochs",
                });
            }
        } else {
            self.rising = 0;
        }
        self.last = loss;
        self.first.get_or_insert(loss);
        Ok(())
    }
}

/// Column-wise log-softmax.
pub fn log_softmax(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut col in out.column_iter_mut() {
        let max = col.max();
        let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        col.add_scalar_mut(-lse);
    }
    out
}

/// Mean cross-entropy over columns and its gradient with respect to the
/// logits.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> (f64, DMatrix<f64>) {
    let n = labels.len() as f64;
    let logp = log_softmax(logits);
    let mut loss = 0.0;
    let mut grad = logp.map(f64::exp);
    for (j, &y) in labels.iter().enumerate() {
        loss -= logp[(y, j)];
        grad[(y, j)] -= 1.0;
    }
    (loss / n, grad / n)
}

/// Column-wise argmax; ties resolve to the lowest class index.
pub fn argmax_columns(m: &DMatrix<f64>) -> Vec<usize> {
    m.column_iter()
        .map(|c| {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i] > c[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Gradient through batch power normalization `y = x / sqrt(mean(x^2))`:
/// `dx = (g - y * mean(g * y)) / s`.
pub fn power_norm_backward(
    normalized: &DMatrix<f64>,
    scale: f64,
    grad: &DMatrix<f64>,
) -> DMatrix<f64> {
    let mean_gy = grad.dot(normalized) / normalized.len() as f64;
    (grad - normalized * mean_gy) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::normalize_power;
    use crate::matrix::FeatureMatrix;

    fn fd_check(net: &Mlp, x: &DMatrix<f64>, labels: &[usize]) -> f64 {
        let (out, cache) = net.forward_cached(x);
        let (_, g) = cross_entropy(&out, labels);
        let (grads, gx) = net.backward(&cache, &g);
        let analytic = grads.flatten();
        let params = net.flatten();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, &p) in params.iter().enumerate() {
            let mut a = net.clone();
            let mut b = net.clone();
            a.set_param(i, p + h);
            b.set_param(i, p - h);
            let fd = (cross_entropy(&a.forward(x), labels).0
                - cross_entropy(&b.forward(x), labels).0)
                / (2.0 * h);
            worst = worst.max((fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8));
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (cross_entropy(&net.forward(&xp), labels).0
                - cross_entropy(&net.forward(&xm), labels).0)
                / (2.0 * h);
            worst = worst.max((fd - gx[k]).abs() / (fd.abs() + gx[k].abs()).max(1e-8));
        }
        worst
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut r = rng::stream(10, 0);
        let net = Mlp::random(&[4, 6, 3], &mut r);
        let x = rng::gaussian_matrix(4, 5, 1.0, &mut r);
        assert!(fd_check(&net, &x, &[0, 1, 2, 1, 0]) < 1e-5);
    }

    #[test]
    fn log_softmax_normalizes() {
        let logits = DMatrix::from_row_slice(3, 2, &[1.0, 1000.0, 2.0, -5.0, 3.0, 0.0]);
        let lp = log_softmax(&logits);
        for c in lp.column_iter() {
            assert!((c.iter().map(|v| v.exp()).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let m = DMatrix::from_row_slice(3, 2, &[0.5, 1.0, 0.5, 2.0, 0.1, 2.0]);
        assert_eq!(argmax_columns(&m), vec![0, 1]);
    }

    #[test]
    fn power_norm_gradient() {
        let mut r = rng::stream(1, 2);
        let x = rng::gaussian_matrix(3, 4, 2.0, &mut r);
        let w = rng::gaussian_matrix(3, 4, 1.0, &mut r);
        let f = |x: &DMatrix<f64>| {
            normalize_power(&FeatureMatrix::new(x.clone()))
                .unwrap()
                .0
                .as_matrix()
                .dot(&w)
        };
        let (y, s) = normalize_power(&FeatureMatrix::new(x.clone())).unwrap();
        let g = power_norm_backward(y.as_matrix(), s, &w);
        for k in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (f(&p) - f(&m)) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn inf_norm_bound_of_linear_layer() {
        let net = Mlp {
            layers: vec![Dense {
                weight: DMatrix::from_row_slice(2, 2, &[1.0, -3.0, 0.5, 0.5]),
                bias: vec![0.0, 0.0],
            }],
        };
        assert_eq!(net.inf_norm_bound(), 4.0);
        let mut doubled = net.clone();
        doubled.scale_weights(2.0);
        assert_eq!(doubled.inf_norm_bound(), 8.0);
    }

    #[test]
    fn adam_reduces_loss() {
        let mut r = rng::stream(3, 3);
        let mut net = Mlp::random(&[2, 8, 2], &mut r);
        let x = DMatrix::from_row_slice(2, 4, &[1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
        let y = [0, 1, 1, 0];
        let start = cross_entropy(&net.forward(&x), &y).0;
        let mut opt = Adam::new(0.05, &[&net]);
        for _ in 0..300 {
            let (out, cache) = net.forward_cached(&x);
            let (_, g) = cross_entropy(&out, &y);
            let (grads, _) = net.backward(&cache, &g);
            opt.step(&mut [&mut net], &[&grads]);
        }
        assert!(cross_entropy(&net.forward(&x), &y).0 < 0.1 * start);
    }
}
