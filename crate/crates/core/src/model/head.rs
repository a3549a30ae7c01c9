//! Trainable classification head: dense layers with ReLU and dropout on top
//! of the pooled backbone features, followed by a softmax output layer.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::gemm_strided;
use crate::rng::stream;

pub const DENSE_CHOICES: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const MAX_LAYERS: usize = 3;
pub const MAX_DROPOUT: f64 = 0.5;
pub const LR_MIN: f64 = 1e-6;
pub const LR_MAX: f64 = 1e-3;

/// Head hyperparameters. Slots beyond `n_layers` hold zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_layers: usize,
    pub dense_units: [usize; MAX_LAYERS],
    pub dropout: [f64; MAX_LAYERS],
    pub learning_rate: f64,
}

impl HeadConfig {
    /// Build from `(units, dropout)` pairs.
    pub fn new(layers: &[(usize, f64)], learning_rate: f64) -> Result<Self> {
        let mut dense_units = [0; MAX_LAYERS];
        let mut dropout = [0.0; MAX_LAYERS];
        for (i, &(u, d)) in layers.iter().enumerate().take(MAX_LAYERS) {
            dense_units[i] = u;
            dropout[i] = d;
        }
        let cfg = Self {
            n_layers: layers.len(),
            dense_units,
            dropout,
            learning_rate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_LAYERS).contains(&self.n_layers) {
            return Err(Error::invalid(format!("n_layers {} not in 1..={MAX_LAYERS}", self.n_layers)));
        }
        for i in 0..MAX_LAYERS {
            let (u, d) = (self.dense_units[i], self.dropout[i]);
            if i < self.n_layers {
                if !DENSE_CHOICES.contains(&u) {
                    return Err(Error::invalid(format!("dense_units[{i}] = {u} not in {DENSE_CHOICES:?}")));
                }
                if !(0.0..=MAX_DROPOUT).contains(&d) {
                    return Err(Error::invalid(format!("dropout[{i}] = {d} outside [0, {MAX_DROPOUT}]")));
                }
            } else if u != 0 || d != 0.0 {
                return Err(Error::invalid(format!("unused slot {i} must be zero")));
            }
        }
        if !(LR_MIN..=LR_MAX).contains(&self.learning_rate) {
            return Err(Error::invalid(format!(
                "learning_rate {} outside [{LR_MIN}, {LR_MAX}]",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Active `(units, dropout)` pairs.
    pub fn layers(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.n_layers).map(|i| (self.dense_units[i], self.dropout[i]))
    }

    /// `sum over layers of (inputs + 1) * outputs`.
    pub fn trainable_params(&self, feature_dim: usize, n_classes: usize) -> usize {
        let mut prev = feature_dim;
        let mut total = 0;
        for (u, _) in self.layers() {
            total += (prev + 1) * u;
            prev = u;
        }
        total + (prev + 1) * n_classes
    }
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self::new(&[(256, 0.2)], 1e-3).expect("valid default")
    }
}

/// Fully connected layer; `weight` is `inputs x outputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Dense {
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f32).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    /// `rows x outputs` affine map of a `rows x inputs` batch.
    fn apply(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut z = Vec::with_capacity(rows * self.outputs);
        for _ in 0..rows {
            z.extend_from_slice(&self.bias);
        }
        gemm_strided(
            rows,
            self.inputs,
            self.outputs,
            x,
            (self.inputs, 1),
            &self.weight,
            (self.outputs, 1),
            &mut z,
            true,
        );
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub config: HeadConfig,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Dense>,
}

/// Gradients with the same layout as [`Head::layers`].
pub(crate) struct Grads {
    layers: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Adam with the Keras defaults.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    step: i32,
    moments: Vec<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-7;

impl Adam {
    pub fn new(head: &Head, lr: f64) -> Self {
        let moments = head
            .layers
            .iter()
            .map(|l| {
                (
                    vec![0.0; l.weight.len()],
                    vec![0.0; l.weight.len()],
                    vec![0.0; l.bias.len()],
                    vec![0.0; l.bias.len()],
                )
            })
            .collect();
        Self { lr, step: 0, moments }
    }

    pub(crate) fn update(&mut self, head: &mut Head, grads: &Grads) {
        self.step += 1;
        let lr_t = (self.lr * (1.0 - BETA2.powi(self.step)).sqrt() / (1.0 - BETA1.powi(self.step))) as f32;
        let (b1, b2, eps) = (BETA1 as f32, BETA2 as f32, EPSILON as f32);
        let step = |p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr_t * m[i] / (v[i].sqrt() + eps);
            }
        };
        for ((layer, (gw, gb)), (mw, vw, mb, vb)) in head.layers.iter_mut().zip(&grads.layers).zip(&mut self.moments) {
            step(&mut layer.weight, gw, mw, vw);
            step(&mut layer.bias, gb, mb, vb);
        }
    }
}

impl Head {
    /// Glorot-uniform weights and zero biases, seeded.
    pub fn init(feature_dim: usize, config: &HeadConfig, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if feature_dim == 0 || n_classes < 2 {
            return Err(Error::invalid("head needs features and at least two classes"));
        }
        let mut rng = stream(seed, &[0x4EAD]);
        let mut prev = feature_dim;
        let mut layers = Vec::new();
        for (u, _) in config.layers() {
            layers.push(Dense::glorot(prev, u, &mut rng));
            prev = u;
        }
        layers.push(Dense::glorot(prev, n_classes, &mut rng));
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    /// Reassemble from stored layers, checking dimensions.
    pub fn from_layers(config: HeadConfig, layers: Vec<Dense>) -> Result<Self> {
        if layers.len() != config.n_layers + 1 {
            return Err(Error::invalid("layer count does not match head config"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::invalid(format!("layer {i} has inconsistent sizes")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(Error::invalid(format!("layer {i} input width mismatch")));
            }
            if i < config.n_layers && l.outputs != config.dense_units[i] {
                return Err(Error::invalid(format!("layer {i} width differs from config")));
            }
        }
        Ok(Self { config, layers })
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn n_classes(&self) -> usize {
        self.layers.last().expect("output layer").outputs
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Pre-softmax scores for a batch of `rows` feature vectors.
    pub fn logits_batch(&self, x: &[f32], rows: usize) -> Vec<f32> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h, rows);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    pub fn logits(&self, features: &[f32]) -> Vec<f32> {
        self.logits_batch(features, 1)
    }

    pub fn probabilities(&self, features: &[f32]) -> Vec<f64> {
        softmax(&self.logits(features))
    }

    /// Gradient of logit `class` with respect to the input features.
    pub fn logit_gradient(&self, features: &[f32], class: usize) -> Vec<f32> {
        let mut inputs = Vec::new();
        let mut masks = Vec::new();
        let mut h = features.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            inputs.push(h.clone());
            h = layer.apply(&h, 1);
            if i < last {
                masks.push(h.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect::<Vec<f32>>());
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        let mut d = vec![0.0f32; self.n_classes()];
        d[class] = 1.0;
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let mut dx = vec![0.0f32; l.inputs];
            gemm_strided(1, l.outputs, l.inputs, &d, (l.outputs, 1), &l.weight, (1, l.outputs), &mut dx, false);
            if i > 0 {
                dx.iter_mut().zip(&masks[i - 1]).for_each(|(g, m)| *g *= m);
            }
            d = dx;
        }
        d
    }

    /// One forward/backward pass over a batch with inverted dropout.
    /// Returns summed cross-entropy, correct-prediction count and gradients
    /// of the mean loss.
    pub(crate) fn batch_gradients(
        &self,
        x: &[f32],
        labels: &[usize],
        rng: Option<&mut rand_chacha::ChaCha8Rng>,
    ) -> (f64, usize, Grads) {
        let rows = labels.len();
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut masks: Vec<Vec<f32>> = Vec::with_capacity(last);
        let mut h = x.to_vec();
        let mut rng = rng;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h, rows);
            inputs.push(std::mem::take(&mut h));
            if i < last {
                let p = self.config.dropout[i];
                let keep = (1.0 / (1.0 - p)) as f32;
                let mask: Vec<f32> = z
                    .iter()
                    .map(|&v| {
                        let alive = match rng.as_deref_mut() {
                            Some(r) if p > 0.0 => r.random::<f64>() >= p,
                            _ => true,
                        };
                        if v > 0.0 && alive {
                            if p > 0.0 && rng.is_some() {
                                keep
                            } else {
                                1.0
                            }
                        } else {
                            0.0
                        }
                    })
                    .collect();
                h = z.iter().zip(&mask).map(|(a, m)| a * m).collect();
                masks.push(mask);
            } else {
                h = z;
            }
        }
        let k = self.n_classes();
        let mut loss = 0.0;
        let mut correct = 0;
        let mut d = vec![0.0f32; rows * k];
        for r in 0..rows {
            let row = &h[r * k..(r + 1) * k];
            let p = softmax(row);
            loss -= p[labels[r]].max(1e-300).ln();
            if argmax(&p) == labels[r] {
                correct += 1;
            }
            for c in 0..k {
                let t = if c == labels[r] { 1.0 } else { 0.0 };
                d[r * k + c] = ((p[c] - t) / rows as f64) as f32;
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let l = &self.layers[i];
            let mut gw = vec![0.0f32; l.weight.len()];
            gemm_strided(l.inputs, rows, l.outputs, &inputs[i], (1, l.inputs), &d, (l.outputs, 1), &mut gw, false);
            let mut gb = vec![0.0f32; l.outputs];
            for row in d.chunks_exact(l.outputs) {
                gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
            }
            if i > 0 {
                let mut dx = vec![0.0f32; rows * l.inputs];
                gemm_strided(rows, l.outputs, l.inputs, &d, (l.outputs, 1), &l.weight, (1, l.outputs), &mut dx, false);
                dx.iter_mut().zip(&masks[i - 1]).for_each(|(g, m)| *g *= m);
                d = dx;
            }
            grads.push((gw, gb));
        }
        grads.reverse();
        (loss, correct, Grads { layers: grads })
    }
}

/// Numerically stable softmax in double precision.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(f64::from(b)));
    let e: Vec<f64> = logits.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest entry; the first one on ties.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_domains() {
        assert!(HeadConfig::new(&[(256, 0.1)], 1e-4).is_ok());
        assert!(HeadConfig::new(&[(4096, 0.5), (4096, 0.5), (4096, 0.5)], 1e-3).is_ok());
        assert!(HeadConfig::new(&[(300, 0.1)], 1e-4).is_err());
        assert!(HeadConfig::new(&[(256, 0.6)], 1e-4).is_err());
        assert!(HeadConfig::new(&[], 1e-4).is_err());
        assert!(HeadConfig::new(&[(256, 0.1)], 1e-2).is_err());
        let c = HeadConfig::new(&[(512, 0.3)], 1e-4).unwrap();
        assert_eq!(c.dense_units, [512, 0, 0]);
        assert_eq!(c.dropout, [0.3, 0.0, 0.0]);
    }

    #[test]
    fn analytic_parameter_count() {
        let c = HeadConfig::new(&[(256, 0.0)], 1e-4).unwrap();
        let h = Head::init(576, &c, 4, 1).unwrap();
        assert_eq!(h.parameter_count(), (576 + 1) * 256 + (256 + 1) * 4);
        assert_eq!(c.trainable_params(576, 4), h.parameter_count());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = HeadConfig::new(&[(256, 0.0), (256, 0.0)], 1e-4).unwrap();
        let head = Head::init(6, &c, 3, 7).unwrap();
        let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.7).sin()).collect();
        let labels = [2, 0];
        let (_, _, g) = head.batch_gradients(&x, &labels, None);
        let loss = |h: &Head| h.batch_gradients(&x, &labels, None).0 / 2.0;
        for (li, idx) in [(0, 5), (1, 300), (2, 10), (2, 400)] {
            let mut hp = head.clone();
            let mut hm = head.clone();
            let eps = 1e-2;
            hp.layers[li].weight[idx] += eps;
            hm.layers[li].weight[idx] -= eps;
            let numeric = (loss(&hp) - loss(&hm)) / (2.0 * f64::from(eps));
            let analytic = f64::from(g.layers[li].0[idx]);
            assert!((numeric - analytic).abs() < 1e-3 + 1e-2 * numeric.abs(), "{li}/{idx}: {numeric} vs {analytic}");
        }
        // input gradient of a logit
        let f: Vec<f32> = x[..6].to_vec();
        let dg = head.logit_gradient(&f, 1);
        for j in 0..6 {
            let mut fp = f.clone();
            let mut fm = f.clone();
            fp[j] += 1e-3;
            fm[j] -= 1e-3;
            let numeric = (head.logits(&fp)[1] - head.logits(&fm)[1]) / 2e-3;
            assert!((numeric - dg[j]).abs() < 1e-3, "feature {j}: {numeric} vs {}", dg[j]);
        }
    }

    #[test]
    fn softmax_is_a_distribution() {
        let p = softmax(&[1000.0, -1000.0, 3.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }
}
