//! Shared per-node MLP policy.
//!
//! Every DER bus runs the same network on its own feature vector: three local
//! measurements `[p_gen_n, p_load_n, q_load_n]` and two feeder-head
//! aggregates `[sum p_load - sum p_gen, sum q_load]`. Hidden layers use ReLU
//! (derivative taken as 0 at exactly 0); the scalar output is linear.

mod loss;

pub use loss::{
    combined_loss_grad, cvar_q_loss_grad, cvar_v_loss_grad, mse_loss_grad, prediction_losses,
    voltage_losses, CombinedLoss, LossComponents, LossConfig, LossGrad, LossMode,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::FeederModel;
use crate::opf::{OperatingCondition, Sample};

pub const N_FEATURES: usize = 5;
pub const DEFAULT_HIDDEN: [usize; 2] = [32, 32];

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("layer widths must start at {N_FEATURES} inputs and end in 1 output, got {0:?}")]
    BadWidths(Vec<usize>),
    #[error("parameter shapes do not match layer widths")]
    ShapeMismatch,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("alpha * |B| = {alpha} * {batch} is below one sample")]
    TailTooSmall { alpha: f64, batch: usize },
    #[error("softplus sharpness must be positive")]
    InvalidSharpness,
    #[error("voltage loss requires sensitivity matrices")]
    MissingSensitivities,
    #[error("risk weights must be nonnegative")]
    NegativeWeight,
}

/// Fully connected layer; `weights` is row-major `n_out x n_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            n_in,
            n_out,
            weights: vec![0.0; n_in * n_out],
            biases: vec![0.0; n_out],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        Self {
            n_in,
            n_out,
            weights: (0..n_in * n_out).map(|_| rng.gen_range(-limit..limit)).collect(),
            biases: vec![0.0; n_out],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.weights[o * self.n_in..(o + 1) * self.n_in];
            out.push(self.biases[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

/// Per-feature normalization statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity() -> Self {
        Self {
            mean: vec![0.0; N_FEATURES],
            std: vec![1.0; N_FEATURES],
        }
    }

    /// Mean and population standard deviation over every DER node of every
    /// sample. Zero-variance features get unit scale.
    pub fn fit(samples: &[Sample], model: &FeederModel) -> Self {
        let mut sum = [0.0; N_FEATURES];
        let mut sq = [0.0; N_FEATURES];
        let mut count = 0usize;
        for s in samples {
            let head = Broadcast::of(&s.condition);
            for &i in model.der_indices() {
                let f = FeatureVector::new(&s.condition, i, head).to_array();
                for j in 0..N_FEATURES {
                    sum[j] += f[j];
                }
                count += 1;
            }
        }
        if count == 0 {
            return Self::identity();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        for s in samples {
            let head = Broadcast::of(&s.condition);
            for &i in model.der_indices() {
                let f = FeatureVector::new(&s.condition, i, head).to_array();
                for j in 0..N_FEATURES {
                    sq[j] += (f[j] - mean[j]).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count as f64).sqrt();
                if sd > 0.0 { sd } else { 1.0 }
            })
            .collect();
        Self { mean, std }
    }

    pub fn normalize(&self, raw: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        let mut out = [0.0; N_FEATURES];
        for j in 0..N_FEATURES {
            out[j] = (raw[j] - self.mean[j]) / self.std[j];
        }
        out
    }
}

/// Feeder-head aggregates shared by every node in one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Broadcast {
    pub net_p_load: f64,
    pub q_load: f64,
}

impl Broadcast {
    pub fn of(oc: &OperatingCondition) -> Self {
        Self {
            net_p_load: oc.p_load.iter().sum::<f64>() - oc.p_gen.iter().sum::<f64>(),
            q_load: oc.q_load.iter().sum(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub local: [f64; 3],
    pub broadcast: [f64; 2],
}

impl FeatureVector {
    pub fn new(oc: &OperatingCondition, node: usize, head: Broadcast) -> Self {
        Self {
            local: [oc.p_gen[node], oc.p_load[node], oc.q_load[node]],
            broadcast: [head.net_p_load, head.q_load],
        }
    }

    pub fn to_array(&self) -> [f64; N_FEATURES] {
        let [a, b, c] = self.local;
        let [d, e] = self.broadcast;
        [a, b, c, d, e]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub layer_widths: Vec<usize>,
    pub layers: Vec<Dense>,
    /// CVaR auxiliary for the prediction loss.
    pub beta_q: f64,
    /// CVaR auxiliary for the voltage loss.
    pub beta_v: f64,
    pub feat_stats: FeatureStats,
}

fn check_widths(widths: &[usize]) -> Result<(), NnError> {
    let ok = widths.len() >= 2
        && widths[0] == N_FEATURES
        && *widths.last().unwrap() == 1
        && widths.iter().all(|&w| w > 0);
    if ok {
        Ok(())
    } else {
        Err(NnError::BadWidths(widths.to_vec()))
    }
}

/// `[5, hidden.., 1]`
pub fn widths_with_hidden(hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![N_FEATURES];
    w.extend_from_slice(hidden);
    w.push(1);
    w
}

impl PolicyParams {
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Result<Self, NnError> {
        check_widths(widths)?;
        Ok(Self {
            layer_widths: widths.to_vec(),
            layers: widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
            beta_q: 0.0,
            beta_v: 0.0,
            feat_stats: FeatureStats::identity(),
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self, NnError> {
        check_widths(widths)?;
        Ok(Self {
            layer_widths: widths.to_vec(),
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            beta_q: 0.0,
            beta_v: 0.0,
            feat_stats: FeatureStats::identity(),
        })
    }

    pub fn validate(&self) -> Result<(), NnError> {
        check_widths(&self.layer_widths)?;
        let shapes_ok = self.layers.len() + 1 == self.layer_widths.len()
            && self.layers.iter().zip(self.layer_widths.windows(2)).all(|(l, w)| {
                l.n_in == w[0]
                    && l.n_out == w[1]
                    && l.weights.len() == w[0] * w[1]
                    && l.biases.len() == w[1]
            })
            && self.feat_stats.mean.len() == N_FEATURES
            && self.feat_stats.std.len() == N_FEATURES
            && self.feat_stats.std.iter().all(|&s| s > 0.0);
        if shapes_ok {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch)
        }
    }

    /// Number of network weights and biases (excluding the CVaR auxiliaries).
    pub fn n_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Network weights and biases, layer by layer, weights before biases.
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_weights());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<(), NnError> {
        if flat.len() != self.n_weights() {
            return Err(NnError::ShapeMismatch);
        }
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        Ok(())
    }
}

/// Activations recorded during a forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    /// Input to each layer (normalized features first).
    inputs: Vec<Vec<f64>>,
    output: f64,
}

pub(crate) fn forward_trace(params: &PolicyParams, raw: &[f64; N_FEATURES]) -> Trace {
    let x = params.feat_stats.normalize(raw);
    let mut inputs = Vec::with_capacity(params.layers.len());
    inputs.push(x.to_vec());
    let last = params.layers.len() - 1;
    let mut out = Vec::new();
    for (t, layer) in params.layers.iter().enumerate() {
        layer.apply(inputs.last().unwrap(), &mut out);
        if t < last {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            inputs.push(out.clone());
        }
    }
    Trace {
        inputs,
        output: out[0],
    }
}

/// Accumulates `d_out * d(output)/d(params)` into `grad`.
pub(crate) fn backward(params: &PolicyParams, trace: &Trace, d_out: f64, grad: &mut Gradient) {
    if d_out == 0.0 {
        return;
    }
    let mut delta = vec![d_out];
    for t in (0..params.layers.len()).rev() {
        let layer = &params.layers[t];
        let input = &trace.inputs[t];
        let Dense { weights: gw, biases: gb, .. } = &mut grad.layers[t];
        for o in 0..layer.n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let row = &mut gw[o * layer.n_in..(o + 1) * layer.n_in];
            for (g, x) in row.iter_mut().zip(input) {
                *g += d * x;
            }
        }
        if t == 0 {
            break;
        }
        // Through the weights, then the ReLU of the previous layer (input > 0).
        let mut next = vec![0.0; layer.n_in];
        for o in 0..layer.n_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.n_in..(o + 1) * layer.n_in];
            for (n, w) in next.iter_mut().zip(row) {
                *n += d * w;
            }
        }
        for (n, x) in next.iter_mut().zip(input) {
            if *x <= 0.0 {
                *n = 0.0;
            }
        }
        delta = next;
    }
}

/// Gradient with the same layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Dense>,
    pub beta_q: f64,
    pub beta_v: f64,
}

impl Gradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            layers: params.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect(),
            beta_q: 0.0,
            beta_v: 0.0,
        }
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += scale * y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += scale * y);
        }
        self.beta_q += scale * other.beta_q;
        self.beta_v += scale * other.beta_v;
    }

    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.beta_q.is_finite()
            && self.beta_v.is_finite()
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

pub fn forward(params: &PolicyParams, features: &FeatureVector) -> Result<f64, NnError> {
    params.validate()?;
    Ok(forward_trace(params, &features.to_array()).output)
}

/// Shared network applied at every DER bus; zero elsewhere.
pub fn predict_all(params: &PolicyParams, oc: &OperatingCondition, model: &FeederModel) -> Vec<f64> {
    let head = Broadcast::of(oc);
    let mut q = vec![0.0; model.n_buses()];
    for &i in model.der_indices() {
        q[i] = forward_trace(params, &FeatureVector::new(oc, i, head).to_array()).output;
    }
    q
}

/// [`predict_all`] clamped to each inverter's reactive capability.
pub fn predict_all_clamped(
    params: &PolicyParams,
    oc: &OperatingCondition,
    model: &FeederModel,
) -> Vec<f64> {
    let mut q = predict_all(params, oc, model);
    for &i in model.der_indices() {
        let lim = model.q_limits()[i];
        q[i] = q[i].clamp(-lim, lim);
    }
    q
}
