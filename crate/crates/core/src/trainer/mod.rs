//! Mini-batch training with CVaR-threshold batch selection.
//!
//! Each drawn batch is scored by the empirical CVaR of the per-sample losses
//! its loss mode is risk-averse to (prediction error, plus worst-bus voltage
//! deviation for the joint mode). With selection on, a batch is used only if
//! that score is at least the running threshold, which then moves up to the
//! score. The threshold starts at zero and, by default, drops back to zero at
//! the start of every epoch.

mod eval;

pub use eval::{evaluate, EvalReport, NodeError, VIOLATION_TOL};

use std::io::Write;
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{FeederModel, SensitivityPair};
use crate::nn::{
    combined_loss_grad, prediction_losses, voltage_losses, widths_with_hidden, FeatureStats,
    Gradient, LossComponents, LossConfig, LossMode, NnError, PolicyParams, DEFAULT_HIDDEN,
};
use crate::opf::{Dataset, Sample};
use crate::risk::{cvar_rockafellar, RiskError};

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub alpha: f64,
    pub lambda_q: f64,
    pub lambda_v: f64,
    pub eta: f64,
    pub batch_size: usize,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub selection_enabled: bool,
    pub threshold_reset: bool,
    pub optimizer: OptimizerKind,
    pub tau_q: f64,
    pub tau_v: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Mse,
            alpha: 0.2,
            lambda_q: 1.0,
            lambda_v: 1.0,
            eta: 1e-3,
            batch_size: 64,
            epsilon: 1e-6,
            max_epochs: 200,
            selection_enabled: false,
            threshold_reset: true,
            optimizer: OptimizerKind::Adam,
            tau_q: 1e-3,
            tau_v: 1e-3,
            hidden: DEFAULT_HIDDEN.to_vec(),
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("batch size {batch} exceeds the {n} training samples")]
    BatchTooLarge { batch: usize, n: usize },
    #[error("dataset was generated for feeder {dataset}, model is {model}")]
    FeederMismatch { dataset: String, model: String },
    #[error("training diverged at epoch {epoch}, batch {batch_id}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch_id: usize,
        loss: f64,
        components: LossComponents,
    },
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("parameter and gradient shapes differ")]
    ShapeMismatch,
    #[error("split is empty")]
    EmptySplit,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.eta > 0.0) {
            return bad("eta must be positive");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if !(self.tau_q > 0.0 && self.tau_v > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.lambda_q >= 0.0 && self.lambda_v >= 0.0) {
            return bad("lambda must be nonnegative");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if (self.batch_size as f64) * self.alpha < 1.0 - 1e-9 {
            return bad("batch_size must be at least ceil(1 / alpha)");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn widths(&self) -> Vec<usize> {
        widths_with_hidden(&self.hidden)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mode: self.mode,
            lambda_q: self.lambda_q,
            lambda_v: self.lambda_v,
            alpha: self.alpha,
            tau_q: self.tau_q,
            tau_v: self.tau_v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batches {
    pub batches: Vec<Vec<usize>>,
    /// Samples left out because the final partial batch had `alpha |B| < 1`.
    pub dropped: usize,
}

/// Seeded shuffle of `0..n` partitioned into batches of `batch_size`.
///
/// The permutation comes from a ChaCha stream keyed by `seed` with the epoch
/// as stream id, so each (seed, epoch) pair has its own independent shuffle.
pub fn draw_batches(
    n: usize,
    batch_size: usize,
    epoch: usize,
    seed: u64,
    alpha: f64,
) -> Result<Batches, TrainError> {
    if batch_size == 0 || batch_size > n {
        return Err(TrainError::BatchTooLarge { batch: batch_size, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size).map(<[usize]>::to_vec).collect();
    let mut dropped = 0;
    if let Some(last) = batches.last() {
        if alpha * (last.len() as f64) < 1.0 - 1e-9 {
            dropped = last.len();
            debug!("epoch {epoch}: dropping final batch of {dropped} (alpha |B| < 1)");
            batches.pop();
        }
    }
    Ok(Batches { batches, dropped })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        Self {
            kind,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Trainable values: network weights, then `beta_q`, `beta_v`.
fn trainable(p: &PolicyParams) -> Vec<f64> {
    let mut t = p.flat_weights();
    t.push(p.beta_q);
    t.push(p.beta_v);
    t
}

fn set_trainable(p: &mut PolicyParams, t: &[f64]) -> Result<(), TrainError> {
    let n = p.n_weights();
    if t.len() != n + 2 {
        return Err(TrainError::ShapeMismatch);
    }
    p.set_flat_weights(&t[..n])?;
    p.beta_q = t[n];
    p.beta_v = t[n + 1];
    Ok(())
}

fn gradient_vector(g: &Gradient) -> Vec<f64> {
    let mut t = g.flat_weights();
    t.push(g.beta_q);
    t.push(g.beta_v);
    t
}

/// One descent step. SGD is `phi - eta g`; Adam uses bias-corrected first and
/// second moments.
pub fn optimizer_step(
    params: &PolicyParams,
    grads: &Gradient,
    state: &mut OptimizerState,
    eta: f64,
) -> Result<PolicyParams, TrainError> {
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    let mut theta = trainable(params);
    let g = gradient_vector(grads);
    if g.len() != theta.len() || state.m.len() != theta.len() {
        return Err(TrainError::ShapeMismatch);
    }
    match state.kind {
        OptimizerKind::Sgd => {
            for (t, gi) in theta.iter_mut().zip(&g) {
                *t -= eta * gi;
            }
        }
        OptimizerKind::Adam => {
            state.step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
            let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
            for i in 0..theta.len() {
                state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
                state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = state.m[i] / c1;
                let v_hat = state.v[i] / c2;
                theta[i] -= eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
    }
    let mut out = params.clone();
    set_trainable(&mut out, &theta)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub batch_id: usize,
    pub batch_cvar: f64,
    /// Threshold in force when the batch was scored.
    pub threshold: f64,
    pub accepted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_components: Option<LossComponents>,
    pub param_delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTotals {
    pub epochs: usize,
    pub batches_drawn: usize,
    pub gradient_updates: usize,
    pub dropped_samples: usize,
    pub stop_reason: StopReason,
    /// Seconds; the only nondeterministic field.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<IterationRecord>,
    pub totals: TrainTotals,
}

impl TrainLog {
    /// One JSON object per iteration.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        w.flush()
    }

    pub fn read_jsonl<R: std::io::BufRead>(r: R) -> std::io::Result<Vec<IterationRecord>> {
        r.lines()
            .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect()
    }

    pub fn epoch_time(&self) -> f64 {
        self.totals.wall_time / self.totals.epochs.max(1) as f64
    }
}

/// Empirical batch CVaR of the losses the mode is risk-averse to. The plain
/// prediction mode is scored on its prediction losses.
pub fn batch_risk(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
    s: &SensitivityPair,
    mode: LossMode,
    alpha: f64,
) -> Result<f64, TrainError> {
    let lq = prediction_losses(params, batch, model);
    let mut risk = cvar_rockafellar(&lq, alpha)?.cvar;
    if mode.uses_v_risk() {
        let lv = voltage_losses(params, batch, model, s)?;
        risk += cvar_rockafellar(&lv, alpha)?.cvar;
    }
    Ok(risk)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Fresh parameters for `cfg`: seeded initialization and train-split
/// feature statistics.
pub fn init_params(dataset: &Dataset, model: &FeederModel, cfg: &TrainConfig) -> Result<PolicyParams, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = PolicyParams::init(&cfg.widths(), &mut rng)?;
    p.feat_stats = FeatureStats::fit(dataset.train(), model);
    Ok(p)
}

/// Runs mini-batch descent over the training split.
pub fn train(
    dataset: &Dataset,
    model: &FeederModel,
    s: &SensitivityPair,
    params_init: &PolicyParams,
    cfg: &TrainConfig,
) -> Result<(PolicyParams, TrainLog), TrainError> {
    cfg.validate()?;
    params_init.validate()?;
    let hash = model.content_hash();
    if dataset.feeder_ref != hash {
        return Err(TrainError::FeederMismatch {
            dataset: dataset.feeder_ref.clone(),
            model: hash,
        });
    }
    let train_split = dataset.train();
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let start = Instant::now();
    let loss_cfg = cfg.loss_config();
    let mut params = params_init.clone();
    let mut state = OptimizerState::new(cfg.optimizer, params.n_weights() + 2);
    let mut records = Vec::new();
    let mut threshold = 0.0;
    let mut betas_ready = false;
    let mut updates = 0;
    let mut dropped_samples = 0;
    let mut epochs = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    'epochs: for epoch in 0..cfg.max_epochs {
        epochs = epoch + 1;
        if cfg.threshold_reset {
            threshold = 0.0;
        }
        let drawn = draw_batches(train_split.len(), cfg.batch_size, epoch, cfg.seed, cfg.alpha)?;
        dropped_samples += drawn.dropped;
        for (batch_id, idx) in drawn.batches.iter().enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_split[i]).collect();
            let score = batch_risk(&params, &batch, model, s, cfg.mode, cfg.alpha)?;
            let prevailing = threshold;
            let accepted = !cfg.selection_enabled || score >= prevailing;
            if !accepted {
                records.push(IterationRecord {
                    epoch,
                    batch_id,
                    batch_cvar: score,
                    threshold: prevailing,
                    accepted,
                    loss: None,
                    loss_components: None,
                    param_delta: 0.0,
                });
                continue;
            }
            if cfg.selection_enabled {
                threshold = score;
            }
            if !betas_ready {
                params.beta_q = mean(&prediction_losses(&params, &batch, model));
                if cfg.mode.uses_v_risk() {
                    params.beta_v = mean(&voltage_losses(&params, &batch, model, s)?);
                }
                betas_ready = true;
            }
            let c = combined_loss_grad(&params, &batch, model, Some(s), &loss_cfg)?;
            if !c.loss.is_finite() || c.loss > DIVERGENCE_LIMIT {
                return Err(TrainError::Diverged {
                    epoch,
                    batch_id,
                    loss: c.loss,
                    components: c.components,
                });
            }
            let next = optimizer_step(&params, &c.grad, &mut state, cfg.eta)?;
            let delta = trainable(&next)
                .iter()
                .zip(trainable(&params))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            params = next;
            updates += 1;
            records.push(IterationRecord {
                epoch,
                batch_id,
                batch_cvar: score,
                threshold: prevailing,
                accepted,
                loss: Some(c.loss),
                loss_components: Some(c.components),
                param_delta: delta,
            });
            if delta < cfg.epsilon {
                stop_reason = StopReason::Converged;
                break 'epochs;
            }
        }
    }
    let totals = TrainTotals {
        epochs,
        batches_drawn: records.len(),
        gradient_updates: updates,
        dropped_samples,
        stop_reason,
        wall_time: start.elapsed().as_secs_f64(),
    };
    info!(
        "trained {} ({} epochs, {}/{} batches used)",
        cfg.mode, totals.epochs, totals.gradient_updates, totals.batches_drawn
    );
    Ok((params, TrainLog { records, totals }))
}

/// Run totals with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub arm: String,
    pub feeder_hash: String,
    pub config: TrainConfig,
    pub totals: TrainTotals,
}

impl TrainSummary {
    /// Checks the totals against the per-iteration records they summarize.
    pub fn matches_records(&self, records: &[IterationRecord]) -> bool {
        let updates = records.iter().filter(|r| r.accepted).count();
        let epochs = records.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
        self.totals.batches_drawn == records.len()
            && self.totals.gradient_updates == updates
            && epochs <= self.totals.epochs
    }
}

/// Trained policy with the metadata needed to reuse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub feeder_hash: String,
    #[serde(flatten)]
    pub params: PolicyParams,
    pub config: TrainConfig,
}
