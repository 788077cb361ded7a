//! Training losses over a mini-batch and their exact gradients.
//!
//! * prediction: `f = 1/|B| sum_k l_k`, `l_k = sum_{n in DER} (qhat_n - z_n)^2`
//! * prediction risk: softplus-smoothed CVaR of `l_k` with auxiliary `beta_q`
//! * voltage risk: softplus-smoothed CVaR of `m_k` with auxiliary `beta_v`,
//!   where `m_k = tau log sum_n (exp(v_n / tau) + exp(-v_n / tau))` is a smooth
//!   upper bound on `max_n |v_n|` and `v = X qhat + h(y)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{backward, forward_trace, Broadcast, FeatureVector, Gradient, NnError, PolicyParams, Trace};
use crate::feeder::{mat_vec, FeederModel, SensitivityPair};
use crate::opf::{uncontrolled_voltage, Sample};
use crate::risk::{self, RiskError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "mse")]
    Mse,
    #[serde(rename = "cvar-q")]
    CvarQ,
    #[serde(rename = "cvar-qv")]
    CvarQV,
}

impl LossMode {
    pub fn uses_q_risk(self) -> bool {
        matches!(self, LossMode::CvarQ | LossMode::CvarQV)
    }

    pub fn uses_v_risk(self) -> bool {
        matches!(self, LossMode::CvarQV)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::CvarQ => "cvar-q",
            LossMode::CvarQV => "cvar-qv",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "cvar-q" => Ok(LossMode::CvarQ),
            "cvar-qv" => Ok(LossMode::CvarQV),
            other => Err(format!("unknown loss mode {other:?} (expected mse, cvar-q or cvar-qv)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub mode: LossMode,
    pub lambda_q: f64,
    pub lambda_v: f64,
    pub alpha: f64,
    /// Softplus sharpness for the prediction-risk term.
    pub tau_q: f64,
    /// Softplus and log-sum-exp sharpness for the voltage-risk term.
    pub tau_v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub mse: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cvar_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub cvar_v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Gradient,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub loss: f64,
    pub grad: Gradient,
    pub components: LossComponents,
}

fn map_risk(e: RiskError) -> NnError {
    match e {
        RiskError::InvalidSharpness(_) => NnError::InvalidSharpness,
        RiskError::Empty => NnError::EmptyBatch,
        RiskError::InvalidAlpha(a) | RiskError::TailTooSmall { alpha: a, .. } => {
            NnError::TailTooSmall { alpha: a, batch: 0 }
        }
        RiskError::NoBins => NnError::EmptyBatch,
    }
}

fn check_tail(alpha: f64, batch: usize) -> Result<(), NnError> {
    if !(alpha > 0.0 && alpha <= 1.0) || alpha * (batch as f64) < 1.0 - 1e-9 {
        return Err(NnError::TailTooSmall { alpha, batch });
    }
    Ok(())
}

/// Forward passes for every DER node of every sample in a batch.
struct BatchEval {
    traces: Vec<Vec<Trace>>,
    pred: Vec<Vec<f64>>,
    pred_losses: Vec<f64>,
}

fn eval_batch(params: &PolicyParams, batch: &[&Sample], model: &FeederModel) -> BatchEval {
    let der = model.der_indices();
    let mut traces = Vec::with_capacity(batch.len());
    let mut pred = Vec::with_capacity(batch.len());
    let mut pred_losses = Vec::with_capacity(batch.len());
    for s in batch {
        let oc = &s.condition;
        let head = Broadcast::of(oc);
        let tr: Vec<Trace> = der
            .iter()
            .map(|&i| forward_trace(params, &FeatureVector::new(oc, i, head).to_array()))
            .collect();
        let q: Vec<f64> = tr.iter().map(|t| t.output).collect();
        pred_losses.push(
            der.iter()
                .zip(&q)
                .map(|(&i, qh)| (qh - s.solution.q_gen[i]).powi(2))
                .sum(),
        );
        traces.push(tr);
        pred.push(q);
    }
    BatchEval {
        traces,
        pred,
        pred_losses,
    }
}

/// Smooth worst-bus deviation per sample and its derivative wrt each DER output.
struct VoltageEval {
    losses: Vec<f64>,
    d_pred: Vec<Vec<f64>>,
}

fn full_dispatch(model: &FeederModel, pred: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; model.n_buses()];
    for (&i, &v) in model.der_indices().iter().zip(pred) {
        q[i] = v;
    }
    q
}

fn eval_voltage(
    ev: &BatchEval,
    batch: &[&Sample],
    model: &FeederModel,
    s: &SensitivityPair,
    tau: f64,
) -> Result<VoltageEval, NnError> {
    if s.n() != model.n_buses() {
        return Err(NnError::MissingSensitivities);
    }
    let der = model.der_indices();
    let mut losses = Vec::with_capacity(batch.len());
    let mut d_pred = Vec::with_capacity(batch.len());
    for (sample, q) in batch.iter().zip(&ev.pred) {
        let h = uncontrolled_voltage(&sample.condition, s).map_err(|_| NnError::ShapeMismatch)?;
        let xq = mat_vec(&s.x, &full_dispatch(model, q));
        let v: Vec<f64> = h.iter().zip(&xq).map(|(a, b)| a + b).collect();
        let top = risk::max_abs(&v);
        let mut total = 0.0;
        let mut dm_dv = Vec::with_capacity(v.len());
        for &vn in &v {
            let up = ((vn - top) / tau).exp();
            let down = ((-vn - top) / tau).exp();
            total += up + down;
            dm_dv.push(up - down);
        }
        dm_dv.iter_mut().for_each(|d| *d /= total);
        losses.push(top + tau * total.ln());
        d_pred.push(
            der.iter()
                .map(|&j| (0..v.len()).map(|n| dm_dv[n] * s.x[(n, j)]).sum())
                .collect(),
        );
    }
    Ok(VoltageEval { losses, d_pred })
}

/// Backpropagates per-(sample, DER) output sensitivities in sample order.
fn accumulate(params: &PolicyParams, ev: &BatchEval, d_out: &[Vec<f64>]) -> Gradient {
    let mut grad = Gradient::zeros_like(params);
    for (tr, d) in ev.traces.iter().zip(d_out) {
        for (t, &dk) in tr.iter().zip(d) {
            backward(params, t, dk, &mut grad);
        }
    }
    grad
}

fn targets<'a>(batch: &'a [&Sample], model: &'a FeederModel) -> impl Iterator<Item = Vec<f64>> + 'a {
    batch
        .iter()
        .map(move |s| model.der_indices().iter().map(|&i| s.solution.q_gen[i]).collect())
}

/// Exact per-sample prediction losses `l_k`.
pub fn prediction_losses(params: &PolicyParams, batch: &[&Sample], model: &FeederModel) -> Vec<f64> {
    eval_batch(params, batch, model).pred_losses
}

/// Exact per-sample worst-bus deviation `max_n |v_n|` under the unclamped prediction.
pub fn voltage_losses(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
    s: &SensitivityPair,
) -> Result<Vec<f64>, NnError> {
    if s.n() != model.n_buses() {
        return Err(NnError::MissingSensitivities);
    }
    batch
        .iter()
        .map(|sample| {
            let q = super::predict_all(params, &sample.condition, model);
            crate::opf::dispatch_voltage(&q, &sample.condition, s)
                .map(|v| risk::max_abs(&v))
                .map_err(|_| NnError::ShapeMismatch)
        })
        .collect()
}

fn combined(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
    s: Option<&SensitivityPair>,
    weights: [f64; 3],
    cfg: &LossConfig,
) -> Result<CombinedLoss, NnError> {
    params.validate()?;
    if batch.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let [w_mse, w_q, w_v] = weights;
    let b = batch.len() as f64;
    let ev = eval_batch(params, batch, model);

    let mut d_out: Vec<Vec<f64>> = ev.pred.iter().map(|q| vec![0.0; q.len()]).collect();
    let mut components = LossComponents {
        mse: ev.pred_losses.iter().sum::<f64>() / b,
        ..Default::default()
    };
    let mut loss = w_mse * components.mse;
    let mut beta_q_grad = 0.0;
    let mut beta_v_grad = 0.0;

    // d l_k / d qhat_{k,d} = 2 (qhat - z)
    let residuals: Vec<Vec<f64>> = ev
        .pred
        .iter()
        .zip(targets(batch, model))
        .map(|(q, z)| q.iter().zip(&z).map(|(a, b)| 2.0 * (a - b)).collect())
        .collect();
    let mut per_sample_weight = vec![w_mse / b; batch.len()];

    if w_q != 0.0 {
        check_tail(cfg.alpha, batch.len())?;
        let sc = risk::smoothed_cvar_grad(&ev.pred_losses, cfg.alpha, params.beta_q, cfg.tau_q)
            .map_err(map_risk)?;
        components.cvar_q = Some(sc.value);
        loss += w_q * sc.value;
        beta_q_grad = w_q * sc.d_beta;
        for (w, dl) in per_sample_weight.iter_mut().zip(&sc.d_losses) {
            *w += w_q * dl;
        }
    }
    for ((d, r), w) in d_out.iter_mut().zip(&residuals).zip(&per_sample_weight) {
        for (dd, rr) in d.iter_mut().zip(r) {
            *dd += w * rr;
        }
    }

    if w_v != 0.0 {
        let s = s.ok_or(NnError::MissingSensitivities)?;
        check_tail(cfg.alpha, batch.len())?;
        if !(cfg.tau_v > 0.0) {
            return Err(NnError::InvalidSharpness);
        }
        let vev = eval_voltage(&ev, batch, model, s, cfg.tau_v)?;
        let sc = risk::smoothed_cvar_grad(&vev.losses, cfg.alpha, params.beta_v, cfg.tau_v)
            .map_err(map_risk)?;
        components.cvar_v = Some(sc.value);
        loss += w_v * sc.value;
        beta_v_grad = w_v * sc.d_beta;
        for ((d, dm), dl) in d_out.iter_mut().zip(&vev.d_pred).zip(&sc.d_losses) {
            for (dd, g) in d.iter_mut().zip(dm) {
                *dd += w_v * dl * g;
            }
        }
    }

    let mut grad = accumulate(params, &ev, &d_out);
    grad.beta_q = beta_q_grad;
    grad.beta_v = beta_v_grad;
    Ok(CombinedLoss {
        loss,
        grad,
        components,
    })
}

/// Mean over the batch of the summed squared DER prediction error.
pub fn mse_loss_grad(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
) -> Result<LossGrad, NnError> {
    let cfg = LossConfig {
        mode: LossMode::Mse,
        lambda_q: 0.0,
        lambda_v: 0.0,
        alpha: 1.0,
        tau_q: 1.0,
        tau_v: 1.0,
    };
    let c = combined(params, batch, model, None, [1.0, 0.0, 0.0], &cfg)?;
    Ok(LossGrad {
        loss: c.loss,
        grad: c.grad,
    })
}

/// Smoothed CVaR of per-sample prediction losses; `grad.beta_q` holds the
/// derivative in the auxiliary.
pub fn cvar_q_loss_grad(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
    alpha: f64,
    tau: f64,
) -> Result<LossGrad, NnError> {
    let cfg = LossConfig {
        mode: LossMode::CvarQ,
        lambda_q: 1.0,
        lambda_v: 0.0,
        alpha,
        tau_q: tau,
        tau_v: tau,
    };
    let c = combined(params, batch, model, None, [0.0, 1.0, 0.0], &cfg)?;
    Ok(LossGrad {
        loss: c.loss,
        grad: c.grad,
    })
}

/// Smoothed CVaR of per-sample smooth worst-bus deviations; `grad.beta_v`
/// holds the derivative in the auxiliary.
pub fn cvar_v_loss_grad(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
    s: &SensitivityPair,
    alpha: f64,
    tau: f64,
) -> Result<LossGrad, NnError> {
    let cfg = LossConfig {
        mode: LossMode::CvarQV,
        lambda_q: 0.0,
        lambda_v: 1.0,
        alpha,
        tau_q: tau,
        tau_v: tau,
    };
    let c = combined(params, batch, model, Some(s), [0.0, 0.0, 1.0], &cfg)?;
    Ok(LossGrad {
        loss: c.loss,
        grad: c.grad,
    })
}

/// `f + lambda_q * cvar_q + lambda_v * cvar_v`, with terms absent from the
/// mode weighted zero.
pub fn combined_loss_grad(
    params: &PolicyParams,
    batch: &[&Sample],
    model: &FeederModel,
    s: Option<&SensitivityPair>,
    cfg: &LossConfig,
) -> Result<CombinedLoss, NnError> {
    if !(cfg.lambda_q >= 0.0 && cfg.lambda_v >= 0.0) {
        return Err(NnError::NegativeWeight);
    }
    let w_q = if cfg.mode.uses_q_risk() { cfg.lambda_q } else { 0.0 };
    let w_v = if cfg.mode.uses_v_risk() { cfg.lambda_v } else { 0.0 };
    combined(params, batch, model, s, [1.0, w_q, w_v], cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feeder::{build_sensitivities, BusId, DerSpec, FeederFile, LineSpec, VoltageBounds};
    use crate::nn::FeatureStats;
    use crate::opf::{OperatingCondition, OpfSolution, SolveStatus};

    fn chain3(der: &[u32]) -> FeederModel {
        FeederModel::from_file(FeederFile {
            name: None,
            reference: BusId(0),
            buses: vec![BusId(1), BusId(2), BusId(3)],
            lines: (1..=3)
                .map(|i| LineSpec { from: BusId(i - 1), to: BusId(i), r: 0.01, x: 0.02 })
                .collect(),
            der: der.iter().map(|&b| DerSpec { bus: BusId(b), q_max: 0.3 }).collect(),
            loads: vec![],
            v_bounds: VoltageBounds { lower: -0.05, upper: 0.05 },
        })
        .unwrap()
    }

    fn sample(p_load: [f64; 3], z: [f64; 3]) -> Sample {
        let mut oc = OperatingCondition::zeros(0, 3);
        oc.p_load = p_load.to_vec();
        oc.q_load = p_load.iter().map(|p| 0.4 * p).collect();
        Sample {
            condition: oc,
            solution: OpfSolution {
                q_gen: z.to_vec(),
                objective: 0.0,
                kkt_residual: 0.0,
                status: SolveStatus::Optimal,
                slack_used: 0.0,
            },
        }
    }

    #[test]
    fn perfect_predictor_has_zero_mse() {
        let m = chain3(&[2, 3]);
        let p = PolicyParams::zeros(&[5, 1]).unwrap();
        let batch = [sample([0.1, 0.2, 0.3], [0.0; 3]), sample([0.3, 0.2, 0.1], [0.0; 3])];
        let refs: Vec<&Sample> = batch.iter().collect();
        let lg = mse_loss_grad(&p, &refs, &m).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert!(lg.grad.flat_weights().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn linear_layer_least_squares_gradient() {
        let m = chain3(&[3]);
        let mut p = PolicyParams::zeros(&[5, 1]).unwrap();
        p.layers[0].weights = vec![0.5, -0.2, 0.1, 0.3, 0.7];
        p.layers[0].biases = vec![0.05];
        let s = sample([0.1, 0.2, 0.3], [0.0, 0.0, 0.25]);
        let x = [0.0, 0.3, 0.12, 0.6, 0.24];
        let yhat = 0.05 + x.iter().zip(&p.layers[0].weights).map(|(a, b)| a * b).sum::<f64>();
        let lg = mse_loss_grad(&p, &[&s], &m).unwrap();
        assert!((lg.loss - (yhat - 0.25f64).powi(2)).abs() < 1e-15);
        let g = &lg.grad.layers[0];
        for j in 0..5 {
            assert!((g.weights[j] - 2.0 * (yhat - 0.25) * x[j]).abs() < 1e-15);
        }
        assert!((g.biases[0] - 2.0 * (yhat - 0.25)).abs() < 1e-15);
    }

    #[test]
    fn inactive_hinge() {
        let m = chain3(&[2, 3]);
        let mut p = PolicyParams::zeros(&[5, 1]).unwrap();
        p.layers[0].biases = vec![0.01];
        p.beta_q = 10.0;
        let batch: Vec<Sample> = (0..5).map(|k| sample([0.1 * k as f64, 0.2, 0.1], [0.0; 3])).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let lg = cvar_q_loss_grad(&p, &refs, &m, 0.2, 1e-3).unwrap();
        assert!((lg.loss - 10.0).abs() < 1e-12);
        assert!((lg.grad.beta_q - 1.0).abs() < 1e-12);
        assert!(lg.grad.flat_weights().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_reactance_decouples_voltage_loss() {
        let m = chain3(&[2, 3]);
        let mut s = build_sensitivities(&m);
        s.x.fill(0.0);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(2);
        let p = PolicyParams::init(&[5, 4, 1], &mut rng).unwrap();
        let batch: Vec<Sample> = (0..5).map(|k| sample([0.1 * k as f64, 0.2, 0.1], [0.0; 3])).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let lg = cvar_v_loss_grad(&p, &refs, &m, &s, 0.4, 1e-2).unwrap();
        assert!(lg.grad.flat_weights().iter().all(|&g| g == 0.0));
        assert!(lg.loss > 0.0);
    }

    #[test]
    fn tail_must_hold_a_sample() {
        let m = chain3(&[3]);
        let p = PolicyParams::zeros(&[5, 1]).unwrap();
        let batch = [sample([0.1, 0.2, 0.3], [0.0; 3]), sample([0.1, 0.2, 0.3], [0.0; 3])];
        let refs: Vec<&Sample> = batch.iter().collect();
        assert!(matches!(
            cvar_q_loss_grad(&p, &refs, &m, 0.2, 1e-2),
            Err(NnError::TailTooSmall { .. })
        ));
        assert!(matches!(mse_loss_grad(&p, &[], &m), Err(NnError::EmptyBatch)));
    }

    #[test]
    fn zero_weights_reduce_to_mse() {
        let m = chain3(&[2, 3]);
        let s = build_sensitivities(&m);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let mut p = PolicyParams::init(&[5, 6, 1], &mut rng).unwrap();
        p.feat_stats = FeatureStats::identity();
        let batch: Vec<Sample> = (0..5)
            .map(|k| sample([0.1 * k as f64, 0.2, 0.1], [0.0, 0.1, -0.05 * k as f64]))
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let cfg = LossConfig {
            mode: LossMode::CvarQV,
            lambda_q: 0.0,
            lambda_v: 0.0,
            alpha: 0.2,
            tau_q: 1e-2,
            tau_v: 1e-2,
        };
        let c = combined_loss_grad(&p, &refs, &m, Some(&s), &cfg).unwrap();
        let plain = mse_loss_grad(&p, &refs, &m).unwrap();
        assert_eq!(c.loss, plain.loss);
        assert_eq!(c.grad.flat_weights(), plain.grad.flat_weights());
    }

    #[test]
    fn mode_strings() {
        for m in [LossMode::Mse, LossMode::CvarQ, LossMode::CvarQV] {
            assert_eq!(m.as_str().parse::<LossMode>().unwrap(), m);
        }
        assert!("cvar".parse::<LossMode>().is_err());
    }
}
