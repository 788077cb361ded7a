use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::feeder::{BusId, FeederModel, SensitivityPair};
use crate::nn::{predict_all_clamped, PolicyParams};
use crate::opf::{dispatch_voltage, Sample};
use crate::risk::{max_abs, RiskReport};

/// Deviations within this distance of a bound are not counted as violations.
pub const VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeError {
    pub bus: BusId,
    pub mean_abs: f64,
    pub std_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// `100 * mean_k ||qhat_k - z_k|| / mean_k ||z_k||` over DER buses.
    pub qg_error_pct: f64,
    pub node_errors: Vec<NodeError>,
    pub max_abs_v: f64,
    /// Worst-bus |v| per sample under the predicted (clamped) dispatch.
    pub worst_deviation: Vec<f64>,
    pub voltage_risk: RiskReport,
    pub prediction_risk: RiskReport,
    pub violating_samples: usize,
    pub node_violations: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Scores a policy on a split. Predictions are clamped to inverter limits.
pub fn evaluate(
    params: &PolicyParams,
    split: &[Sample],
    s: &SensitivityPair,
    model: &FeederModel,
    alpha: f64,
) -> Result<EvalReport, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    params.validate()?;
    let der = model.der_indices();
    let bounds = model.v_bounds();
    let mut abs_err: Vec<Vec<f64>> = vec![Vec::with_capacity(split.len()); der.len()];
    let mut err_norm = 0.0;
    let mut ref_norm = 0.0;
    let mut pred_losses = Vec::with_capacity(split.len());
    let mut worst = Vec::with_capacity(split.len());
    let mut violating_samples = 0;
    let mut node_violations = 0;

    for sample in split {
        let q = predict_all_clamped(params, &sample.condition, model);
        let z = &sample.solution.q_gen;
        let mut sq = 0.0;
        let mut zsq = 0.0;
        for (d, &i) in der.iter().enumerate() {
            let e = q[i] - z[i];
            abs_err[d].push(e.abs());
            sq += e * e;
            zsq += z[i] * z[i];
        }
        err_norm += sq.sqrt();
        ref_norm += zsq.sqrt();
        pred_losses.push(sq);

        let v = dispatch_voltage(&q, &sample.condition, s).map_err(|_| TrainError::ShapeMismatch)?;
        let over = v
            .iter()
            .filter(|&&x| x > bounds.upper + VIOLATION_TOL || x < bounds.lower - VIOLATION_TOL)
            .count();
        node_violations += over;
        violating_samples += usize::from(over > 0);
        worst.push(max_abs(&v));
    }

    let qg_error_pct = if ref_norm > 0.0 {
        100.0 * err_norm / ref_norm
    } else if err_norm == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let node_errors = der
        .iter()
        .zip(&abs_err)
        .map(|(&i, e)| {
            let (mean_abs, std_abs) = mean_std(e);
            NodeError {
                bus: model.bus_ids()[i],
                mean_abs,
                std_abs,
            }
        })
        .collect();
    Ok(EvalReport {
        n_samples: split.len(),
        qg_error_pct,
        node_errors,
        max_abs_v: worst.iter().copied().fold(0.0, f64::max),
        voltage_risk: RiskReport::from_losses(&worst, alpha)?,
        prediction_risk: RiskReport::from_losses(&pred_losses, alpha)?,
        worst_deviation: worst,
        violating_samples,
        node_violations,
    })
}
