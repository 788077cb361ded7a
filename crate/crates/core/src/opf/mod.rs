//! Centralized reactive-power dispatch and dataset generation.
//!
//! For one operating condition `y = (p_gen, p_load, q_load)` the dispatch
//! problem is
//!
//! ```text
//! min  q' R q - 2 q_load' R q
//! s.t. |q_n| <= q_max_n
//!      v_lower <= X q + h(y) <= v_upper,   h(y) = R (p_gen - p_load) - X q_load
//! ```
//!
//! Only DER buses carry decision variables; every other bus has a zero limit
//! and is fixed at zero. When the voltage band cannot be met inside the box,
//! the band is widened by one shared nonnegative slack `s` charged
//! `SLACK_PENALTY * s^2` in the objective, and the result is flagged
//! [`SolveStatus::Softened`].

mod dataset;
mod profiles;
pub mod qp;

pub use dataset::{generate_dataset, read_dataset, write_dataset, Dataset, DatasetError, Sample};
pub use profiles::{
    generate_profiles, read_profiles_csv, write_profiles_csv, ProfileConfig, ProfileError,
};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{check_len, mat_vec, FeederError, FeederModel, SensitivityPair, VoltageBounds};
use qp::{Qp, QpFailure};

/// Quadratic penalty on the shared voltage slack (per-unit squared).
pub const SLACK_PENALTY: f64 = 1e4;
pub const DEFAULT_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 50_000;

/// One sample's system input. All vectors are in feeder bus order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingCondition {
    pub t: usize,
    pub p_gen: Vec<f64>,
    pub p_load: Vec<f64>,
    pub q_load: Vec<f64>,
}

impl OperatingCondition {
    pub fn zeros(t: usize, n: usize) -> Self {
        Self {
            t,
            p_gen: vec![0.0; n],
            p_load: vec![0.0; n],
            q_load: vec![0.0; n],
        }
    }

    pub fn n(&self) -> usize {
        self.p_gen.len()
    }

    /// Net active injection `p_gen - p_load`.
    pub fn net_p(&self) -> Vec<f64> {
        self.p_gen.iter().zip(&self.p_load).map(|(g, c)| g - c).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Optimal,
    Softened,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpfSolution {
    pub q_gen: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub slack_used: f64,
}

#[derive(Debug, Error)]
pub enum OpfError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error("the resistance matrix restricted to DER buses is not positive definite")]
    NotPositiveDefinite,
    #[error("solver hit its iteration cap of {0}")]
    IterationLimit(usize),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
}

/// `q' R q - 2 q_load' R q`.
pub fn objective_value(q_gen: &[f64], q_load: &[f64], r: &DMatrix<f64>) -> Result<f64, FeederError> {
    check_len(q_gen, r.nrows())?;
    check_len(q_load, r.nrows())?;
    let rq = mat_vec(r, q_gen);
    Ok(q_gen
        .iter()
        .zip(q_load)
        .zip(&rq)
        .map(|((g, c), rq)| (g - 2.0 * c) * rq)
        .sum())
}

/// `h(y) = R (p_gen - p_load) - X q_load`: the voltage with no DER support.
pub fn uncontrolled_voltage(oc: &OperatingCondition, s: &SensitivityPair) -> Result<Vec<f64>, FeederError> {
    check_len(&oc.p_gen, s.n())?;
    check_len(&oc.p_load, s.n())?;
    check_len(&oc.q_load, s.n())?;
    let rp = mat_vec(&s.r, &oc.net_p());
    let xq = mat_vec(&s.x, &oc.q_load);
    Ok(rp.iter().zip(&xq).map(|(a, b)| a - b).collect())
}

/// Voltage deviation under a given dispatch: `X q_gen + h(y)`.
pub fn dispatch_voltage(
    q_gen: &[f64],
    oc: &OperatingCondition,
    s: &SensitivityPair,
) -> Result<Vec<f64>, FeederError> {
    check_len(q_gen, s.n())?;
    let h = uncontrolled_voltage(oc, s)?;
    let xq = mat_vec(&s.x, q_gen);
    Ok(h.iter().zip(&xq).map(|(a, b)| a + b).collect())
}

/// Voltage constraint values `[v - v_upper; v_lower - v]`; nonpositive means satisfied.
pub fn constraint_values(
    q_gen: &[f64],
    oc: &OperatingCondition,
    s: &SensitivityPair,
    bounds: VoltageBounds,
) -> Result<Vec<f64>, FeederError> {
    let v = dispatch_voltage(q_gen, oc, s)?;
    let mut g: Vec<f64> = v.iter().map(|v| v - bounds.upper).collect();
    g.extend(v.iter().map(|v| bounds.lower - v));
    Ok(g)
}

/// Reusable dispatch solver for one feeder.
#[derive(Debug, Clone)]
pub struct LcqpSolver<'a> {
    s: &'a SensitivityPair,
    der: Vec<usize>,
    q_max: Vec<f64>,
    bounds: VoltageBounds,
    r_dd: DMatrix<f64>,
    x_nd: DMatrix<f64>,
    tol: f64,
}

impl<'a> LcqpSolver<'a> {
    pub fn new(model: &FeederModel, s: &'a SensitivityPair, tol: f64) -> Result<Self, OpfError> {
        if !(tol > 0.0) {
            return Err(OpfError::InvalidTolerance(tol));
        }
        let der = model.der_indices().to_vec();
        let n = s.n();
        if model.n_buses() != n {
            return Err(FeederError::DimensionMismatch {
                expected: model.n_buses(),
                got: n,
            }
            .into());
        }
        let d = der.len();
        let r_dd = DMatrix::from_fn(d, d, |i, j| s.r[(der[i], der[j])]);
        let x_nd = DMatrix::from_fn(n, d, |i, j| s.x[(i, der[j])]);
        Ok(Self {
            s,
            q_max: der.iter().map(|&i| model.q_limits()[i]).collect(),
            der,
            bounds: model.v_bounds(),
            r_dd,
            x_nd,
            tol,
        })
    }

    fn build(&self, h: &[f64], rq_load: &[f64], softened: bool) -> Qp {
        let n = h.len();
        let d = self.der.len();
        let nv = d + usize::from(softened);
        let mut g = DMatrix::zeros(nv, nv);
        g.view_mut((0, 0), (d, d)).copy_from(&(2.0 * &self.r_dd));
        let mut a = DVector::zeros(nv);
        for (j, &i) in self.der.iter().enumerate() {
            a[j] = -2.0 * rq_load[i];
        }
        if softened {
            g[(d, d)] = 2.0 * SLACK_PENALTY;
        }

        let rows = 2 * n + 2 * d + usize::from(softened);
        let mut nmat = DMatrix::zeros(rows, nv);
        let mut b = DVector::zeros(rows);
        for i in 0..n {
            for j in 0..d {
                nmat[(i, j)] = -self.x_nd[(i, j)];
                nmat[(n + i, j)] = self.x_nd[(i, j)];
            }
            b[i] = h[i] - self.bounds.upper;
            b[n + i] = self.bounds.lower - h[i];
            if softened {
                nmat[(i, d)] = 1.0;
                nmat[(n + i, d)] = 1.0;
            }
        }
        for j in 0..d {
            nmat[(2 * n + 2 * j, j)] = 1.0;
            b[2 * n + 2 * j] = -self.q_max[j];
            nmat[(2 * n + 2 * j + 1, j)] = -1.0;
            b[2 * n + 2 * j + 1] = -self.q_max[j];
        }
        if softened {
            nmat[(rows - 1, d)] = 1.0;
        }
        Qp { g, a, n: nmat, b }
    }

    pub fn solve(&self, oc: &OperatingCondition) -> Result<OpfSolution, OpfError> {
        let h = uncontrolled_voltage(oc, self.s)?;
        let rq_load = mat_vec(&self.s.r, &oc.q_load);
        let n = h.len();

        let strict = self.build(&h, &rq_load, false);
        let (qp, sol, status) = match strict.solve(self.tol * 1e-3, MAX_ITERATIONS) {
            Ok(sol) => (strict, sol, SolveStatus::Optimal),
            Err(QpFailure::Infeasible) => {
                let soft = self.build(&h, &rq_load, true);
                match soft.solve(self.tol * 1e-3, MAX_ITERATIONS) {
                    Ok(sol) => (soft, sol, SolveStatus::Softened),
                    Err(QpFailure::IterationLimit(k)) => return Err(OpfError::IterationLimit(k)),
                    Err(QpFailure::NotPositiveDefinite) => return Err(OpfError::NotPositiveDefinite),
                    Err(QpFailure::Infeasible) => return Ok(self.infeasible(oc, n)),
                }
            }
            Err(QpFailure::IterationLimit(k)) => return Err(OpfError::IterationLimit(k)),
            Err(QpFailure::NotPositiveDefinite) => return Err(OpfError::NotPositiveDefinite),
        };

        let kkt = qp.kkt(&sol.x, &sol.multipliers).max();
        let mut q_gen = vec![0.0; n];
        let box_row = 2 * n;
        for (j, &i) in self.der.iter().enumerate() {
            // Clip roundoff outside the box and put active bounds exactly on it.
            q_gen[i] = if sol.multipliers[box_row + 2 * j] > 0.0 {
                -self.q_max[j]
            } else if sol.multipliers[box_row + 2 * j + 1] > 0.0 {
                self.q_max[j]
            } else {
                sol.x[j].clamp(-self.q_max[j], self.q_max[j])
            };
        }
        let slack_used = match status {
            SolveStatus::Softened => sol.x[self.der.len()].max(0.0),
            _ => 0.0,
        };
        let status = if status == SolveStatus::Optimal && kkt > self.tol {
            // Residual too large to certify optimality; treat as unusable.
            SolveStatus::Infeasible
        } else {
            status
        };
        Ok(OpfSolution {
            objective: objective_value(&q_gen, &oc.q_load, &self.s.r)?,
            q_gen,
            kkt_residual: kkt,
            status,
            slack_used,
        })
    }

    fn infeasible(&self, oc: &OperatingCondition, n: usize) -> OpfSolution {
        let q_gen = vec![0.0; n];
        OpfSolution {
            objective: objective_value(&q_gen, &oc.q_load, &self.s.r).unwrap_or(f64::NAN),
            q_gen,
            kkt_residual: f64::INFINITY,
            status: SolveStatus::Infeasible,
            slack_used: 0.0,
        }
    }
}

/// Solves one dispatch instance.
pub fn solve_lcqp(
    oc: &OperatingCondition,
    s: &SensitivityPair,
    model: &FeederModel,
    tol: f64,
) -> Result<OpfSolution, OpfError> {
    LcqpSolver::new(model, s, tol)?.solve(oc)
}
