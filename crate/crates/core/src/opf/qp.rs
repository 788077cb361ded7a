//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! Solves `min 0.5 x'Gx + a'x  s.t.  n_i'x >= b_i` for positive definite `G`.
//! The iteration starts from the unconstrained minimizer and adds violated
//! constraints one at a time while keeping the active multipliers dual
//! feasible, so an empty feasible set is detected rather than looped on.
//! Problem sizes here are a handful of variables and a few hundred rows, so
//! the projections are recomputed densely at each step.

use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct Qp {
    pub g: DMatrix<f64>,
    pub a: DVector<f64>,
    /// One constraint per row: `n_i' x >= b_i`.
    pub n: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multiplier per constraint row (zero off the active set).
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum QpFailure {
    NotPositiveDefinite,
    Infeasible,
    IterationLimit(usize),
}

/// Residuals of the KKT conditions at a candidate solution.
///
/// * `stationarity`: `|| G x + a - sum_i u_i n_i ||_inf`
/// * `primal`: largest constraint violation `max(0, b_i - n_i'x)`
/// * `dual`: largest negative multiplier magnitude
/// * `complementarity`: `max_i |u_i (n_i'x - b_i)|`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl Qp {
    pub fn n_vars(&self) -> usize {
        self.g.nrows()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.g * x)) + self.a.dot(x)
    }

    pub fn kkt(&self, x: &DVector<f64>, u: &DVector<f64>) -> KktResiduals {
        let slack = &self.n * x - &self.b;
        let grad = &self.g * x + &self.a - self.n.transpose() * u;
        KktResiduals {
            stationarity: grad.amax(),
            primal: slack.iter().fold(0.0, |m: f64, s| m.max(-s)),
            dual: u.iter().fold(0.0, |m: f64, v| m.max(-v)),
            complementarity: slack
                .iter()
                .zip(u.iter())
                .fold(0.0, |m: f64, (s, v)| m.max((s * v).abs())),
        }
    }

    pub fn solve(&self, feas_tol: f64, max_iter: usize) -> Result<QpSolution, QpFailure> {
        let nv = self.n_vars();
        let m = self.n.nrows();
        let chol = Cholesky::new(self.g.clone()).ok_or(QpFailure::NotPositiveDefinite)?;
        let g_inv = chol.inverse();

        let mut x = -(&g_inv * &self.a);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut iterations = 0;

        let row = |i: usize| -> DVector<f64> { self.n.row(i).transpose() };
        let slack = |x: &DVector<f64>, i: usize| -> f64 { self.n.row(i).dot(&x.transpose()) - self.b[i] };

        loop {
            // Most violated inactive constraint, scaled by row norm.
            let mut pick: Option<(usize, f64)> = None;
            for i in 0..m {
                if active.contains(&i) {
                    continue;
                }
                let norm = self.n.row(i).norm().max(f64::MIN_POSITIVE);
                let s = slack(&x, i);
                if s < -feas_tol * (1.0 + self.b[i].abs()) {
                    let scaled = s / norm;
                    if pick.is_none_or(|(_, best)| scaled < best) {
                        pick = Some((i, scaled));
                    }
                }
            }
            let Some((p, _)) = pick else {
                let mut multipliers = DVector::zeros(m);
                for (&i, &v) in active.iter().zip(&u) {
                    multipliers[i] = v;
                }
                return Ok(QpSolution {
                    x,
                    multipliers,
                    active,
                    iterations,
                });
            };
            let np = row(p);
            let mut u_plus = u.clone();
            u_plus.push(0.0);

            loop {
                iterations += 1;
                if iterations > max_iter {
                    return Err(QpFailure::IterationLimit(max_iter));
                }
                let k = active.len();
                let (z, r) = if k == 0 {
                    (&g_inv * &np, DVector::zeros(0))
                } else {
                    let mut nmat = DMatrix::zeros(nv, k);
                    for (c, &i) in active.iter().enumerate() {
                        nmat.set_column(c, &row(i));
                    }
                    let gn = &g_inv * &nmat;
                    let mmat = nmat.transpose() * &gn;
                    let Some(m_inv) = mmat.try_inverse() else {
                        return Err(QpFailure::Infeasible);
                    };
                    // N* = (N'G^-1N)^-1 N'G^-1 ; H = G^-1 - G^-1 N N*
                    let n_star = &m_inv * gn.transpose();
                    let r = &n_star * &np;
                    let z = &g_inv * &np - &gn * &r;
                    (z, r)
                };

                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for j in 0..k {
                    if r[j] > 1e-12 {
                        let t = u_plus[j] / r[j];
                        if t < t1 {
                            t1 = t;
                            drop = Some(j);
                        }
                    }
                }
                let curvature = z.dot(&np);
                let reference = np.dot(&(&g_inv * &np));
                let t2 = if curvature <= 1e-12 * reference {
                    f64::INFINITY
                } else {
                    -slack(&x, p) / curvature
                };

                let t = t1.min(t2);
                if t.is_infinite() {
                    return Err(QpFailure::Infeasible);
                }
                for j in 0..k {
                    u_plus[j] -= t * r[j];
                }
                u_plus[k] += t;

                if t2.is_finite() {
                    x += t * &z;
                }
                if t2.is_finite() && t2 <= t1 {
                    active.push(p);
                    u = u_plus;
                    break;
                }
                let j = drop.expect("partial step has a blocking constraint");
                active.remove(j);
                u_plus.remove(j);
            }
        }
    }
}
