//! Online Newton step base learner on an interval: curvature-matrix update,
//! rank-one inverse maintenance, and generalized projection onto the
//! parameter ball.

use crate::linalg::{spd_inverse, spd_solve};
use crate::{Error, Hyperparams, Result};
use ndarray::{Array1, Array2};

/// Steps between full re-factorizations of the maintained inverse.
const REFACTOR_PERIOD: u32 = 512;

/// One base learner's state. `a` is `lambda I + sum g g^T` over the gradients
/// seen so far; `a_inv` is its incrementally maintained inverse.
#[derive(Debug, Clone)]
pub struct OnsState {
    pub theta: Array1<f64>,
    pub a: Array2<f64>,
    pub a_inv: Array2<f64>,
    pub interval: (u64, u64),
    pub gamma: f64,
    pub lambda: f64,
    pub norm_bound: f64,
    steps: u32,
    /// Rounds on which the ball projection was active, for diagnostics.
    pub projection_count: u64,
}

/// Initializes a learner for `interval` with theta = 0, A = lambda I.
pub fn ons_init(interval: (u64, u64), h: &Hyperparams) -> Result<OnsState> {
    if interval.1 < interval.0 {
        return Err(Error::InvalidArgument(format!(
            "empty interval [{}, {}]",
            interval.0, interval.1
        )));
    }
    let d = h.dim;
    let a = Array2::<f64>::eye(d) * h.lambda_ons;
    let a_inv = Array2::<f64>::eye(d) / h.lambda_ons;
    Ok(OnsState {
        theta: Array1::zeros(d),
        a,
        a_inv,
        interval,
        gamma: h.gamma_ons,
        lambda: h.lambda_ons,
        norm_bound: h.radius_s,
        steps: 0,
        projection_count: 0,
    })
}

impl OnsState {
    /// One update with the round's gradient evaluated at this learner's own
    /// theta. A absorbs the gradient first, so the step uses the current
    /// round's curvature.
    pub fn step(&mut self, grad: &Array1<f64>) -> Result<()> {
        if grad.len() != self.theta.len() {
            return Err(Error::InvalidArgument("gradient dimension mismatch".into()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite gradient component".into()));
        }
        let g_sq = grad.dot(grad);
        if g_sq > 0.0 {
            // A += g g^T, Sherman-Morrison on the inverse.
            let d = grad.len();
            for i in 0..d {
                for j in 0..d {
                    self.a[(i, j)] += grad[i] * grad[j];
                }
            }
            let u = self.a_inv.dot(grad);
            let denom = 1.0 + grad.dot(&u);
            for i in 0..d {
                for j in 0..d {
                    self.a_inv[(i, j)] -= u[i] * u[j] / denom;
                }
            }
        }
        self.steps += 1;
        if self.steps.is_multiple_of(REFACTOR_PERIOD) {
            self.a_inv = spd_inverse(&self.a)?;
        }
        let step = self.a_inv.dot(grad);
        let target = &self.theta - &(step * self.gamma);
        let projected = proj_weighted_ball(&self.a, &target, self.norm_bound)?;
        if target.dot(&target).sqrt() > self.norm_bound {
            self.projection_count += 1;
        }
        self.theta = projected;
        Ok(())
    }
}

/// Projects `theta_p` onto the Euclidean ball of radius `s` in the norm
/// induced by SPD matrix `a`: the minimizer of (t - theta_p)^T A (t - theta_p)
/// over ||t|| <= s.
///
/// Interior points pass through unchanged. Otherwise the KKT system
/// (A + nu I) t = A theta_p is solved with nu >= 0 found by bisection on the
/// monotone map nu -> ||t(nu)||.
pub fn proj_weighted_ball(a: &Array2<f64>, theta_p: &Array1<f64>, s: f64) -> Result<Array1<f64>> {
    let norm = theta_p.dot(theta_p).sqrt();
    if norm <= s {
        return Ok(theta_p.clone());
    }
    let rhs = a.dot(theta_p);
    let theta_of = |nu: f64| -> Result<Array1<f64>> {
        let d = a.nrows();
        let mut m = a.clone();
        for i in 0..d {
            m[(i, i)] += nu;
        }
        spd_solve(&m, &rhs)
    };
    // Bracket: ||t(0)|| = ||theta_p|| > s and ||t(nu)|| -> 0 as nu grows.
    let mut lo = 0.0;
    let mut hi = 1.0;
    for _ in 0..200 {
        let t = theta_of(hi)?;
        if t.dot(&t).sqrt() < s {
            break;
        }
        lo = hi;
        hi *= 2.0;
    }
    let mut result = theta_of(hi)?;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let t = theta_of(mid)?;
        let n = t.dot(&t).sqrt();
        if (n - s).abs() <= 1e-10 {
            return Ok(t);
        }
        if n > s {
            lo = mid;
        } else {
            hi = mid;
            result = t;
        }
    }
    Ok(result)
}
