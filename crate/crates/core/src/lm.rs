//! Small dense Levenberg–Marquardt solver shared by the calibration and PSF fits.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A nonlinear least-squares problem `min Σ r_i(p)²`.
pub trait LeastSquares {
    /// Residual vector, or `None` when `params` leave the model's domain.
    fn residuals(&self, params: &DVector<f64>) -> Option<DVector<f64>>;
    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy)]
pub struct LevenbergMarquardt {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub cost_tolerance: f64,
    pub initial_damping: f64,
}

impl Default for LevenbergMarquardt {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            cost_tolerance: 1e-10,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    /// Sum of squared residuals.
    pub cost: f64,
    pub iterations: usize,
    /// Cost after every iteration, accepted or not.
    pub trace: Vec<f64>,
    /// `JᵀJ` at the solution.
    pub normal_matrix: DMatrix<f64>,
}

impl LmOutcome {
    pub fn residual_norm(&self) -> f64 {
        self.cost.sqrt()
    }

    /// Residual-variance-scaled inverse of the normal matrix.
    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        let n = self.residuals.len();
        let p = self.params.len();
        if n <= p {
            return None;
        }
        let inv = self.normal_matrix.clone().try_inverse()?;
        let s2 = self.cost / (n - p) as f64;
        let cov = inv * s2;
        // symmetrize round-off
        Some((&cov + cov.transpose()) * 0.5)
    }
}

impl LevenbergMarquardt {
    pub fn minimize<P: LeastSquares>(&self, problem: &P, start: DVector<f64>) -> Result<LmOutcome> {
        let mut params = start;
        let mut residuals = problem
            .residuals(&params)
            .ok_or_else(|| Error::Fit("initial parameters outside the model domain".into()))?;
        let mut cost = residuals.norm_squared();
        if !cost.is_finite() {
            return Err(Error::Fit("initial cost is not finite".into()));
        }

        let mut jac = problem.jacobian(&params);
        let mut normal = jac.transpose() * &jac;
        let mut gradient = jac.transpose() * &residuals;
        let dim = params.len();
        let scale = (normal.trace() / dim as f64).max(f64::MIN_POSITIVE);
        let mut damping = self.initial_damping * scale;
        let mut trace = Vec::new();

        for iteration in 1..=self.max_iterations {
            if cost == 0.0 || gradient.norm() == 0.0 {
                return Ok(self.finish(params, residuals, cost, iteration - 1, trace, normal));
            }
            let damped = &normal + DMatrix::identity(dim, dim) * damping;
            let step = match damped.cholesky() {
                Some(ch) => ch.solve(&(-&gradient)),
                None => {
                    damping *= 10.0;
                    trace.push(cost);
                    continue;
                }
            };
            let candidate = &params + &step;
            let accepted = problem
                .residuals(&candidate)
                .map(|r| (r.norm_squared(), r))
                .filter(|(c, _)| c.is_finite() && *c < cost);

            match accepted {
                Some((new_cost, new_residuals)) => {
                    let relative = (cost - new_cost) / cost;
                    params = candidate;
                    residuals = new_residuals;
                    cost = new_cost;
                    trace.push(cost);
                    damping = (damping * 0.1).max(1e-20 * scale);
                    jac = problem.jacobian(&params);
                    normal = jac.transpose() * &jac;
                    gradient = jac.transpose() * &residuals;
                    if relative < self.cost_tolerance {
                        return Ok(self.finish(params, residuals, cost, iteration, trace, normal));
                    }
                }
                None => {
                    trace.push(cost);
                    damping *= 10.0;
                    // no representable improvement left
                    if step.norm() <= 1e-14 * (params.norm() + 1e-14) {
                        return Ok(self.finish(params, residuals, cost, iteration, trace, normal));
                    }
                }
            }
        }

        Err(Error::Convergence {
            iterations: self.max_iterations,
            residual_norm: cost.sqrt(),
            trace,
        })
    }

    fn finish(
        &self,
        params: DVector<f64>,
        residuals: DVector<f64>,
        cost: f64,
        iterations: usize,
        trace: Vec<f64>,
        normal_matrix: DMatrix<f64>,
    ) -> LmOutcome {
        LmOutcome {
            params,
            residuals,
            cost,
            iterations,
            trace,
            normal_matrix,
        }
    }
}
