//! Damped least squares with Marquardt diagonal scaling.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    /// Bound on the scaled cosine between the residual and every Jacobian
    /// column.
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-10,
            max_iterations: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmOutcome {
    pub params: DVector<f64>,
    pub residuals: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm after each accepted step, starting with the initial guess.
    pub history: Vec<f64>,
}

impl LmOutcome {
    pub fn residual_norm(&self) -> f64 {
        self.residuals.norm()
    }
}

/// Largest `|J_j . r| / (|J_j| |r|)` over the columns of `J`.
fn gradient_cosine(jacobian: &DMatrix<f64>, residuals: &DVector<f64>) -> f64 {
    let rn = residuals.norm();
    if rn == 0.0 {
        return 0.0;
    }
    jacobian
        .column_iter()
        .map(|col| {
            let cn = col.norm();
            if cn == 0.0 {
                0.0
            } else {
                (col.dot(residuals) / (cn * rn)).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `|r(p)|^2` from `p0`. `model` returns residuals and their
/// Jacobian. `scale` is the magnitude of the data; a residual norm at the
/// rounding level of `scale` counts as an exact fit.
pub fn levenberg_marquardt<F>(p0: DVector<f64>, scale: f64, options: &LmOptions, model: F) -> LmOutcome
where
    F: Fn(&DVector<f64>) -> (DVector<f64>, DMatrix<f64>),
{
    let mut params = p0;
    let (mut residuals, mut jacobian) = model(&params);
    let n = residuals.len().max(1) as f64;
    let exact = 1e-13 * scale.abs().max(f64::MIN_POSITIVE) * n.sqrt();
    let mut cost = residuals.norm_squared();
    let mut history = vec![cost.sqrt()];
    let mut lambda = {
        let jtj = jacobian.transpose() * &jacobian;
        1e-3 * jtj.diagonal().max().max(1e-300)
    };
    let mut converged = false;
    let mut iterations = 0;

    if !cost.is_finite() {
        return LmOutcome {
            params,
            residuals,
            jacobian,
            iterations,
            converged,
            history,
        };
    }

    while iterations < options.max_iterations {
        if cost.sqrt() <= exact || gradient_cosine(&jacobian, &residuals) <= options.gradient_tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let jt = jacobian.transpose();
        let jtj = &jt * &jacobian;
        let gradient = &jt * &residuals;
        let diag = jtj.diagonal().map(|d| d.max(1e-12 * jtj.diagonal().max()).max(1e-300));

        let mut accepted = false;
        while lambda < 1e30 {
            let mut a = jtj.clone();
            for i in 0..a.nrows() {
                a[(i, i)] += lambda * diag[i];
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&(-&gradient))) else {
                lambda *= 4.0;
                continue;
            };
            let trial = &params + &step;
            let (r_new, j_new) = model(&trial);
            let new_cost = r_new.norm_squared();
            if new_cost.is_finite() && new_cost < cost {
                let predicted = -(step.dot(&gradient) * 2.0 + (&jacobian * &step).norm_squared());
                let rho = (cost - new_cost) / predicted.max(1e-300);
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                params = trial;
                residuals = r_new;
                jacobian = j_new;
                cost = new_cost;
                history.push(cost.sqrt());
                accepted = true;
                break;
            }
            lambda *= 2.0;
        }
        if !accepted {
            // no descent direction left at working precision; the cosine
            // itself cannot be resolved below the rounding of the residuals
            let floor = 16.0 * f64::EPSILON * scale.abs() * n.sqrt() / cost.sqrt().max(f64::MIN_POSITIVE);
            converged = gradient_cosine(&jacobian, &residuals) <= options.gradient_tolerance.max(floor);
            break;
        }
    }
    if !converged && iterations >= options.max_iterations {
        converged = cost.sqrt() <= exact || gradient_cosine(&jacobian, &residuals) <= options.gradient_tolerance;
    }
    LmOutcome {
        params,
        residuals,
        jacobian,
        iterations,
        converged,
        history,
    }
}
