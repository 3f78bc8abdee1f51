//! Search for the pump rate and auxiliary-level branching that reproduce
//! measured residual absorptions.

use crate::config::{ExperimentConfig, SweepMetric, SweepParameter};
use crate::error::{invalid, Error, Result};
use crate::scenario::{apply_sweep, evaluate_metric, execute};

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationTargets {
    /// Residual absorption after pumping with stimulation.
    pub stimulated_rho1: f64,
    /// Residual absorption after pumping with stimulation and RF mixing.
    pub rf_rho1: f64,
    pub window_mhz: (f64, f64),
    pub readout: Option<String>,
    /// Absolute tolerance on both residuals.
    pub tolerance: f64,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        Self {
            stimulated_rho1: 0.25,
            rf_rho1: 0.16,
            window_mhz: (-2.0, 2.0),
            readout: Some("early".into()),
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub pump_rate: f64,
    pub beta_z2: f64,
    pub stimulated_rho1: f64,
    pub rf_rho1: f64,
    pub evaluations: usize,
}

/// Root of `f` inside `[lo, hi]` by regula falsi with the Illinois
/// modification. `f(lo)` and `f(hi)` must differ in sign.
pub fn find_root<F>(mut f: F, mut lo: f64, mut hi: f64, x_tol: f64, f_tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (mut f_lo, mut f_hi) = (f(lo)?, f(hi)?);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() {
        return Err(invalid(
            "calibration",
            format!("target not bracketed by [{lo}, {hi}] (residuals {f_lo:.4e}, {f_hi:.4e})"),
        ));
    }
    let mut side = 0i8;
    for _ in 0..100 {
        let x = (lo * f_hi - hi * f_lo) / (f_hi - f_lo);
        let fx = f(x)?;
        if fx.abs() <= f_tol || (hi - lo).abs() <= x_tol {
            return Ok(x);
        }
        if fx.signum() == f_lo.signum() {
            lo = x;
            f_lo = fx;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            f_hi = fx;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    Err(Error::Numeric("root search did not converge".into()))
}

fn knobs(config: &ExperimentConfig, pump_rate: f64, beta_z2: f64) -> Result<ExperimentConfig> {
    let mut c = apply_sweep(config, SweepParameter::PumpRate, pump_rate)?;
    c.rates.beta_z2 = Some(beta_z2);
    Ok(c)
}

fn rho1(config: &ExperimentConfig, targets: &CalibrationTargets) -> Result<f64> {
    let exec = execute(config)?;
    evaluate_metric(
        SweepMetric::Rho1Res,
        exec.readout(targets.readout.as_deref())?,
        targets.window_mhz,
    )
}

pub const PUMP_RATE_RANGE: (f64, f64) = (0.2, 20.0);
pub const BETA_Z2_RANGE: (f64, f64) = (0.5, 0.999);

/// Alternately tunes the pump rate so the RF scenario meets its target and
/// `beta_z2` so the stimulated scenario meets its own, until both hold.
/// Both knobs are searched inside [`PUMP_RATE_RANGE`] and
/// [`BETA_Z2_RANGE`]; `initial_beta_z2` seeds the first pump-rate search.
pub fn calibrate(
    stimulated: &ExperimentConfig,
    rf: &ExperimentConfig,
    targets: &CalibrationTargets,
    initial_beta_z2: f64,
) -> Result<Calibration> {
    let mut beta_z2 = initial_beta_z2;
    let mut evaluations = 0usize;
    let tol = targets.tolerance;
    for _ in 0..20 {
        let pump_rate = find_root(
            |r| {
                evaluations += 1;
                Ok(rho1(&knobs(rf, r, beta_z2)?, targets)? - targets.rf_rho1)
            },
            PUMP_RATE_RANGE.0,
            PUMP_RATE_RANGE.1,
            1e-9,
            0.1 * tol,
        )?;
        beta_z2 = find_root(
            |b| {
                evaluations += 1;
                Ok(rho1(&knobs(stimulated, pump_rate, b)?, targets)? - targets.stimulated_rho1)
            },
            BETA_Z2_RANGE.0,
            BETA_Z2_RANGE.1,
            1e-9,
            0.1 * tol,
        )?;
        let stimulated_rho1 = rho1(&knobs(stimulated, pump_rate, beta_z2)?, targets)?;
        let rf_rho1 = rho1(&knobs(rf, pump_rate, beta_z2)?, targets)?;
        evaluations += 2;
        log::debug!("calibration: R={pump_rate} beta_z2={beta_z2} -> {stimulated_rho1}, {rf_rho1}");
        if (stimulated_rho1 - targets.stimulated_rho1).abs() <= tol && (rf_rho1 - targets.rf_rho1).abs() <= tol {
            return Ok(Calibration {
                pump_rate,
                beta_z2,
                stimulated_rho1,
                rf_rho1,
                evaluations,
            });
        }
    }
    Err(Error::Numeric("calibration did not settle".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn illinois_finds_cube_root() {
        let x = find_root(|x| Ok(x * x * x - 2.0), 0.0, 3.0, 1e-14, 1e-14).unwrap();
        assert!((x - 2f64.cbrt()).abs() < 1e-12);
    }

    #[test]
    fn unbracketed_root_is_an_error() {
        assert!(find_root(|x| Ok(x * x + 1.0), -1.0, 1.0, 1e-9, 1e-9).is_err());
    }
}
