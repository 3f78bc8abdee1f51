//! Static level structure of one ion: Zeeman splittings of the ground and
//! excited Kramers doublets, the four optical transitions they produce, and
//! the relaxation parameters that drive the population dynamics.
//!
//! All splittings are linear frequencies in MHz.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Bohr magneton over Planck's constant, MHz per mT.
pub const BOHR_MHZ_PER_MT: f64 = 13.996;

/// Level indices in the population basis `(g1, g2, e1, e2)`.
pub const G1: usize = 0;
pub const G2: usize = 1;
pub const E1: usize = 2;
pub const E2: usize = 3;

/// `(lower, upper)` level indices of transitions 1..4:
/// g1->e1, g1->e2, g2->e1, g2->e2.
pub const TRANSITIONS: [(usize, usize); 4] = [(G1, E1), (G1, E2), (G2, E1), (G2, E2)];

fn default_bohr() -> f64 {
    BOHR_MHZ_PER_MT
}

/// Magnetic field and effective g-factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeemanConfig {
    pub field_mt: f64,
    /// Field angle; carried for bookkeeping only.
    #[serde(default)]
    pub theta_deg: f64,
    pub g_ground: f64,
    pub g_excited: f64,
    #[serde(default = "default_bohr")]
    pub bohr_mhz_per_mt: f64,
}

impl ZeemanConfig {
    pub fn new(field_mt: f64, g_ground: f64, g_excited: f64) -> Self {
        Self {
            field_mt,
            theta_deg: 0.0,
            g_ground,
            g_excited,
            bohr_mhz_per_mt: BOHR_MHZ_PER_MT,
        }
    }

    /// Field that puts the excited-state splitting at `delta_e_mhz`.
    pub fn with_excited_splitting(delta_e_mhz: f64, g_ground: f64, g_excited: f64) -> Self {
        Self::new(delta_e_mhz / (BOHR_MHZ_PER_MT * g_excited), g_ground, g_excited)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.field_mt.is_finite() && self.field_mt >= 0.0) {
            return Err(invalid("zeeman.field_mt", "must be finite and >= 0"));
        }
        if !(self.g_ground.is_finite() && self.g_ground > 0.0) {
            return Err(invalid("zeeman.g_ground", "must be > 0"));
        }
        if !(self.g_excited.is_finite() && self.g_excited > 0.0) {
            return Err(invalid("zeeman.g_excited", "must be > 0"));
        }
        if !(self.bohr_mhz_per_mt.is_finite() && self.bohr_mhz_per_mt > 0.0) {
            return Err(invalid("zeeman.bohr_mhz_per_mt", "must be > 0"));
        }
        Ok(())
    }

    /// Ground-state splitting, MHz.
    pub fn delta_g(&self) -> f64 {
        zeeman_splitting(self.g_ground, self)
    }

    /// Excited-state splitting, MHz.
    pub fn delta_e(&self) -> f64 {
        zeeman_splitting(self.g_excited, self)
    }
}

/// Splitting `mu_B/h * g * B` of a doublet with effective g-factor `g`.
pub fn zeeman_splitting(g: f64, config: &ZeemanConfig) -> f64 {
    config.bohr_mhz_per_mt * g * config.field_mt
}

fn default_persistent_rate() -> f64 {
    1.0
}

/// Relaxation and branching parameters. Times in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateParams {
    /// Excited-state lifetime.
    pub t1_ms: f64,
    /// Ground Zeeman population lifetime, `1 / (w12 + w21)`.
    pub tz_ms: f64,
    /// Probability that spontaneous decay preserves the spin projection.
    pub beta: f64,
    /// Spin-preserving branching for decay routed through the auxiliary
    /// crystal-field level. Defaults to `beta` when omitted.
    #[serde(default)]
    pub beta_z2: Option<f64>,
    /// Oscillator strength of the spin-flip transitions (g1-e2, g2-e1)
    /// relative to the spin-preserving ones. Equal when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_strength: Option<f64>,
    /// Cross-section scale. `None` lets the ensemble calibrate it to the
    /// configured unpumped optical depth.
    #[serde(default)]
    pub sigma_scale: Option<f64>,
    /// Fraction of a class that can be bleached permanently.
    #[serde(default)]
    pub persistent_fraction: f64,
    /// Rate at which excited ions fall into the persistent trap while it
    /// still has capacity, 1/ms.
    #[serde(default = "default_persistent_rate")]
    pub persistent_rate_per_ms: f64,
}

impl RateParams {
    pub fn new(t1_ms: f64, tz_ms: f64, beta: f64) -> Self {
        Self {
            t1_ms,
            tz_ms,
            beta,
            beta_z2: None,
            cross_strength: None,
            sigma_scale: None,
            persistent_fraction: 0.0,
            persistent_rate_per_ms: default_persistent_rate(),
        }
    }

    pub fn beta_z2(&self) -> f64 {
        self.beta_z2.unwrap_or(self.beta)
    }

    /// Relative strength of each transition, in [`TRANSITIONS`] order.
    pub fn transition_strengths(&self) -> [f64; 4] {
        let c = self.cross_strength.unwrap_or(1.0);
        [1.0, c, c, 1.0]
    }

    pub fn validate(&self) -> Result<()> {
        self.issues().into_iter().next().map_or(Ok(()), Err)
    }

    pub(crate) fn issues(&self) -> Vec<Error> {
        let mut out = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if let Some(c) = self.cross_strength {
            if !(c.is_finite() && c >= 0.0) {
                out.push(invalid("rates.cross_strength", "must be >= 0"));
            }
        }
        if !positive(self.t1_ms) {
            out.push(invalid("rates.t1_ms", "must be > 0"));
        }
        if !positive(self.tz_ms) {
            out.push(invalid("rates.tz_ms", "must be > 0"));
        }
        if !unit(self.beta) {
            out.push(invalid("rates.beta", format!("{} is outside [0, 1]", self.beta)));
        }
        if let Some(bz) = self.beta_z2 {
            if !unit(bz) {
                out.push(invalid("rates.beta_z2", format!("{bz} is outside [0, 1]")));
            }
        }
        if let Some(s) = self.sigma_scale {
            if !positive(s) {
                out.push(invalid("rates.sigma_scale", "must be > 0"));
            }
        }
        if !(self.persistent_fraction.is_finite() && (0.0..1.0).contains(&self.persistent_fraction)) {
            out.push(invalid("rates.persistent_fraction", "must lie in [0, 1)"));
        }
        if !(self.persistent_rate_per_ms.is_finite() && self.persistent_rate_per_ms >= 0.0) {
            out.push(invalid("rates.persistent_rate_per_ms", "must be >= 0"));
        }
        out
    }
}

/// Optical transition frequencies of one ion class, MHz relative to the
/// ensemble line center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionSet {
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub f4: f64,
}

impl TransitionSet {
    pub fn as_array(&self) -> [f64; 4] {
        [self.f1, self.f2, self.f3, self.f4]
    }
}

/// Transition frequencies of the class whose g1->e1 line sits at `class_center`.
pub fn transition_set(class_center: f64, config: &ZeemanConfig) -> TransitionSet {
    let dg = config.delta_g();
    let de = config.delta_e();
    TransitionSet {
        f1: class_center,
        f2: class_center + de,
        f3: class_center - dg,
        f4: class_center - (dg - de),
    }
}

/// `T1 / (1 - beta)`: mean time per spin-changing spontaneous decay.
pub fn effective_lifetime(params: &RateParams) -> Result<f64> {
    if params.beta >= 1.0 {
        return Err(Error::NoDecayChannel);
    }
    Ok(params.t1_ms / (1.0 - params.beta))
}
