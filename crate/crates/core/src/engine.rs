//! Population dynamics of a single ion class.
//!
//! A class is described by the populations of its two ground Zeeman levels
//! and two excited Zeeman levels. The auxiliary crystal-field level reached by
//! stimulated emission decays in picoseconds and is eliminated: population
//! stimulated out of an excited level lands directly in the ground doublet.
//!
//! Drives are piecewise constant, so the evolution over a segment is the
//! exact matrix exponential of a 4x4 generator.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::levels::{RateParams, E1, E2, G1, G2, TRANSITIONS};

/// Populations of one frequency class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IonClassState {
    pub g1: f64,
    pub g2: f64,
    pub e1: f64,
    pub e2: f64,
    /// Population removed permanently (persistent holes).
    pub persistent_bleached: f64,
}

impl IonClassState {
    /// Equal ground populations, empty excited state.
    pub fn thermal() -> Self {
        Self {
            g1: 0.5,
            g2: 0.5,
            e1: 0.0,
            e2: 0.0,
            persistent_bleached: 0.0,
        }
    }

    pub fn from_levels(levels: Vector4<f64>, persistent_bleached: f64) -> Self {
        Self {
            g1: levels[G1],
            g2: levels[G2],
            e1: levels[E1],
            e2: levels[E2],
            persistent_bleached,
        }
    }

    pub fn levels(&self) -> Vector4<f64> {
        Vector4::new(self.g1, self.g2, self.e1, self.e2)
    }

    pub fn level(&self, index: usize) -> f64 {
        self.levels()[index]
    }

    pub fn excited(&self) -> f64 {
        self.e1 + self.e2
    }

    /// Sum of all components, including the bleached fraction.
    pub fn total(&self) -> f64 {
        self.g1 + self.g2 + self.e1 + self.e2 + self.persistent_bleached
    }

    pub fn is_thermal(&self) -> bool {
        *self == Self::thermal()
    }
}

/// Drive strengths acting on one class during a segment, all in 1/ms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DriveRates {
    /// Optical pump rate on transitions 1..4.
    pub pump_rate: [f64; 4],
    pub stim_rate_e1: f64,
    pub stim_rate_e2: f64,
    pub rf_mix_rate: f64,
}

impl DriveRates {
    pub fn none() -> Self {
        Self::default()
    }

    /// Pump on a single transition (0-based index).
    pub fn pump(transition: usize, rate: f64) -> Self {
        let mut d = Self::default();
        d.pump_rate[transition] = rate;
        d
    }

    pub fn with_stimulation(mut self, rate: f64) -> Self {
        self.stim_rate_e1 = rate;
        self.stim_rate_e2 = rate;
        self
    }

    pub fn with_mixing(mut self, rate: f64) -> Self {
        self.rf_mix_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let rates = self
            .pump_rate
            .iter()
            .chain([&self.stim_rate_e1, &self.stim_rate_e2, &self.rf_mix_rate]);
        if rates.into_iter().all(|r| r.is_finite() && *r >= 0.0) {
            Ok(())
        } else {
            Err(invalid("drive", "rates must be finite and >= 0"))
        }
    }
}

/// Generator of the linear population dynamics over `(g1, g2, e1, e2)`.
///
/// Off-diagonal entries are transfer rates (column = source, row =
/// destination); columns sum to zero except for leakage into the persistent
/// reservoir.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateMatrix {
    generator: Matrix4<f64>,
}

impl RateMatrix {
    pub fn from_generator(generator: Matrix4<f64>) -> Result<Self> {
        if generator.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite generator entry".into()));
        }
        let scale = generator.amax().max(1.0);
        for j in 0..4 {
            for i in 0..4 {
                if i != j && generator[(i, j)] < 0.0 {
                    return Err(invalid("generator", "negative off-diagonal rate"));
                }
            }
            if generator.column(j).sum() > 1e-12 * scale {
                return Err(invalid("generator", "column creates population"));
            }
        }
        Ok(Self { generator })
    }

    pub fn generator(&self) -> &Matrix4<f64> {
        &self.generator
    }

    /// Adds a loss at `rate` from both excited levels into the persistent
    /// reservoir.
    pub fn with_excited_leak(&self, rate: f64) -> Self {
        let mut generator = self.generator;
        generator[(E1, E1)] -= rate;
        generator[(E2, E2)] -= rate;
        Self { generator }
    }

    pub fn is_conservative(&self) -> bool {
        let scale = self.generator.amax().max(1.0);
        (0..4).all(|j| self.generator.column(j).sum().abs() <= 1e-12 * scale)
    }

    fn transfer(&mut self, from: usize, to: usize, rate: f64) {
        self.generator[(to, from)] += rate;
        self.generator[(from, from)] -= rate;
    }
}

/// Assembles the generator for one class under constant drive.
pub fn build_rate_matrix(params: &RateParams, drive: &DriveRates) -> RateMatrix {
    let mut m = RateMatrix {
        generator: Matrix4::zeros(),
    };
    let spont = 1.0 / params.t1_ms;
    let flip = 0.5 / params.tz_ms;
    let beta = params.beta;
    let beta_z2 = params.beta_z2();

    m.transfer(G1, G2, flip);
    m.transfer(G2, G1, flip);

    for (upper, same, other, stim) in [(E1, G1, G2, drive.stim_rate_e1), (E2, G2, G1, drive.stim_rate_e2)] {
        m.transfer(upper, same, beta * spont + beta_z2 * stim);
        m.transfer(upper, other, (1.0 - beta) * spont + (1.0 - beta_z2) * stim);
    }

    for (&(lower, upper), &rate) in TRANSITIONS.iter().zip(&drive.pump_rate) {
        m.transfer(lower, upper, rate);
        m.transfer(upper, lower, rate);
    }

    m.transfer(E1, E2, drive.rf_mix_rate);
    m.transfer(E2, E1, drive.rf_mix_rate);
    m
}

/// Exact propagator `exp(M dt)` for one constant segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Propagator {
    matrix: Matrix4<f64>,
    conservative: bool,
}

impl Propagator {
    pub fn new(rates: &RateMatrix, dt_ms: f64) -> Result<Self> {
        if !(dt_ms.is_finite() && dt_ms >= 0.0) {
            return Err(invalid("dt", "must be finite and >= 0"));
        }
        let scaled = rates.generator * dt_ms;
        if scaled.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite generator entry".into()));
        }
        let conservative = rates.is_conservative();
        let mut matrix = if dt_ms == 0.0 {
            Matrix4::identity()
        } else {
            scaled.exp()
        };
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("matrix exponential overflowed".into()));
        }
        // exp of a Metzler generator is entrywise non-negative
        matrix.apply(|v| *v = v.max(0.0));
        if conservative {
            for j in 0..4 {
                let off: f64 = (0..4).filter(|&i| i != j).map(|i| matrix[(i, j)]).sum();
                matrix[(j, j)] = (1.0 - off).max(0.0);
            }
        }
        Ok(Self { matrix, conservative })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
            conservative: true,
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    /// Propagator for `self` followed by `next`.
    pub fn then(&self, next: &Propagator) -> Propagator {
        Propagator {
            matrix: next.matrix * self.matrix,
            conservative: self.conservative && next.conservative,
        }
    }

    pub fn apply(&self, state: &IonClassState) -> IonClassState {
        let before = state.levels();
        let after = self.matrix * before;
        let mut persistent = state.persistent_bleached;
        if !self.conservative {
            persistent += (before.sum() - after.sum()).max(0.0);
        }
        IonClassState::from_levels(after, persistent)
    }
}

/// `exp(M dt) * state`, with population lost from the 4-level block moved
/// into the persistent reservoir.
pub fn evolve(state: &IonClassState, matrix: &RateMatrix, dt_ms: f64) -> Result<IonClassState> {
    Ok(Propagator::new(matrix, dt_ms)?.apply(state))
}

/// Normalized null vector of a conservative generator.
pub fn steady_state(matrix: &RateMatrix) -> Result<IonClassState> {
    if !matrix.is_conservative() {
        return Err(invalid("generator", "steady state requires a conservative generator"));
    }
    let g = matrix.generator;
    let svd = g.svd(false, false);
    let max_sv = svd.singular_values.max();
    if max_sv == 0.0 {
        return Err(Error::NonUniqueSteadyState(4));
    }
    let null_dim = svd.singular_values.iter().filter(|&&s| s <= 1e-13 * max_sv).count();
    if null_dim != 1 {
        return Err(Error::NonUniqueSteadyState(null_dim));
    }
    // Rows of a conservative generator are linearly dependent, so one of
    // them can carry the normalization instead.
    let mut system = g;
    system.set_row(3, &nalgebra::RowVector4::repeat(1.0));
    let rhs = Vector4::new(0.0, 0.0, 0.0, 1.0);
    let x = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric("steady-state system is singular".into()))?;
    let x = x.map(|v| v.max(0.0));
    let x = x / x.sum();
    Ok(IonClassState::from_levels(x, 0.0))
}

/// Ground-state population ratio after saturated pumping when every decay
/// changes the spin.
pub fn ratio_standard(t1_ms: f64, tz_ms: f64) -> f64 {
    1.0 + 2.0 * tz_ms / t1_ms
}

/// Same ratio with only the spin-changing fraction `1 - beta` of decays
/// feeding the target level.
pub fn ratio_effective(t1_ms: f64, tz_ms: f64, beta: f64) -> f64 {
    1.0 + 2.0 * tz_ms * (1.0 - beta) / t1_ms
}

/// Ratio when spontaneous decay is replaced by stimulation at `gamma_per_ms`.
pub fn ratio_stimulated(beta: f64, gamma_per_ms: f64, tz_ms: f64) -> f64 {
    1.0 + 2.0 * (1.0 - beta) * gamma_per_ms * tz_ms
}

/// Lorentzian pump rate seen at `detuning_mhz` from a laser of FWHM
/// `laser_linewidth_mhz`.
pub fn pump_rate_profile(peak_rate: f64, laser_linewidth_mhz: f64, detuning_mhz: f64) -> f64 {
    let hw = 0.5 * laser_linewidth_mhz;
    peak_rate * hw * hw / (detuning_mhz * detuning_mhz + hw * hw)
}

/// Spectral shape of the pump laser as seen by a single class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaserLineshape {
    #[default]
    Lorentzian,
    /// Gaussian frequency jitter of the given FWHM.
    Gaussian,
}

impl LaserLineshape {
    /// Rate at a fixed detuning.
    pub fn rate(self, peak_rate: f64, fwhm_mhz: f64, detuning_mhz: f64) -> f64 {
        match self {
            Self::Lorentzian => pump_rate_profile(peak_rate, fwhm_mhz, detuning_mhz),
            Self::Gaussian => {
                let x = detuning_mhz / fwhm_mhz;
                peak_rate * (-4.0 * std::f64::consts::LN_2 * x * x).exp()
            }
        }
    }

    /// Time-averaged rate while the detuning is chirped linearly from
    /// `from_mhz` to `to_mhz`.
    pub fn mean_rate(self, peak_rate: f64, fwhm_mhz: f64, from_mhz: f64, to_mhz: f64) -> f64 {
        let (a, b) = if from_mhz <= to_mhz {
            (from_mhz, to_mhz)
        } else {
            (to_mhz, from_mhz)
        };
        let width = b - a;
        if width <= 1e-9 * fwhm_mhz {
            return self.rate(peak_rate, fwhm_mhz, 0.5 * (a + b));
        }
        let integral = match self {
            Self::Lorentzian => {
                let hw = 0.5 * fwhm_mhz;
                hw * ((b / hw).atan() - (a / hw).atan())
            }
            Self::Gaussian => {
                let s = fwhm_mhz / (2.0 * std::f64::consts::LN_2.sqrt());
                let (xa, xb) = (a / s, b / s);
                let diff = if xa >= 0.0 {
                    libm::erfc(xa) - libm::erfc(xb)
                } else if xb <= 0.0 {
                    libm::erfc(-xb) - libm::erfc(-xa)
                } else {
                    libm::erf(xb) - libm::erf(xa)
                };
                0.5 * s * std::f64::consts::PI.sqrt() * diff
            }
        };
        peak_rate * integral / width
    }
}

/// Stimulation rate, linear in power.
pub fn stimulation_rate(power_mw: f64, slope_per_mw_ms: f64) -> f64 {
    slope_per_mw_ms * power_mw
}

/// Excited-state mixing rate for an RF drive of peak-to-peak `voltage_vpp`;
/// RF power scales with the square of the voltage.
pub fn rf_mix_rate(voltage_vpp: f64, coupling_per_v2_ms: f64) -> f64 {
    coupling_per_v2_ms * voltage_vpp * voltage_vpp
}

/// Saturable trap feeding the persistent reservoir: excited ions leak into
/// it at `rate_per_ms` until a fraction `capacity` of the class is bleached.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersistentTrap {
    pub capacity: f64,
    pub rate_per_ms: f64,
}

impl PersistentTrap {
    pub fn from_params(params: &RateParams) -> Option<Self> {
        (params.persistent_fraction > 0.0 && params.persistent_rate_per_ms > 0.0).then_some(Self {
            capacity: params.persistent_fraction,
            rate_per_ms: params.persistent_rate_per_ms,
        })
    }

    pub fn is_full(&self, state: &IonClassState) -> bool {
        state.persistent_bleached >= self.capacity * (1.0 - 1e-12)
    }

    /// Evolves across a segment in which the trap fills up: the leak runs
    /// until the bleached fraction reaches capacity, then switches off.
    pub fn fill_across(&self, state: &IonClassState, conservative: &RateMatrix, dt_ms: f64) -> Result<IonClassState> {
        let leaky = conservative.with_excited_leak(self.rate_per_ms);
        let (mut lo, mut hi) = (0.0, dt_ms);
        let mut at_lo = *state;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            let s = evolve(state, &leaky, mid)?;
            if s.persistent_bleached <= self.capacity {
                lo = mid;
                at_lo = s;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * dt_ms.max(1e-300) {
                break;
            }
        }
        // pin to capacity; the residual mismatch is at rounding level
        let excess = self.capacity - at_lo.persistent_bleached;
        at_lo.persistent_bleached = self.capacity;
        at_lo.e1 = (at_lo.e1 - 0.5 * excess).max(0.0);
        at_lo.e2 = (at_lo.e2 - 0.5 * excess).max(0.0);
        evolve(&at_lo, conservative, dt_ms - lo)
    }
}

/// Evolves one class over a constant segment, including the persistent
/// trap when `params` enables it.
pub fn advance(state: &IonClassState, params: &RateParams, drive: &DriveRates, dt_ms: f64) -> Result<IonClassState> {
    drive.validate()?;
    let m = build_rate_matrix(params, drive);
    match PersistentTrap::from_params(params) {
        Some(trap) if !trap.is_full(state) => {
            let s = evolve(state, &m.with_excited_leak(trap.rate_per_ms), dt_ms)?;
            if s.persistent_bleached <= trap.capacity {
                Ok(s)
            } else {
                trap.fill_across(state, &m, dt_ms)
            }
        }
        _ => evolve(state, &m, dt_ms),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params() -> RateParams {
        RateParams::new(11.0, 100.0, 0.9)
    }

    /// Independent exponential: Taylor series with scaling and squaring.
    fn taylor_expm(m: &Matrix4<f64>) -> Matrix4<f64> {
        let norm = m.abs().column_sum().max();
        let squarings = (norm.max(1.0).log2().ceil() as i32 + 4).max(0);
        let a = m / 2f64.powi(squarings);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..30 {
            term = term * a / k as f64;
            sum += term;
        }
        for _ in 0..squarings {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn perfect_spin_conservation_decays_into_own_ground_level() {
        let mut p = params();
        p.beta = 1.0;
        let m = build_rate_matrix(&p, &DriveRates::none());
        let g = m.generator();
        assert!((g[(G1, E1)] - 1.0 / 11.0).abs() < 1e-15);
        assert_eq!(g[(G2, E1)], 0.0);
        assert!((g[(E1, E1)] + 1.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn ground_block_is_symmetric_flip() {
        let m = build_rate_matrix(&params(), &DriveRates::none());
        let g = m.generator();
        assert_eq!(g[(G2, G1)], 0.005);
        assert_eq!(g[(G1, G2)], 0.005);
        let ss = steady_state(&m).unwrap();
        assert!((ss.g1 - 0.5).abs() < 1e-12 && (ss.g2 - 0.5).abs() < 1e-12);
        assert!(ss.e1.abs() < 1e-12 && ss.e2.abs() < 1e-12);
    }

    #[test]
    fn spin_changing_decay_rate_is_inverse_effective_lifetime() {
        let m = build_rate_matrix(&params(), &DriveRates::none());
        let a32 = m.generator()[(G2, E1)];
        assert!((a32 - 1.0 / 110.0).abs() < 1e-15);
    }

    #[test]
    fn zero_step_is_identity() {
        let m = build_rate_matrix(&params(), &DriveRates::pump(0, 3.0));
        let s = IonClassState {
            g1: 0.2,
            g2: 0.5,
            e1: 0.1,
            e2: 0.2,
            persistent_bleached: 0.0,
        };
        assert_eq!(evolve(&s, &m, 0.0).unwrap(), s);
    }

    #[test]
    fn excited_population_decays_with_t1() {
        let m = build_rate_matrix(&params(), &DriveRates::none());
        let s = IonClassState {
            g1: 0.0,
            g2: 0.0,
            e1: 1.0,
            e2: 0.0,
            persistent_bleached: 0.0,
        };
        let out = evolve(&s, &m, 11.0).unwrap();
        assert!((out.excited() - (-1f64).exp()).abs() < 1e-12);
        assert!((out.total() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn propagator_matches_taylor_oracle() {
        let drive = DriveRates {
            pump_rate: [5.0, 0.1, 0.3, 0.0],
            stim_rate_e1: 7.0,
            stim_rate_e2: 7.0,
            rf_mix_rate: 40.0,
        };
        let m = build_rate_matrix(&params(), &drive);
        for dt in [1e-3, 0.37, 5.0, 200.0] {
            let p = Propagator::new(&m, dt).unwrap();
            let oracle = taylor_expm(&(m.generator() * dt));
            // the oracle loses precision with each squaring
            assert!((p.matrix() - oracle).amax() < 1e-11 * dt.max(1.0), "dt = {dt}");
        }
    }

    #[test]
    fn non_finite_entries_are_rejected() {
        let mut p = params();
        p.t1_ms = 0.0;
        let m = build_rate_matrix(&p, &DriveRates::none());
        assert!(matches!(
            evolve(&IonClassState::thermal(), &m, 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn saturating_pump_reproduces_effective_ratio() {
        let p = params();
        let m = build_rate_matrix(&p, &DriveRates::pump(0, 1e6));
        let ss = steady_state(&m).unwrap();
        let ratio = ss.g2 / ss.g1;
        let want = ratio_effective(p.t1_ms, p.tz_ms, p.beta);
        assert!((ratio / want - 1.0).abs() < 1e-4, "{ratio} vs {want}");
        assert!((ss.g1 - ss.e1).abs() < 1e-5);
    }

    #[test]
    fn saturating_pump_with_beta_zero_reproduces_standard_ratio() {
        let p = RateParams::new(11.0, 130.0, 0.0);
        let ss = steady_state(&build_rate_matrix(&p, &DriveRates::pump(0, 1e7))).unwrap();
        assert!((ss.g2 / ss.g1 / ratio_standard(11.0, 130.0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn mixing_increases_transfer() {
        let p = params();
        let base = DriveRates::pump(0, 1e4);
        let r0 = steady_state(&build_rate_matrix(&p, &base)).unwrap();
        let r1 = steady_state(&build_rate_matrix(&p, &base.with_mixing(50.0))).unwrap();
        assert!(r1.g2 / r1.g1 > r0.g2 / r0.g1);
    }

    #[test]
    fn strong_mixing_equalizes_excited_levels() {
        let p = params();
        let drive = DriveRates::pump(0, 3.0).with_mixing(rf_mix_rate(10.0, 100.0));
        let ss = steady_state(&build_rate_matrix(&p, &drive)).unwrap();
        assert!((ss.e1 - ss.e2).abs() < 0.01 * (ss.e1 + ss.e2));
    }

    #[test]
    fn disconnected_generator_has_no_unique_steady_state() {
        let m = RateMatrix::from_generator(Matrix4::zeros()).unwrap();
        assert!(matches!(steady_state(&m), Err(Error::NonUniqueSteadyState(4))));
        let mut g = Matrix4::zeros();
        g[(0, 1)] = 1.0;
        g[(1, 1)] = -1.0;
        let m = RateMatrix::from_generator(g).unwrap();
        assert!(matches!(steady_state(&m), Err(Error::NonUniqueSteadyState(3))));
    }

    #[test]
    fn leaky_generator_has_no_steady_state() {
        let m = build_rate_matrix(&params(), &DriveRates::none()).with_excited_leak(0.1);
        assert!(steady_state(&m).is_err());
    }

    #[test]
    fn ratio_values() {
        assert!((ratio_stimulated(0.95, 7.0, 100.0) - 71.0).abs() < 1e-12);
        assert_eq!(ratio_stimulated(0.95, 0.0, 100.0), 1.0);
        let r1 = ratio_stimulated(0.9, 2.0, 50.0) - 1.0;
        let r2 = ratio_stimulated(0.9, 4.0, 50.0) - 1.0;
        assert!((r2 - 2.0 * r1).abs() < 1e-12);

        assert!((ratio_standard(11.0, 130.0) - 24.636363636363637).abs() < 1e-12);
        assert_eq!(ratio_standard(11.0, 0.0), 1.0);
        assert_eq!(ratio_standard(7.0, 7.0), 3.0);

        assert!((ratio_effective(11.0, 130.0, 0.9) - (1.0 + 260.0 / 110.0)).abs() < 1e-12);
        assert!((ratio_effective(11.0, 130.0, 0.9) - 3.3636).abs() < 1e-4);
        assert_eq!(ratio_effective(11.0, 130.0, 0.0), ratio_standard(11.0, 130.0));
        assert_eq!(ratio_effective(11.0, 130.0, 1.0), 1.0);
    }

    #[test]
    fn lorentzian_pump_profile() {
        assert_eq!(pump_rate_profile(4.0, 2.0, 0.0), 4.0);
        assert!((pump_rate_profile(4.0, 2.0, 1.0) - 2.0).abs() < 1e-15);
        assert!((pump_rate_profile(4.0, 2.0, 20.0) - 4.0 / 401.0).abs() < 1e-15);
    }

    #[test]
    fn chirp_average_matches_quadrature() {
        for shape in [LaserLineshape::Lorentzian, LaserLineshape::Gaussian] {
            for (a, b) in [(-3.0, 2.0), (0.5, 0.9), (-10.0, -4.0), (4.0, 7.5)] {
                let n = 20000;
                let h = (b - a) / n as f64;
                let quad: f64 = (0..n)
                    .map(|i| shape.rate(2.0, 1.0, a + (i as f64 + 0.5) * h))
                    .sum::<f64>()
                    / n as f64;
                let exact = shape.mean_rate(2.0, 1.0, a, b);
                assert!((exact - quad).abs() < 1e-8 * quad.max(1e-30) + 1e-14);
            }
        }
        let g = LaserLineshape::Gaussian;
        assert!((g.rate(1.0, 1.0, 0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn stimulation_and_rf_laws() {
        assert_eq!(stimulation_rate(0.0, 0.35), 0.0);
        assert!((stimulation_rate(20.0, 0.35) - 7.0).abs() < 1e-12);
        assert_eq!(stimulation_rate(10.0, 0.35) * 2.0, stimulation_rate(20.0, 0.35));
        assert_eq!(rf_mix_rate(0.0, 3.0), 0.0);
        assert_eq!(rf_mix_rate(4.0, 3.0), 4.0 * rf_mix_rate(2.0, 3.0));
    }

    #[test]
    fn trap_fills_to_capacity_and_stops() {
        let mut p = params();
        p.persistent_fraction = 0.1;
        p.persistent_rate_per_ms = 1.0;
        let drive = DriveRates::pump(0, 100.0);
        let mut s = IonClassState::thermal();
        for _ in 0..50 {
            s = advance(&s, &p, &drive, 2.0).unwrap();
            assert!(s.persistent_bleached <= 0.1 + 1e-12);
            assert!((s.total() - 1.0).abs() < 1e-12);
        }
        assert!((s.persistent_bleached - 0.1).abs() < 1e-12);
        let later = advance(&s, &p, &DriveRates::none(), 3000.0).unwrap();
        assert!((later.persistent_bleached - 0.1).abs() < 1e-12);
        assert!((later.g1 - 0.45).abs() < 1e-6);
    }

    #[test]
    fn no_drive_eigenvalues() {
        let p = RateParams::new(11.0, 130.0, 0.93);
        let m = build_rate_matrix(&p, &DriveRates::none());
        let mut eig: Vec<f64> = m
            .generator()
            .complex_eigenvalues()
            .iter()
            .map(|c| {
                assert!(c.im.abs() < 1e-12);
                c.re
            })
            .collect();
        eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let want = [-1.0 / 11.0, -1.0 / 11.0, -1.0 / 130.0, 0.0];
        for (a, b) in eig.iter().zip(want) {
            assert!((a - b).abs() < 1e-9, "{eig:?}");
        }
    }

    fn arb_drive() -> impl Strategy<Value = DriveRates> {
        (prop::array::uniform4(0.0f64..50.0), 0.0f64..20.0, 0.0f64..200.0).prop_map(|(pump_rate, stim, mix)| {
            DriveRates {
                pump_rate,
                stim_rate_e1: stim,
                stim_rate_e2: stim,
                rf_mix_rate: mix,
            }
        })
    }

    fn arb_params() -> impl Strategy<Value = RateParams> {
        (1.0f64..30.0, 1.0f64..500.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(t1, tz, b, bz)| {
            let mut p = RateParams::new(t1, tz, b);
            p.beta_z2 = Some(bz);
            p
        })
    }

    fn arb_state() -> impl Strategy<Value = IonClassState> {
        prop::array::uniform4(0.0f64..1.0).prop_map(|v| {
            let s: f64 = v.iter().sum::<f64>().max(1e-9);
            IonClassState::from_levels(Vector4::from(v) / s, 0.0)
        })
    }

    proptest! {
        #[test]
        fn evolution_conserves_and_stays_positive(
            p in arb_params(), d in arb_drive(), s in arb_state(), dt in 0.0f64..300.0
        ) {
            let out = evolve(&s, &build_rate_matrix(&p, &d), dt).unwrap();
            prop_assert!((out.total() - 1.0).abs() < 1e-9);
            prop_assert!(out.levels().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn semigroup(p in arb_params(), d in arb_drive(), s in arb_state(),
                     a in 0.0f64..50.0, b in 0.0f64..50.0) {
            let m = build_rate_matrix(&p, &d);
            let once = evolve(&s, &m, a + b).unwrap();
            let twice = evolve(&evolve(&s, &m, a).unwrap(), &m, b).unwrap();
            prop_assert!((once.levels() - twice.levels()).amax() < 1e-10);
        }

        #[test]
        fn steady_state_is_null_vector(p in arb_params(), d in arb_drive()) {
            let m = build_rate_matrix(&p, &d);
            let ss = steady_state(&m).unwrap();
            prop_assert!((m.generator() * ss.levels()).amax() < 1e-10);
            prop_assert!((ss.total() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn saturation_equalizes_driven_pair(p in arb_params(), k in 0usize..4) {
            let weak = steady_state(&build_rate_matrix(&p, &DriveRates::pump(k, 1.0))).unwrap();
            let strong = steady_state(&build_rate_matrix(&p, &DriveRates::pump(k, 1e5))).unwrap();
            let (lo, up) = TRANSITIONS[k];
            let gap = |s: &IonClassState| (s.level(lo) - s.level(up)).abs();
            prop_assert!(gap(&strong) <= gap(&weak) + 1e-12);
            prop_assert!(gap(&strong) < 1e-3);
        }
    }
}
