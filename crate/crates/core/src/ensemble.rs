//! Inhomogeneously broadened ensemble: a uniform grid of frequency classes,
//! optical-depth synthesis from class populations, and hole/antihole metrics.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::IonClassState;
use crate::error::{invalid, Error, Result};
use crate::levels::{transition_set, RateParams, TransitionSet, ZeemanConfig, TRANSITIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileShape {
    #[default]
    Gaussian,
    Lorentzian,
    Flat,
}

fn one() -> f64 {
    1.0
}
fn default_fwhm() -> f64 {
    1000.0
}
fn default_span() -> f64 {
    600.0
}
fn default_step() -> f64 {
    0.5
}

/// Shape and sampling of the inhomogeneous line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InhomogeneousProfile {
    #[serde(default)]
    pub center_mhz: f64,
    #[serde(default = "default_fwhm")]
    pub fwhm_mhz: f64,
    #[serde(default)]
    pub shape: ProfileShape,
    #[serde(default = "default_span")]
    pub grid_span_mhz: f64,
    #[serde(default = "default_step")]
    pub grid_step_mhz: f64,
    /// Unpumped optical depth at the line center.
    #[serde(default = "one")]
    pub peak_optical_depth: f64,
    /// FWHM of the per-transition absorption line (laser-limited).
    #[serde(default = "one")]
    pub homogeneous_width_mhz: f64,
}

impl Default for InhomogeneousProfile {
    fn default() -> Self {
        Self {
            center_mhz: 0.0,
            fwhm_mhz: default_fwhm(),
            shape: ProfileShape::default(),
            grid_span_mhz: default_span(),
            grid_step_mhz: default_step(),
            peak_optical_depth: 1.0,
            homogeneous_width_mhz: 1.0,
        }
    }
}

impl InhomogeneousProfile {
    pub fn flat(grid_span_mhz: f64, grid_step_mhz: f64) -> Self {
        Self {
            center_mhz: 0.0,
            fwhm_mhz: 1.0,
            shape: ProfileShape::Flat,
            grid_span_mhz,
            grid_step_mhz,
            peak_optical_depth: 1.0,
            homogeneous_width_mhz: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.issues().into_iter().next().map_or(Ok(()), Err)
    }

    pub(crate) fn issues(&self) -> Vec<Error> {
        let mut out = Vec::new();
        if !(self.grid_step_mhz.is_finite() && self.grid_step_mhz > 0.0) {
            out.push(invalid("profile.grid_step_mhz", "must be > 0"));
        } else if !(self.grid_span_mhz.is_finite() && self.grid_span_mhz >= 10.0 * self.grid_step_mhz) {
            out.push(invalid("profile.grid_span_mhz", "must be at least 10 grid steps"));
        }
        if self.shape != ProfileShape::Flat && !(self.fwhm_mhz.is_finite() && self.fwhm_mhz > 0.0) {
            out.push(invalid("profile.fwhm_mhz", "must be > 0"));
        }
        if !(self.peak_optical_depth.is_finite() && self.peak_optical_depth > 0.0) {
            out.push(invalid("profile.peak_optical_depth", "must be > 0"));
        }
        if !(self.homogeneous_width_mhz.is_finite() && self.homogeneous_width_mhz > 0.0) {
            out.push(invalid("profile.homogeneous_width_mhz", "must be > 0"));
        }
        out
    }

    /// Unit-peak profile value at `offset_mhz` from the line center.
    pub fn weight(&self, offset_mhz: f64) -> f64 {
        let x = offset_mhz / self.fwhm_mhz;
        match self.shape {
            ProfileShape::Flat => 1.0,
            ProfileShape::Gaussian => (-4.0 * std::f64::consts::LN_2 * x * x).exp(),
            ProfileShape::Lorentzian => 1.0 / (1.0 + 4.0 * x * x),
        }
    }

    /// Class centers, uniformly spaced and symmetric about the line center.
    pub fn grid(&self) -> Vec<f64> {
        let half = (0.5 * self.grid_span_mhz / self.grid_step_mhz).round() as i64;
        (-half..=half)
            .map(|i| self.center_mhz + i as f64 * self.grid_step_mhz)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IonClass {
    /// Frequency of the class's g1->e1 transition.
    pub center_mhz: f64,
    pub weight: f64,
    pub transitions: TransitionSet,
    pub state: IonClassState,
}

/// All classes of the simulated window plus the optical constants needed to
/// turn populations into optical depth.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleState {
    pub classes: Vec<IonClass>,
    pub config: ZeemanConfig,
    pub params: RateParams,
    pub sigma_scale: f64,
    pub homogeneous_width_mhz: f64,
    pub diagnostics: Vec<String>,
}

/// Lays out the class grid, weights it by the profile and puts every class
/// in thermal equilibrium. Unless `params.sigma_scale` is set, the cross
/// section is calibrated so the unpumped line center has the profile's
/// `peak_optical_depth`.
pub fn build_ensemble(
    profile: &InhomogeneousProfile,
    config: &ZeemanConfig,
    params: &RateParams,
) -> Result<EnsembleState> {
    profile.validate()?;
    config.validate()?;
    params.validate()?;

    let mut diagnostics = Vec::new();
    let de = config.delta_e();
    if de > 0.0 && profile.grid_step_mhz > de / 4.0 {
        let msg = format!(
            "grid step {} MHz is coarse relative to the excited splitting {de:.3} MHz",
            profile.grid_step_mhz
        );
        log::warn!("{msg}");
        diagnostics.push(msg);
    }

    let classes = profile
        .grid()
        .into_iter()
        .map(|c| IonClass {
            center_mhz: c,
            weight: profile.weight(c - profile.center_mhz),
            transitions: transition_set(c, config),
            state: IonClassState::thermal(),
        })
        .collect();

    let mut ensemble = EnsembleState {
        classes,
        config: *config,
        params: *params,
        sigma_scale: 1.0,
        homogeneous_width_mhz: profile.homogeneous_width_mhz,
        diagnostics,
    };
    ensemble.sigma_scale = match params.sigma_scale {
        Some(s) => s,
        None => {
            let raw = absorbance(&ensemble, profile.center_mhz);
            if raw <= 0.0 {
                return Err(invalid("profile", "grid carries no absorption at the line center"));
            }
            profile.peak_optical_depth / raw
        }
    };
    Ok(ensemble)
}

impl EnsembleState {
    /// Largest deviation of any class total from one.
    pub fn conservation_error(&self) -> f64 {
        self.classes
            .iter()
            .map(|c| (c.state.total() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn reset_to_thermal(&mut self) {
        for c in &mut self.classes {
            c.state = IonClassState::thermal();
        }
    }
}

#[inline]
fn lorentzian(detuning: f64, hw2: f64) -> f64 {
    hw2 / (detuning * detuning + hw2)
}

/// Optical depth `alpha L` at `probe_freq_mhz`.
pub fn absorbance(ensemble: &EnsembleState, probe_freq_mhz: f64) -> f64 {
    absorbance_of(ensemble, ensemble.classes.iter().map(|c| &c.state), probe_freq_mhz)
}

/// Optical depth for an arbitrary set of class states laid over the
/// ensemble's grid (used for snapshots taken during a run).
pub(crate) fn absorbance_of<'a>(
    ensemble: &EnsembleState,
    states: impl Iterator<Item = &'a IonClassState>,
    probe_freq_mhz: f64,
) -> f64 {
    let hw = 0.5 * ensemble.homogeneous_width_mhz;
    let hw2 = hw * hw;
    let strengths = ensemble.params.transition_strengths();
    let mut total = 0.0;
    for (class, state) in ensemble.classes.iter().zip(states) {
        let levels = state.levels();
        let f = class.transitions.as_array();
        let mut sum = 0.0;
        for (k, &(lo, up)) in TRANSITIONS.iter().enumerate() {
            sum += strengths[k] * (levels[lo] - levels[up]) * lorentzian(probe_freq_mhz - f[k], hw2);
        }
        total += class.weight * sum;
    }
    ensemble.sigma_scale * total
}

/// Frequency-indexed optical depth and transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs_mhz: Vec<f64>,
    pub optical_depth: Vec<f64>,
    pub transmission: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SpectrumRow {
    #[serde(rename = "freq_MHz")]
    freq_mhz: f64,
    optical_depth: f64,
    transmission: f64,
}

impl Spectrum {
    pub fn from_optical_depth(freqs_mhz: Vec<f64>, optical_depth: Vec<f64>) -> Self {
        let transmission = optical_depth.iter().map(|od| (-od).exp()).collect();
        Self {
            freqs_mhz,
            optical_depth,
            transmission,
        }
    }

    pub fn len(&self) -> usize {
        self.freqs_mhz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freqs_mhz.is_empty()
    }

    pub fn same_grid(&self, other: &Spectrum) -> bool {
        self.freqs_mhz.len() == other.freqs_mhz.len()
            && self
                .freqs_mhz
                .iter()
                .zip(&other.freqs_mhz)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
    }

    /// Trapezoidal integral of the optical depth over the whole grid.
    pub fn integrated_optical_depth(&self) -> f64 {
        trapezoid(&self.freqs_mhz, &self.optical_depth)
    }

    /// Optical depth interpolated linearly at `freq_mhz`.
    pub fn optical_depth_at(&self, freq_mhz: f64) -> f64 {
        let f = &self.freqs_mhz;
        match f.iter().position(|&x| x >= freq_mhz) {
            Some(0) => self.optical_depth[0],
            Some(i) => {
                let t = (freq_mhz - f[i - 1]) / (f[i] - f[i - 1]);
                self.optical_depth[i - 1] * (1.0 - t) + self.optical_depth[i] * t
            }
            None => *self.optical_depth.last().unwrap_or(&0.0),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for i in 0..self.len() {
            w.serialize(SpectrumRow {
                freq_mhz: self.freqs_mhz[i],
                optical_depth: self.optical_depth[i],
                transmission: self.transmission[i],
            })?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut s = Spectrum {
            freqs_mhz: Vec::new(),
            optical_depth: Vec::new(),
            transmission: Vec::new(),
        };
        for row in r.deserialize() {
            let row: SpectrumRow = row?;
            s.freqs_mhz.push(row.freq_mhz);
            s.optical_depth.push(row.optical_depth);
            s.transmission.push(row.transmission);
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub(crate) fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

pub(crate) fn scan_grid(f_start: f64, f_stop: f64, n_points: usize) -> Result<Vec<f64>> {
    if !(f_start.is_finite() && f_stop.is_finite() && f_start < f_stop) {
        return Err(invalid("readout", "f_start must be below f_stop"));
    }
    if n_points < 2 {
        return Err(invalid("readout.n_points", "need at least 2 points"));
    }
    let step = (f_stop - f_start) / (n_points - 1) as f64;
    Ok((0..n_points).map(|i| f_start + i as f64 * step).collect())
}

/// Snapshot of the transmission spectrum; the probe does not perturb the
/// populations.
pub fn readout_scan(ensemble: &EnsembleState, f_start: f64, f_stop: f64, n_points: usize) -> Result<Spectrum> {
    let freqs = scan_grid(f_start, f_stop, n_points)?;
    let od = freqs.par_iter().map(|&f| absorbance(ensemble, f)).collect();
    Ok(Spectrum::from_optical_depth(freqs, od))
}

/// Area of the hole in `window` (inclusive, MHz): the trapezoidal integral
/// of `baseline - spectrum` optical depth.
pub fn hole_area(spectrum: &Spectrum, baseline: &Spectrum, window: (f64, f64)) -> Result<f64> {
    if !spectrum.same_grid(baseline) {
        return Err(Error::GridMismatch);
    }
    let (lo, hi) = window;
    let (x, y): (Vec<f64>, Vec<f64>) = spectrum
        .freqs_mhz
        .iter()
        .zip(baseline.optical_depth.iter().zip(&spectrum.optical_depth))
        .filter(|(&f, _)| f >= lo && f <= hi)
        .map(|(&f, (b, s))| (f, b - s))
        .unzip();
    Ok(trapezoid(&x, &y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Hole,
    Antihole,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralFeature {
    pub freq_mhz: f64,
    pub kind: FeatureKind,
    /// Set when a hole and an antihole fall on the same frequency.
    pub overlapping: bool,
}

/// Primary holes and antiholes left by pumping transition 1 at `pump_freq_mhz`.
pub fn predicted_features(pump_freq_mhz: f64, config: &ZeemanConfig) -> Vec<SpectralFeature> {
    let (dg, de) = (config.delta_g(), config.delta_e());
    let raw = [
        (pump_freq_mhz, FeatureKind::Hole),
        (pump_freq_mhz + de, FeatureKind::Hole),
        (pump_freq_mhz - dg, FeatureKind::Antihole),
        (pump_freq_mhz - (dg - de), FeatureKind::Antihole),
    ];
    raw.iter()
        .map(|&(freq_mhz, kind)| SpectralFeature {
            freq_mhz,
            kind,
            overlapping: raw
                .iter()
                .any(|&(f, k)| k != kind && (f - freq_mhz).abs() <= 1e-9 * freq_mhz.abs().max(1.0)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::levels::BOHR_MHZ_PER_MT;

    fn zeeman() -> ZeemanConfig {
        ZeemanConfig::new(180.0 / (BOHR_MHZ_PER_MT * 12.0), 12.0, 8.0)
    }

    fn small_ensemble() -> EnsembleState {
        build_ensemble(
            &InhomogeneousProfile::flat(800.0, 1.0),
            &zeeman(),
            &RateParams::new(11.0, 100.0, 0.9),
        )
        .unwrap()
    }

    #[test]
    fn flat_profile_weights_are_equal() {
        let e = small_ensemble();
        assert_eq!(e.classes.len(), 801);
        assert!(e.classes.iter().all(|c| c.weight == 1.0));
        assert!(e.classes.iter().all(|c| c.state.is_thermal()));
    }

    #[test]
    fn gaussian_half_maximum() {
        let p = InhomogeneousProfile {
            shape: ProfileShape::Gaussian,
            fwhm_mhz: 300.0,
            ..InhomogeneousProfile::flat(100.0, 1.0)
        };
        assert!((p.weight(0.0) / p.weight(150.0) - 2.0).abs() < 1e-12);
        assert!((p.weight(0.0) / p.weight(-150.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn unpumped_line_center_hits_configured_depth() {
        let e = small_ensemble();
        assert!((absorbance(&e, 0.0) - 1.0).abs() < 1e-12);
        let s = readout_scan(&e, -1.0, 1.0, 3).unwrap();
        assert!((s.transmission[1] - (-1f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn coarse_grid_is_diagnosed() {
        let e = build_ensemble(
            &InhomogeneousProfile::flat(2000.0, 40.0),
            &zeeman(),
            &RateParams::new(11.0, 100.0, 0.9),
        )
        .unwrap();
        assert_eq!(e.diagnostics.len(), 1);
        assert!(small_ensemble().diagnostics.is_empty());
    }

    #[test]
    fn invalid_profile_is_rejected() {
        let p = InhomogeneousProfile::flat(5.0, 1.0);
        assert!(p.validate().is_err());
        let p = InhomogeneousProfile::flat(50.0, 0.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn inverted_class_gives_gain() {
        let mut e = small_ensemble();
        for c in &mut e.classes {
            c.state = IonClassState {
                g1: 0.0,
                g2: 0.0,
                e1: 0.5,
                e2: 0.5,
                persistent_bleached: 0.0,
            };
        }
        assert!(absorbance(&e, 0.0) < 0.0);
    }

    #[test]
    fn class_in_upper_ground_level() {
        // A single class, probed exactly on each of its transitions.
        let p = InhomogeneousProfile::flat(10.0, 1.0);
        let mut e = build_ensemble(&p, &zeeman(), &RateParams::new(11.0, 100.0, 0.9)).unwrap();
        let keep = e.classes.len() / 2;
        e.classes = vec![e.classes[keep]];
        let t = e.classes[0].transitions.as_array();
        let thermal: Vec<f64> = t.iter().map(|&f| absorbance(&e, f)).collect();
        e.classes[0].state = IonClassState {
            g1: 0.0,
            g2: 1.0,
            e1: 0.0,
            e2: 0.0,
            persistent_bleached: 0.0,
        };
        let pumped: Vec<f64> = t.iter().map(|&f| absorbance(&e, f)).collect();
        // other transitions of the same class are >= 60 MHz away, so the
        // Lorentzian cross-talk is below 1e-4
        assert!(pumped[0].abs() < 1e-3 * thermal[0]);
        assert!(pumped[1].abs() < 1e-3 * thermal[1]);
        assert!((pumped[2] / thermal[2] - 2.0).abs() < 1e-3);
        assert!((pumped[3] / thermal[3] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn hole_area_basics() {
        let freqs: Vec<f64> = (0..=200).map(|i| -10.0 + 0.1 * i as f64).collect();
        let base = Spectrum::from_optical_depth(freqs.clone(), vec![1.0; freqs.len()]);
        assert_eq!(hole_area(&base, &base, (-10.0, 10.0)).unwrap(), 0.0);
        let od = freqs
            .iter()
            .map(|&f| if f.abs() <= 5.0 + 1e-9 { 0.5 } else { 1.0 })
            .collect();
        let holed = Spectrum::from_optical_depth(freqs.clone(), od);
        let area = hole_area(&holed, &base, (-5.0 - 1e-9, 5.0 + 1e-9)).unwrap();
        assert!((area - 5.0).abs() < 1e-9, "{area}");
        let other = Spectrum::from_optical_depth(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert!(matches!(hole_area(&other, &base, (0.0, 1.0)), Err(Error::GridMismatch)));
    }

    #[test]
    fn predicted_feature_positions() {
        let f = predicted_features(0.0, &zeeman());
        let got: Vec<(f64, FeatureKind)> = f.iter().map(|x| (x.freq_mhz, x.kind)).collect();
        let want = [
            (0.0, FeatureKind::Hole),
            (120.0, FeatureKind::Hole),
            (-180.0, FeatureKind::Antihole),
            (-60.0, FeatureKind::Antihole),
        ];
        for ((a, ka), (b, kb)) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-9);
            assert_eq!(*ka, kb);
        }
        assert!(f.iter().all(|x| !x.overlapping));
    }

    #[test]
    fn equal_g_factors_overlap_hole_and_antihole() {
        let cfg = ZeemanConfig::new(1.0, 8.0, 8.0);
        let f = predicted_features(10.0, &cfg);
        assert!(f[0].overlapping && f[3].overlapping);
        assert!(!f[1].overlapping);
    }

    #[test]
    fn sixty_mhz_antiholes() {
        let b = 60.0 / (BOHR_MHZ_PER_MT * 4.0);
        let f = predicted_features(0.0, &ZeemanConfig::new(b, 12.0, 8.0));
        assert!((f[3].freq_mhz + 60.0).abs() < 1e-9);
    }

    #[test]
    fn csv_roundtrip() {
        let s = Spectrum::from_optical_depth(vec![-1.0, 0.0, 1.5], vec![0.9, 0.25, 1.0]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("freq_MHz,optical_depth,transmission\n"));
        assert_eq!(Spectrum::read_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn interpolation() {
        let s = Spectrum::from_optical_depth(vec![0.0, 1.0, 2.0], vec![1.0, 3.0, 5.0]);
        assert_eq!(s.optical_depth_at(0.5), 2.0);
        assert_eq!(s.optical_depth_at(-1.0), 1.0);
        assert_eq!(s.optical_depth_at(9.0), 5.0);
    }
}
