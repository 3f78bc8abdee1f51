//! Curve fits for decay traces and spectral lines, and population metrics
//! derived from spectra.

pub mod lm;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ensemble::Spectrum;
use crate::error::{Error, Result};
use lm::{levenberg_marquardt, LmOptions, LmOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParameter {
    pub name: String,
    pub unit: String,
    pub value: f64,
    /// `None` when the covariance is singular.
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub parameters: Vec<FitParameter>,
    pub residual_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Some parameter is not identifiable from the data.
    pub degenerate: bool,
}

impl FitResult {
    pub fn parameter(&self, name: &str) -> Option<&FitParameter> {
        self.parameters.iter().find(|p| p.name == name)
    }

    /// Value of `name`; panics if the model has no such parameter.
    pub fn value(&self, name: &str) -> f64 {
        self.parameter(name)
            .unwrap_or_else(|| panic!("{} fit has no parameter {name}", self.model))
            .value
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })
    }
}

fn insufficient(model: &'static str, message: impl Into<String>) -> Error {
    Error::InsufficientData {
        model,
        message: message.into(),
    }
}

fn check_points(model: &'static str, t: &[f64], y: &[f64], min: usize) -> Result<()> {
    if t.len() != y.len() {
        return Err(insufficient(model, "x and y lengths differ"));
    }
    if t.len() < min {
        return Err(insufficient(
            model,
            format!("need at least {min} points, got {}", t.len()),
        ));
    }
    if t.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(insufficient(model, "data contain non-finite values"));
    }
    Ok(())
}

/// Standard errors in the fitted parametrization, from `s^2 (J^T J)^-1`.
fn standard_errors(out: &LmOutcome) -> Option<DVector<f64>> {
    let n = out.residuals.len();
    let p = out.params.len();
    if n <= p {
        return None;
    }
    let s2 = out.residuals.norm_squared() / (n - p) as f64;
    let jtj = out.jacobian.transpose() * &out.jacobian;
    let inv = jtj.try_inverse()?;
    let se = inv.diagonal().map(|v| (v.max(0.0) * s2).sqrt());
    se.iter().all(|v| v.is_finite()).then_some(se)
}

fn param(name: &str, unit: &str, value: f64, std_error: Option<f64>) -> FitParameter {
    FitParameter {
        name: name.into(),
        unit: unit.into(),
        value,
        std_error,
    }
}

fn data_scale(y: &[f64]) -> f64 {
    y.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Least-squares amplitudes for `y = sum_k c_k basis_k(t)`.
fn linear_amplitudes(basis: &DMatrix<f64>, y: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    if !basis.iter().all(|v| v.is_finite()) {
        return None;
    }
    let qr = basis.clone().qr();
    let r = qr.r();
    let d = r.diagonal().abs();
    if d.min() <= 1e-12 * d.max() {
        return None;
    }
    let coef = r.solve_upper_triangular(&(qr.q().transpose() * y))?;
    let cost = (basis * &coef - y).norm_squared();
    Some((coef, cost))
}

fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(move |i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
}

fn exp_basis(t: &[f64], tau1: f64, tau2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t.len(), 3, |r, c| match c {
        0 => (-(t[r] - t[0]) / tau1).exp(),
        1 => (-(t[r] - t[0]) / tau2).exp(),
        _ => 1.0,
    })
}

/// Minimizes over `(ln tau1, ln tau2)` alone, with amplitudes and offset
/// solved linearly at every step. Returns full parameters
/// `[A1, ln tau1, A2, ln tau2, offset]` with amplitudes referred to t = 0.
fn projected_double_exponential(t: &[f64], y: &DVector<f64>, start: [f64; 2], bounds: (f64, f64)) -> Option<[f64; 5]> {
    let n = t.len();
    let residual = |p: &DVector<f64>| -> DVector<f64> {
        match linear_amplitudes(&exp_basis(t, p[0].exp(), p[1].exp()), y) {
            Some((coef, _)) => exp_basis(t, p[0].exp(), p[1].exp()) * coef - y,
            None => DVector::from_element(n, f64::INFINITY),
        }
    };
    let model = |p: &DVector<f64>| {
        let r = residual(p);
        let mut j = DMatrix::zeros(n, 2);
        for k in 0..2 {
            let h = 1e-6;
            let (mut lo, mut hi) = (p.clone(), p.clone());
            lo[k] -= h;
            hi[k] += h;
            j.set_column(k, &((residual(&hi) - residual(&lo)) / (2.0 * h)));
        }
        (r, j)
    };
    // only the basin matters here; the full fit polishes
    let opts = LmOptions {
        gradient_tolerance: 1e-6,
        max_iterations: 40,
    };
    let out = levenberg_marquardt(DVector::from_row_slice(&start), data_scale(y.as_slice()), &opts, model);
    let (l1, l2) = (out.params[0], out.params[1]);
    let inside = |l: f64| l.is_finite() && l.exp() >= bounds.0 && l.exp() <= bounds.1;
    if !(inside(l1) && inside(l2)) {
        return None;
    }
    let (coef, _) = linear_amplitudes(&exp_basis(t, l1.exp(), l2.exp()), y)?;
    Some([
        coef[0] * (t[0] / l1.exp()).exp(),
        l1,
        coef[1] * (t[0] / l2.exp()).exp(),
        l2,
        coef[2],
    ])
}

/// Fits `y = A1 exp(-t/tau1) + A2 exp(-t/tau2) + offset` with
/// `tau1 <= tau2`. Without `initial`, the starting point is the best pair
/// of time constants on a logarithmic grid, with amplitudes and offset
/// solved linearly for each pair.
pub fn fit_double_exponential(t: &[f64], y: &[f64], initial: Option<[f64; 5]>) -> Result<FitResult> {
    const MODEL: &str = "doubleexp";
    check_points(MODEL, t, y, 6)?;
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(insufficient(MODEL, "t must be strictly increasing"));
    }
    let yv = DVector::from_column_slice(y);
    let n = t.len();

    let starts: Vec<[f64; 5]> = match initial {
        Some([a1, tau1, a2, tau2, c]) => {
            if !(tau1 > 0.0 && tau2 > 0.0) {
                return Err(insufficient(MODEL, "initial time constants must be > 0"));
            }
            vec![[a1, tau1.ln(), a2, tau2.ln(), c]]
        }
        None => {
            let min_dt = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
            let (lo, hi) = (0.5 * min_dt, 3.0 * (t[n - 1] - t[0]));
            let mut best: Option<(f64, [f64; 5])> = None;
            let taus: Vec<f64> = log_grid(lo, hi, 40).collect();
            for (i, &tau1) in taus.iter().enumerate() {
                for &tau2 in &taus[i + 1..] {
                    let Some((coef, cost)) = linear_amplitudes(&exp_basis(t, tau1, tau2), &yv) else {
                        continue;
                    };
                    if best.is_none_or(|b| cost < b.0) {
                        // amplitudes are referred to t[0]; shift them to t = 0
                        let a1 = coef[0] * (t[0] / tau1).exp();
                        let a2 = coef[1] * (t[0] / tau2).exp();
                        best = Some((cost, [a1, tau1.ln(), a2, tau2.ln(), coef[2]]));
                    }
                }
            }
            let mut starts: Vec<[f64; 5]> = best.iter().map(|b| b.1).collect();
            // a small, well separated component can lose to nearly equal
            // constants on any fixed grid; refine separated pairs locally
            let coarse: Vec<f64> = log_grid(lo, hi, 12).collect();
            let projected = coarse
                .iter()
                .enumerate()
                .flat_map(|(i, &a)| coarse[i + 1..].iter().map(move |&b| (a, b)))
                .filter(|(a, b)| *b >= 2.0 * *a)
                .filter_map(|(a, b)| projected_double_exponential(t, &yv, [a.ln(), b.ln()], (0.01 * lo, 100.0 * hi)))
                .map(|p| {
                    let fit = DVector::from_fn(n, |k, _| {
                        p[0] * (-t[k] / p[1].exp()).exp() + p[2] * (-t[k] / p[3].exp()).exp() + p[4]
                    });
                    ((fit - &yv).norm_squared(), p)
                })
                .filter(|(cost, _)| cost.is_finite())
                .min_by(|a, b| a.0.total_cmp(&b.0));
            starts.extend(projected.map(|p| p.1));
            if starts.is_empty() {
                return Err(insufficient(MODEL, "no usable starting point"));
            }
            starts
        }
    };

    let model = |p: &DVector<f64>| {
        let (tau1, tau2) = (p[1].exp(), p[3].exp());
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, 5);
        for k in 0..n {
            let e1 = (-t[k] / tau1).exp();
            let e2 = (-t[k] / tau2).exp();
            r[k] = p[0] * e1 + p[2] * e2 + p[4] - y[k];
            j[(k, 0)] = e1;
            j[(k, 1)] = p[0] * e1 * t[k] / tau1;
            j[(k, 2)] = e2;
            j[(k, 3)] = p[2] * e2 * t[k] / tau2;
            j[(k, 4)] = 1.0;
        }
        (r, j)
    };
    let runs: Vec<_> = starts
        .iter()
        .map(|s| levenberg_marquardt(DVector::from_row_slice(s), data_scale(y), &LmOptions::default(), model))
        .filter(|o| o.residual_norm().is_finite())
        .collect();
    let best = runs.iter().map(|o| o.residual_norm()).fold(f64::INFINITY, f64::min);
    // runs tied at the same minimum prefer one that passed the convergence test
    let tie = best * (1.0 + 1e-9) + f64::MIN_POSITIVE;
    let out = runs
        .into_iter()
        .filter(|o| o.residual_norm() <= tie)
        .max_by_key(|o| o.converged)
        .ok_or_else(|| insufficient(MODEL, "no start led to a finite fit"))?;
    let se = standard_errors(&out);
    let p = &out.params;
    let sei = |i: usize| se.as_ref().map(|s| s[i]);

    let mut fast = (p[0], p[1].exp(), sei(0), sei(1).map(|s| s * p[1].exp()));
    let mut slow = (p[2], p[3].exp(), sei(2), sei(3).map(|s| s * p[3].exp()));
    if fast.1 > slow.1 {
        std::mem::swap(&mut fast, &mut slow);
    }
    let amp_max = fast.0.abs().max(slow.0.abs());
    let degenerate =
        se.is_none() || (slow.1 / fast.1).ln() < 0.05 || fast.0.abs() < 1e-4 * amp_max || slow.0.abs() < 1e-4 * amp_max;

    Ok(FitResult {
        model: MODEL.into(),
        parameters: vec![
            param("A1", "", fast.0, fast.2),
            param("tau1", "ms", fast.1, fast.3),
            param("A2", "", slow.0, slow.2),
            param("tau2", "ms", slow.1, slow.3),
            param("offset", "", p[4], sei(4)),
        ],
        residual_norm: out.residual_norm(),
        converged: out.converged,
        iterations: out.iterations,
        degenerate,
    })
}

/// Fits `y = amplitude (w/2)^2 / ((f - center)^2 + (w/2)^2) + offset` with
/// `w` the FWHM. `amplitude` is negative for a dip.
pub fn fit_lorentzian(f: &[f64], y: &[f64]) -> Result<FitResult> {
    const MODEL: &str = "lorentzian";
    check_points(MODEL, f, y, 5)?;
    let n = f.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
    let fs: Vec<f64> = order.iter().map(|&i| f[i]).collect();
    let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
    let span = fs[n - 1] - fs[0];
    if span <= 0.0 {
        return Err(insufficient(MODEL, "frequencies must span a non-zero range"));
    }

    let offset0 = 0.5 * (ys[0] + ys[n - 1]);
    let (peak, _) = ys
        .iter()
        .enumerate()
        .map(|(i, v)| (i, (v - offset0).abs()))
        .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a });
    let amp0 = ys[peak] - offset0;
    let half = offset0 + 0.5 * amp0;
    let above = |v: f64| (v - half) * amp0.signum() > 0.0;
    let left = (0..=peak).rev().find(|&i| !above(ys[i])).map_or(fs[0], |i| fs[i]);
    let right = (peak..n).find(|&i| !above(ys[i])).map_or(fs[n - 1], |i| fs[i]);
    let width0 = (right - left).clamp(span / (2.0 * n as f64), span);

    let model = |p: &DVector<f64>| {
        let hw = 0.5 * p[1].exp();
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, 4);
        for k in 0..n {
            let d = fs[k] - p[0];
            let den = d * d + hw * hw;
            let shape = hw * hw / den;
            r[k] = p[2] * shape + p[3] - ys[k];
            j[(k, 0)] = p[2] * 2.0 * d * hw * hw / (den * den);
            // d shape / d ln(w) = 2 hw^2 d^2 / den^2
            j[(k, 1)] = p[2] * 2.0 * hw * hw * d * d / (den * den);
            j[(k, 2)] = shape;
            j[(k, 3)] = 1.0;
        }
        (r, j)
    };
    let start = DVector::from_vec(vec![fs[peak], width0.ln(), amp0, offset0]);
    let out = levenberg_marquardt(start, data_scale(&ys), &LmOptions::default(), model);
    let se = standard_errors(&out);
    let p = &out.params;
    let sei = |i: usize| se.as_ref().map(|s| s[i]);
    let fwhm = p[1].exp();
    Ok(FitResult {
        model: MODEL.into(),
        parameters: vec![
            param("center", "MHz", p[0], sei(0)),
            param("fwhm", "MHz", fwhm, sei(1).map(|s| s * fwhm)),
            param("amplitude", "", p[2], sei(2)),
            param("offset", "", p[3], sei(3)),
        ],
        residual_norm: out.residual_norm(),
        converged: out.converged,
        iterations: out.iterations,
        degenerate: se.is_none() || p[2].abs() < 1e-9 * data_scale(&ys),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residual_norm: f64,
}

impl LinearFit {
    pub fn into_result(self, n: usize) -> FitResult {
        FitResult {
            model: "linear".into(),
            parameters: vec![
                param("slope", "", self.slope, None),
                param("intercept", "", self.intercept, None),
                param("r_squared", "", self.r_squared, None),
            ],
            residual_norm: self.residual_norm,
            converged: true,
            iterations: 0,
            degenerate: n < 3,
        }
    }
}

/// Ordinary least-squares line.
pub fn fit_linear(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    const MODEL: &str = "linear";
    check_points(MODEL, x, y, 2)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(insufficient(MODEL, "need at least 2 distinct x values"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LinearFit {
        slope,
        intercept,
        r_squared,
        residual_norm: ss_res.sqrt(),
    })
}

/// Fits `y = amplitude exp(-rate x) + offset`.
pub fn fit_exponential_offset(x: &[f64], y: &[f64]) -> Result<FitResult> {
    const MODEL: &str = "expoffset";
    check_points(MODEL, x, y, 4)?;
    let n = x.len();
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return Err(insufficient(MODEL, "x must span a non-zero range"));
    }
    let yv = DVector::from_column_slice(y);

    let mut best: Option<(f64, [f64; 3])> = None;
    for rate in log_grid(0.01 / range, 100.0 / range, 60) {
        let basis = DMatrix::from_fn(n, 2, |r, c| if c == 0 { (-rate * (x[r] - lo)).exp() } else { 1.0 });
        if let Some((coef, cost)) = linear_amplitudes(&basis, &yv) {
            if best.is_none_or(|b| cost < b.0) {
                best = Some((cost, [coef[0] * (rate * lo).exp(), rate, coef[1]]));
            }
        }
    }
    let start = best.ok_or_else(|| insufficient(MODEL, "no usable starting point"))?.1;

    let model = |p: &DVector<f64>| {
        let mut r = DVector::zeros(n);
        let mut j = DMatrix::zeros(n, 3);
        for k in 0..n {
            let e = (-p[1] * x[k]).exp();
            r[k] = p[0] * e + p[2] - y[k];
            j[(k, 0)] = e;
            j[(k, 1)] = -p[0] * x[k] * e;
            j[(k, 2)] = 1.0;
        }
        (r, j)
    };
    let out = levenberg_marquardt(
        DVector::from_row_slice(&start),
        data_scale(y),
        &LmOptions::default(),
        model,
    );
    let se = standard_errors(&out);
    let p = &out.params;
    let sei = |i: usize| se.as_ref().map(|s| s[i]);
    let scale = data_scale(y);
    let degenerate = se.is_none() || (p[1] * range).abs() < 1e-3 || p[0].abs() < 1e-6 * scale;
    Ok(FitResult {
        model: MODEL.into(),
        parameters: vec![
            param("amplitude", "", p[0], sei(0)),
            param("rate", "1/ms", p[1], sei(1)),
            param("offset", "", p[2], sei(2)),
        ],
        residual_norm: out.residual_norm(),
        converged: out.converged,
        iterations: out.iterations,
        degenerate,
    })
}

/// Population estimates from the optical depth left in a pumped window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualMetrics {
    /// Pumped over unpumped mean optical depth.
    pub rho1_res: f64,
    pub remaining_total_fraction: f64,
    pub spin_polarization: f64,
    /// Other-level over initial-level population, assuming every depleted
    /// ion sits in the other Zeeman level.
    pub population_ratio: f64,
}

impl ResidualMetrics {
    pub fn from_rho1(rho1_res: f64) -> Self {
        let remaining = 0.5 * rho1_res;
        Self {
            rho1_res,
            remaining_total_fraction: remaining,
            spin_polarization: 1.0 - remaining,
            population_ratio: (2.0 - rho1_res) / rho1_res,
        }
    }
}

/// Residual-population metrics over `window` (inclusive, MHz).
pub fn residual_metrics(baseline: &Spectrum, pumped: &Spectrum, window: (f64, f64)) -> Result<ResidualMetrics> {
    if !baseline.same_grid(pumped) {
        return Err(Error::GridMismatch);
    }
    let (mut sum_b, mut sum_p, mut count) = (0.0, 0.0, 0usize);
    for (i, &f) in baseline.freqs_mhz.iter().enumerate() {
        if f >= window.0 && f <= window.1 {
            sum_b += baseline.optical_depth[i];
            sum_p += pumped.optical_depth[i];
            count += 1;
        }
    }
    if count == 0 {
        return Err(insufficient("residual", "no spectrum points inside the window"));
    }
    if sum_b / (count as f64) <= 1e-12 {
        return Err(Error::TransparentBaseline);
    }
    Ok(ResidualMetrics::from_rho1(sum_p / sum_b))
}

/// `n` reproducible samples of zero-mean Gaussian noise.
pub fn gaussian_noise(n: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match Normal::new(0.0, sigma.abs()) {
        Ok(dist) => (0..n).map(|_| dist.sample(&mut rng)).collect(),
        Err(_) => vec![0.0; n],
    }
}

/// `values` plus Gaussian noise whose standard deviation is `relative`
/// times each value.
pub fn with_noise(values: &[f64], relative: f64, seed: u64) -> Vec<f64> {
    values
        .iter()
        .zip(gaussian_noise(values.len(), relative, seed))
        .map(|(v, e)| v * (1.0 + e))
        .collect()
}

/// Transparency pit around a preserved absorption line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitProfile {
    pub pit_low_mhz: f64,
    pub pit_high_mhz: f64,
    pub pit_width_mhz: f64,
    pub peak_freq_mhz: f64,
    pub peak_optical_depth: f64,
    pub peak_fwhm_mhz: f64,
    /// Median optical depth of the pit away from the line.
    pub floor_optical_depth: f64,
    /// `(peak - floor) / floor`.
    pub contrast: f64,
}

/// Measures the pit around `center_mhz`: the connected range in which the
/// optical depth stays below `threshold` times the baseline, bridged across
/// the central line, and the line's height and width above the pit floor.
/// Points within `exclusion_mhz` of the line are left out of the floor.
pub fn pit_profile(
    spectrum: &Spectrum,
    baseline: &Spectrum,
    center_mhz: f64,
    threshold: f64,
    exclusion_mhz: f64,
) -> Result<PitProfile> {
    const MODEL: &str = "pit";
    if !spectrum.same_grid(baseline) {
        return Err(Error::GridMismatch);
    }
    let f = &spectrum.freqs_mhz;
    let od = &spectrum.optical_depth;
    let n = f.len();
    if n < 5 {
        return Err(insufficient(MODEL, "need at least 5 spectrum points"));
    }
    if baseline.optical_depth.iter().any(|b| *b <= 1e-12) {
        return Err(Error::TransparentBaseline);
    }
    let below = |i: usize| od[i] < threshold * baseline.optical_depth[i];
    let ic = (0..n)
        .min_by(|&a, &b| (f[a] - center_mhz).abs().total_cmp(&(f[b] - center_mhz).abs()))
        .unwrap_or(0);

    let (mut lo, mut hi) = (ic, ic);
    while lo > 0 && !below(lo) {
        lo -= 1;
    }
    while lo > 0 && below(lo - 1) {
        lo -= 1;
    }
    while hi + 1 < n && !below(hi) {
        hi += 1;
    }
    while hi + 1 < n && below(hi + 1) {
        hi += 1;
    }
    if !below(lo) || !below(hi) {
        return Err(insufficient(MODEL, "no pit around the center"));
    }

    let near = |i: usize| (f[i] - center_mhz).abs() <= exclusion_mhz;
    let ip = (lo..=hi)
        .filter(|&i| near(i))
        .max_by(|&a, &b| od[a].total_cmp(&od[b]))
        .unwrap_or(ic);
    let mut floor: Vec<f64> = (lo..=hi)
        .filter(|&i| (f[i] - f[ip]).abs() > exclusion_mhz)
        .map(|i| od[i])
        .collect();
    if floor.is_empty() {
        return Err(insufficient(MODEL, "the pit is no wider than the exclusion zone"));
    }
    floor.sort_by(f64::total_cmp);
    let floor = floor[floor.len() / 2];
    let peak = od[ip];
    let half = floor + 0.5 * (peak - floor);
    let crossing = |step: isize| {
        let mut i = ip as isize;
        while i + step >= lo as isize && i + step <= hi as isize {
            let j = (i + step) as usize;
            if od[j] < half {
                let a = i as usize;
                return Some(f[a] + (half - od[a]) * (f[j] - f[a]) / (od[j] - od[a]));
            }
            i += step;
        }
        None
    };
    let fwhm = match (crossing(-1), crossing(1)) {
        (Some(a), Some(b)) => b - a,
        _ => f64::NAN,
    };
    Ok(PitProfile {
        pit_low_mhz: f[lo],
        pit_high_mhz: f[hi],
        pit_width_mhz: f[hi] - f[lo],
        peak_freq_mhz: f[ip],
        peak_optical_depth: peak,
        peak_fwhm_mhz: fwhm,
        floor_optical_depth: floor,
        contrast: (peak - floor) / floor,
    })
}
