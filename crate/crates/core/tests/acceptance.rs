//! Acceptance suite. Every criterion runs against its tolerance and time
//! budget and prints one PASS or FAIL line; the process fails if any does.

use std::time::{Duration, Instant};

use nalgebra::Matrix4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use holeburn_core::analysis::{fit_double_exponential, fit_lorentzian, pit_profile, with_noise};
use holeburn_core::calibration::{calibrate, CalibrationTargets};
use holeburn_core::config::{SweepMetric, SweepParameter};
use holeburn_core::engine::{
    build_rate_matrix, ratio_effective, ratio_stimulated, steady_state, DriveRates, LaserLineshape,
};
use holeburn_core::ensemble::{build_ensemble, InhomogeneousProfile};
use holeburn_core::levels::{effective_lifetime, RateParams, ZeemanConfig};
use holeburn_core::presets::{self, preset};
use holeburn_core::scenario::{apply_sweep, evaluate_metric, execute, simulate};
use holeburn_core::sequence::{
    compile, run, DelayReference, DriveModel, Pulse, PumpPulse, ReadoutPulse, RfPulse, StimulationPulse, WaitPulse,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($arg)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn rel(a: f64, b: f64) -> f64 {
    (a / b - 1.0).abs()
}

fn closed_form_ratios() -> Outcome {
    let stim = ratio_stimulated(0.95, 7.0, 100.0);
    ensure!((stim - 71.0).abs() <= 1e-12, "ratio_stimulated = {stim}");
    let eff = ratio_effective(11.0, 130.0, 0.9);
    let want = 1.0 + 2.0 * 130.0 / 110.0;
    ensure!((eff - want).abs() <= 1e-12, "ratio_effective = {eff}, want {want}");
    let t_eff = effective_lifetime(&RateParams::new(11.0, 130.0, 0.9)).map_err(err)?;
    ensure!((t_eff - 110.0).abs() <= 1e-12, "effective lifetime = {t_eff}");
    Ok(format!("ratio 71 = {stim}, T_eff = {t_eff} ms"))
}

fn steady_state_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = RateParams::new(
            rng.random_range(1.0..50.0),
            rng.random_range(10.0..500.0),
            rng.random_range(0.0..0.99),
        );
        // saturating pump on g1-e1; e2 is never populated
        let ss = steady_state(&build_rate_matrix(&p, &DriveRates::pump(0, 1e7))).map_err(err)?;
        ensure!(ss.e2.abs() < 1e-6, "e2 populated: {ss:?}");
        let dev = rel(ss.g2 / ss.g1, ratio_effective(p.t1_ms, p.tz_ms, p.beta));
        ensure!(dev <= 5e-3, "{p:?}: relative deviation {dev:.3e}");
        worst = worst.max(dev);
    }
    Ok(format!("worst relative deviation {worst:.2e} over 100 draws"))
}

fn no_drive_eigenvalues() -> Outcome {
    let mut worst = 0.0f64;
    for (t1, tz, beta) in [
        (11.0, 100.0, 0.9),
        (11.0, 130.0, 0.95),
        (3.0, 40.0, 0.0),
        (25.0, 700.0, 0.5),
    ] {
        let p = RateParams::new(t1, tz, beta);
        let g: Matrix4<f64> = *build_rate_matrix(&p, &DriveRates::none()).generator();
        let eig = g.complex_eigenvalues();
        let mut got: Vec<f64> = eig.iter().map(|z| z.re).collect();
        let imag = eig.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        ensure!(imag <= 1e-9, "complex eigenvalues {eig:?}");
        got.sort_by(f64::total_cmp);
        let mut want = vec![0.0, -1.0 / t1, -1.0 / t1, -1.0 / tz];
        want.sort_by(f64::total_cmp);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        ensure!(worst <= 1e-9, "T1 {t1}, TZ {tz}: eigenvalues {got:?}, want {want:?}");
    }
    Ok(format!("largest eigenvalue error {worst:.1e}"))
}

fn hole_geometry() -> Outcome {
    let mut config = preset("fig3_standard_pumping").map_err(err)?;
    config.profile.grid_span_mhz = 499.75;
    config.profile.grid_step_mhz = 0.25;
    let classes = config.profile.grid().len();
    ensure!(classes >= 2000, "only {classes} classes");
    let step = 0.25;
    config.sweep = None;
    config.outputs = Default::default();
    config.sequence = vec![
        Pulse::Pump(PumpPulse {
            start_ms: None,
            duration_ms: presets::PUMP_MS,
            center_mhz: 0.0,
            sweep_span_mhz: 0.0,
            sweep_period_ms: 0.0,
            gate_gap_mhz: 0.0,
            power_rate: presets::PUMP_RATE,
        }),
        Pulse::Wait(WaitPulse {
            start_ms: None,
            duration_ms: 5.0,
        }),
        Pulse::Readout(ReadoutPulse {
            f_start_mhz: -400.0,
            f_stop_mhz: 400.0,
            n_points: 3201,
            at_delay_ms: 5.0,
            reference: DelayReference::PumpEnd,
            label: None,
        }),
    ];
    let (dg, de) = (config.zeeman.delta_g(), config.zeeman.delta_e());
    ensure!((dg - de - 60.0).abs() < 1e-9, "splitting difference {}", dg - de);
    let exec = execute(&config).map_err(err)?;
    let r = exec.readout(None).map_err(err)?;
    let f = &r.spectrum.freqs_mhz;
    let change: Vec<f64> = r
        .spectrum
        .optical_depth
        .iter()
        .zip(&r.baseline.optical_depth)
        .map(|(s, b)| s - b)
        .collect();
    // extremum of the pump-induced change within 15 MHz of `at`
    let extremum = |at: f64, maximum: bool| {
        (0..f.len())
            .filter(|&i| (f[i] - at).abs() <= 15.0)
            .max_by(|&a, &b| {
                let o = change[a].total_cmp(&change[b]);
                if maximum {
                    o
                } else {
                    o.reverse()
                }
            })
            .map(|i| (f[i], change[i]))
    };
    let mut found = Vec::new();
    for (label, at, maximum) in [
        ("hole", 0.0, false),
        ("side hole", de, false),
        ("antihole", -dg, true),
        ("antihole", -(dg - de), true),
        ("antihole", dg - de, true),
    ] {
        let (pos, value) = extremum(at, maximum).ok_or("empty search window")?;
        ensure!(
            (pos - at).abs() <= step + 1e-9,
            "{label} expected at {at:.3} MHz, found at {pos:.3} MHz"
        );
        ensure!(
            if maximum { value > 0.0 } else { value < 0.0 },
            "{label} at {pos:.3} MHz has the wrong sign ({value:.3e})"
        );
        found.push(format!("{pos:+.2}"));
    }
    Ok(format!("{classes} classes, features at {} MHz", found.join(", ")))
}

fn fit_recovery() -> Outcome {
    let t: Vec<f64> = (0..50).map(|i| 1.0 + 499.0 * i as f64 / 49.0).collect();
    let clean: Vec<f64> = t
        .iter()
        .map(|&x| (-x / 11.0).exp() + 0.3 * (-x / 100.0).exp())
        .collect();
    let mut slowest = Duration::ZERO;
    let mut timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = f();
        slowest = slowest.max(start.elapsed());
        out
    };
    let check = |y: &[f64], tol: f64| -> Outcome {
        let fit = fit_double_exponential(&t, y, None).map_err(err)?;
        let (t1, t2) = (fit.value("tau1"), fit.value("tau2"));
        ensure!(
            rel(t1, 11.0) <= tol && rel(t2, 100.0) <= tol,
            "tau = ({t1}, {t2}), tolerance {tol}"
        );
        Ok(format!("({t1:.3}, {t2:.2})"))
    };
    let noiseless = timed(&|| check(&clean, 1e-3))?;
    let noisy = timed(&|| check(&with_noise(&clean, 0.01, 11), 0.05))?;

    let freqs: Vec<f64> = (0..81).map(|i| -40_000.0 + 1000.0 * i as f64).collect();
    let hw2 = 7000.0f64.powi(2);
    let y: Vec<f64> = freqs
        .iter()
        .map(|&x| 1.0 - 0.6 * hw2 / ((x - 300.0).powi(2) + hw2))
        .collect();
    let lorentz = timed(&|| {
        let fit = fit_lorentzian(&freqs, &y).map_err(err)?;
        let w = fit.value("fwhm");
        ensure!(rel(w, 14_000.0) <= 1e-3, "FWHM {w}");
        Ok(format!("{w:.1}"))
    })?;
    ensure!(slowest < Duration::from_secs(1), "slowest fit took {slowest:?}");
    Ok(format!(
        "noiseless {noiseless} ms, 1% noise {noisy} ms, Lorentzian FWHM {lorentz} MHz, slowest {:.0} ms",
        slowest.as_secs_f64() * 1e3
    ))
}

fn stimulation_linearity() -> Outcome {
    let config = preset("fig5_stim_rate").map_err(err)?;
    let fraction = config.rates.persistent_fraction;
    ensure!(fraction == 0.1, "persistent_fraction = {fraction}");
    let sweep = simulate(&config).map_err(err)?.sweep.ok_or("no sweep")?;
    ensure!(sweep.fits.len() == 3, "{} fits", sweep.fits.len());
    let mut rates = Vec::new();
    for (power, fit) in &sweep.fits {
        let offset = fit.value("offset");
        ensure!((offset - fraction).abs() <= 0.02, "{power:?} mW: offset {offset}");
        rates.push(format!("{:.3}", fit.value("rate")));
    }
    let line = sweep.outer_fit.ok_or("no rate-versus-power fit")?;
    let r2 = line.value("r_squared");
    ensure!(r2 > 0.99, "r^2 = {r2}");
    Ok(format!("rates [{}] /ms, r^2 = {r2:.6}", rates.join(", ")))
}

fn monotone_improvement() -> Outcome {
    let stimulated = preset("stimulated_pumping").map_err(err)?;
    let rf = preset("rf_mixing").map_err(err)?;
    let standard = apply_sweep(&stimulated, SweepParameter::StimPower, 0.0).map_err(err)?;
    let remaining = |c| -> Result<f64, String> {
        let exec = execute(c).map_err(err)?;
        let r = exec.readout(Some("early")).map_err(err)?;
        evaluate_metric(SweepMetric::RemainingFraction, r, (-2.0, 2.0)).map_err(err)
    };
    let (a, b, c) = (remaining(&standard)?, remaining(&stimulated)?, remaining(&rf)?);
    ensure!(
        a > b && b > c,
        "remaining fractions {a:.4}, {b:.4}, {c:.4} are not decreasing"
    );

    let sweep = simulate(&preset("fig6_rf_power").map_err(err)?)
        .map_err(err)?
        .sweep
        .ok_or("no sweep")?;
    let curve: Vec<(f64, f64)> = sweep.rows.iter().map(|r| (r.value, r.metric)).collect();
    for w in curve.windows(2) {
        ensure!(
            w[1].1 <= w[0].1 + 1e-12,
            "curve rises between {} and {} V",
            w[0].0,
            w[1].0
        );
    }
    let at = |v: f64| {
        curve
            .iter()
            .find(|p| (p.0 - v).abs() < 1e-9)
            .map(|p| p.1)
            .ok_or(format!("no point at {v} V"))
    };
    let (v0, v5, v10) = (at(0.0)?, at(5.0)?, at(10.0)?);
    ensure!(v5 - v10 < v0 - v5, "no flattening: {v0}, {v5}, {v10}");
    Ok(format!(
        "standard {a:.4} > stimulated {b:.4} > RF {c:.4}; RF curve {v0:.4} -> {v5:.4} -> {v10:.4}"
    ))
}

fn calibration() -> Outcome {
    let stimulated = preset("stimulated_pumping").map_err(err)?;
    let rf = preset("rf_mixing").map_err(err)?;
    let targets = CalibrationTargets::default();
    let found = calibrate(&stimulated, &rf, &targets, 0.9).map_err(err)?;
    ensure!(
        (found.pump_rate - presets::PUMP_RATE).abs() <= 1e-3 && (found.beta_z2 - presets::BETA_Z2).abs() <= 1e-3,
        "found R = {}, beta_z2 = {}; presets hold {} and {}",
        found.pump_rate,
        found.beta_z2,
        presets::PUMP_RATE,
        presets::BETA_Z2
    );
    let metrics = |c| -> Result<(f64, f64), String> {
        let exec = execute(c).map_err(err)?;
        let r = exec.readout(Some("early")).map_err(err)?;
        Ok((
            evaluate_metric(SweepMetric::Rho1Res, r, targets.window_mhz).map_err(err)?,
            evaluate_metric(SweepMetric::RemainingFraction, r, targets.window_mhz).map_err(err)?,
        ))
    };
    let (stim_rho1, stim_remaining) = metrics(&stimulated)?;
    let (rf_rho1, rf_remaining) = metrics(&rf)?;
    let ratio = (2.0 - stim_rho1) / stim_rho1;
    ensure!((stim_rho1 - 0.25).abs() <= 0.02, "stimulated rho1 = {stim_rho1}");
    ensure!((ratio - 7.0).abs() <= 0.6, "population ratio {ratio}");
    ensure!((rf_remaining - 0.08).abs() <= 0.01, "RF remaining {rf_remaining}");
    ensure!((rf_rho1 - 0.16).abs() <= 0.02, "RF rho1 = {rf_rho1}");
    Ok(format!(
        "R = {:.4}, beta_z2 = {:.4} ({} runs); stimulated rho1 {stim_rho1:.4} ({:.1}% remaining, ratio {ratio:.2}), RF {:.2}% remaining",
        found.pump_rate,
        found.beta_z2,
        found.evaluations,
        100.0 * stim_remaining,
        100.0 * rf_remaining
    ))
}

fn spectral_tailoring() -> Outcome {
    let config = preset("fig7_tailoring").map_err(err)?;
    let exec = execute(&config).map_err(err)?;
    ensure!(exec.sweep_count == 2000, "{} sweeps executed", exec.sweep_count);
    let r = exec.readout(None).map_err(err)?;
    let p = pit_profile(&r.spectrum, &r.baseline, 0.0, 0.5, 5.0).map_err(err)?;
    ensure!(p.pit_width_mhz >= 40.0, "pit width {} MHz", p.pit_width_mhz);
    ensure!(
        (p.peak_fwhm_mhz - 2.0).abs() <= 1.0,
        "peak FWHM {} MHz",
        p.peak_fwhm_mhz
    );
    ensure!(p.contrast >= 3.0, "contrast {}", p.contrast);
    Ok(format!(
        "{} sweeps, pit {:.1} MHz, peak FWHM {:.2} MHz, contrast {:.2}",
        exec.sweep_count, p.pit_width_mhz, p.peak_fwhm_mhz, p.contrast
    ))
}

fn random_sequence(rng: &mut ChaCha8Rng, settle_ms: f64) -> Vec<Pulse> {
    let mut pulses = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let swept = rng.random_bool(0.5);
        pulses.push(Pulse::Pump(PumpPulse {
            start_ms: None,
            duration_ms: rng.random_range(1.0..60.0),
            center_mhz: rng.random_range(-30.0..30.0),
            sweep_span_mhz: if swept { rng.random_range(1.0..40.0) } else { 0.0 },
            sweep_period_ms: if swept { rng.random_range(0.5..5.0) } else { 0.0 },
            gate_gap_mhz: if swept && rng.random_bool(0.5) {
                rng.random_range(0.0..1.0)
            } else {
                0.0
            },
            power_rate: rng.random_range(0.1..50.0),
        }));
        if rng.random_bool(0.5) {
            pulses.push(Pulse::Stimulation(StimulationPulse {
                start_ms: None,
                duration_ms: rng.random_range(0.1..10.0),
                power_mw: rng.random_range(0.0..30.0),
                detuning_mhz: rng.random_range(-5000.0..5000.0),
            }));
        }
        if rng.random_bool(0.5) {
            pulses.push(Pulse::Rf(RfPulse {
                start_ms: None,
                duration_ms: rng.random_range(0.1..10.0),
                center_mhz: rng.random_range(50.0..150.0),
                bandwidth_mhz: rng.random_range(1.0..40.0),
                sweep_period_ms: 0.0,
                voltage_vpp: rng.random_range(0.0..10.0),
            }));
        }
        pulses.push(Pulse::Wait(WaitPulse {
            start_ms: None,
            duration_ms: rng.random_range(0.0..20.0),
        }));
    }
    pulses.push(Pulse::Wait(WaitPulse {
        start_ms: None,
        duration_ms: settle_ms,
    }));
    pulses.push(Pulse::Readout(ReadoutPulse {
        f_start_mhz: -700.0,
        f_stop_mhz: 700.0,
        n_points: 5601,
        at_delay_ms: settle_ms,
        reference: DelayReference::DriveEnd,
        label: None,
    }));
    pulses
}

fn conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (mut worst_total, mut worst_sum) = (0.0f64, 0.0f64);
    let mut smallest_hole = f64::INFINITY;
    for k in 0..50 {
        let zeeman = ZeemanConfig::new(rng.random_range(0.2..1.5), 12.0, 8.0);
        let mut rates = RateParams::new(
            rng.random_range(2.0..10.0),
            rng.random_range(200.0..2000.0),
            rng.random_range(0.0..0.99),
        );
        rates.beta_z2 = Some(rng.random_range(0.0..1.0));
        rates.cross_strength = Some(rng.random_range(0.0..1.5));
        rates.persistent_fraction = 0.0;
        let profile = InhomogeneousProfile::flat(100.0, 0.5);
        let drive = DriveModel {
            laser_lineshape: if rng.random_bool(0.5) {
                LaserLineshape::Gaussian
            } else {
                LaserLineshape::Lorentzian
            },
            ..DriveModel::default()
        };
        // the excited state empties while the ground holes persist
        let pulses = random_sequence(&mut rng, 25.0 * rates.t1_ms);
        let compiled = compile(&pulses, &drive, None).map_err(err)?;
        let mut ensemble = build_ensemble(&profile, &zeeman, &rates).map_err(err)?;
        let out = run(&mut ensemble, &compiled).map_err(err)?;
        let total = ensemble.conservation_error();
        ensure!(total <= 1e-9, "sequence {k}: population drift {total:.2e}");
        let r = &out.readouts[0];
        let before = r.baseline.integrated_optical_depth();
        let after = r.spectrum.integrated_optical_depth();
        let hole = r
            .spectrum
            .optical_depth
            .iter()
            .zip(&r.baseline.optical_depth)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(hole > 1e-3, "sequence {k} left the spectrum unchanged");
        smallest_hole = smallest_hole.min(hole);
        let imbalance = rel(after, before);
        ensure!(
            imbalance <= 0.01,
            "sequence {k}: integrated optical depth {before} -> {after}"
        );
        worst_total = worst_total.max(total);
        worst_sum = worst_sum.max(imbalance);
    }
    Ok(format!(
        "50 sequences, population drift {worst_total:.1e}, sum-rule imbalance {worst_sum:.1e}, \
         smallest peak change {smallest_hole:.3}"
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("closed-form ratios", 1, closed_form_ratios),
        ("steady-state oracle", 1, steady_state_oracle),
        ("no-drive eigenvalues", 1, no_drive_eigenvalues),
        ("hole and antihole geometry", 5, hole_geometry),
        ("fit recovery", 3, fit_recovery),
        ("stimulation linearity", 10, stimulation_linearity),
        ("monotone improvement", 30, monotone_improvement),
        ("calibration", 120, calibration),
        ("spectral tailoring", 120, spectral_tailoring),
        ("conservation", 60, conservation),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, budget_s, check)) in criteria.into_iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed().as_secs_f64();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget_s as f64 => Err(format!("{detail}; over the {budget_s} s budget")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({elapsed:.2} s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name} ({elapsed:.2} s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
