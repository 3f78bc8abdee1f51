//! Executes an [`ExperimentConfig`]: builds the ensemble, runs the sequence,
//! evaluates traces, metrics and parameter sweeps, and writes artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    fit_double_exponential, fit_exponential_offset, fit_linear, fit_lorentzian, residual_metrics, with_noise,
    FitResult, ResidualMetrics,
};
use crate::config::{
    spectrum_file, ExperimentConfig, SweepConfig, SweepFitModel, SweepMetric, SweepParameter, TraceFitModel,
};
use crate::ensemble::{build_ensemble, hole_area};
use crate::error::{invalid, Error, Result};
use crate::sequence::{compile, placements, run, Pulse, ReadoutResult, RunOutput, Trace};

/// Readouts of one pass through the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub output: RunOutput,
    pub sweep_count: usize,
    pub diagnostics: Vec<String>,
}

impl Execution {
    /// Readout labelled `label`, or the last readout.
    pub fn readout(&self, label: Option<&str>) -> Result<&ReadoutResult> {
        let found = match label {
            Some(l) => self
                .output
                .readouts
                .iter()
                .find(|r| r.readout.label.as_deref() == Some(l)),
            None => self.output.readouts.last(),
        };
        found.ok_or_else(|| invalid("readout", format!("no readout `{}`", label.unwrap_or("<last>"))))
    }
}

/// Runs the sequence once on a thermal ensemble.
pub fn execute(config: &ExperimentConfig) -> Result<Execution> {
    config.validate()?;
    let compiled = compile(&config.sequence, &config.drive, config.dt_max_ms)?;
    let mut ensemble = build_ensemble(&config.profile, &config.zeeman, &config.rates)?;
    let output = run(&mut ensemble, &compiled)?;
    Ok(Execution {
        output,
        sweep_count: compiled.sweep_count,
        diagnostics: ensemble.diagnostics,
    })
}

/// Copy of `config` with `parameter` set to `value` on every pulse it acts
/// on. The stimulation overhang stretches each stimulation pulse to end
/// `value` ms after the last pump.
pub fn apply_sweep(config: &ExperimentConfig, parameter: SweepParameter, value: f64) -> Result<ExperimentConfig> {
    let mut out = config.clone();
    let spans = placements(&config.sequence);
    let pump_end = config
        .sequence
        .iter()
        .zip(&spans)
        .filter(|(p, _)| matches!(p, Pulse::Pump(_)))
        .filter_map(|(_, s)| s.map(|s| s.1))
        .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
    let mut touched = false;
    for (pulse, span) in out.sequence.iter_mut().zip(&spans) {
        match (parameter, pulse) {
            (SweepParameter::RfVoltage, Pulse::Rf(rf)) => rf.voltage_vpp = value,
            (SweepParameter::PumpRate, Pulse::Pump(p)) => p.power_rate = value,
            (SweepParameter::StimPower, Pulse::Stimulation(s)) => s.power_mw = value,
            (SweepParameter::StimDetuning, Pulse::Stimulation(s)) => s.detuning_mhz = value,
            (SweepParameter::StimOverhang, Pulse::Stimulation(s)) => {
                let end = pump_end.ok_or_else(|| invalid("sweep.parameter", "stim_overhang needs a pump pulse"))?;
                let (start, _) = span.expect("timed pulse");
                s.start_ms = Some(start);
                s.duration_ms = end + value - start;
            }
            _ => continue,
        }
        touched = true;
    }
    if !touched {
        return Err(invalid(
            "sweep.parameter",
            "the sequence has no pulse this parameter acts on",
        ));
    }
    Ok(out)
}

/// Scalar figure of merit of one readout.
pub fn evaluate_metric(metric: SweepMetric, readout: &ReadoutResult, window: (f64, f64)) -> Result<f64> {
    let residual = || residual_metrics(&readout.baseline, &readout.spectrum, window);
    Ok(match metric {
        SweepMetric::HoleArea => hole_area(&readout.spectrum, &readout.baseline, window)?,
        SweepMetric::HoleDepth => 1.0 - residual()?.rho1_res,
        SweepMetric::Rho1Res => residual()?.rho1_res,
        SweepMetric::RemainingFraction => residual()?.remaining_total_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub outer: Option<f64>,
    pub value: f64,
    pub metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// One fit of the metric per outer value (a single entry without an
    /// outer sweep).
    pub fits: Vec<(Option<f64>, FitResult)>,
    /// Line through the chosen inner fit parameter versus the outer values.
    pub outer_fit: Option<FitResult>,
}

fn fit_sweep(model: SweepFitModel, x: &[f64], y: &[f64]) -> Result<FitResult> {
    match model {
        SweepFitModel::Linear => Ok(fit_linear(x, y)?.into_result(x.len())),
        SweepFitModel::Lorentzian => fit_lorentzian(x, y),
        SweepFitModel::Expoffset => fit_exponential_offset(x, y),
    }
}

/// Evaluates every point of a sweep, inner values varying fastest.
pub fn run_sweep(config: &ExperimentConfig, sweep: &SweepConfig) -> Result<SweepOutcome> {
    let outers: Vec<Option<f64>> = match &sweep.outer {
        Some(o) => o.values.iter().map(|v| Some(*v)).collect(),
        None => vec![None],
    };
    let window = (sweep.window_mhz[0], sweep.window_mhz[1]);
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for outer in outers {
        let base = match (outer, &sweep.outer) {
            (Some(v), Some(o)) => apply_sweep(config, o.parameter, v)?,
            _ => config.clone(),
        };
        let mut ys = Vec::with_capacity(sweep.values.len());
        for &value in &sweep.values {
            let point = apply_sweep(&base, sweep.parameter, value)?;
            let exec = execute(&point)?;
            let metric = evaluate_metric(sweep.metric, exec.readout(sweep.readout.as_deref())?, window)?;
            log::debug!("sweep point outer={outer:?} value={value} metric={metric}");
            rows.push(SweepRow { outer, value, metric });
            ys.push(metric);
        }
        if let Some(model) = sweep.fit {
            fits.push((outer, fit_sweep(model, &sweep.values, &ys)?));
        }
    }
    let outer_fit = match &sweep.outer {
        Some(o) => match &o.fit_parameter {
            Some(name) => {
                let y = fits
                    .iter()
                    .map(|(_, f)| {
                        f.parameter(name)
                            .map(|p| p.value)
                            .ok_or_else(|| invalid("sweep.outer.fit_parameter", format!("the fit has no `{name}`")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Some(fit_linear(&o.values, &y)?.into_result(y.len()))
            }
            None => None,
        },
        None => None,
    };
    Ok(SweepOutcome { rows, fits, outer_fit })
}

/// Everything a configuration asks for, before it is written to disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub execution: Execution,
    pub trace: Option<Trace>,
    pub trace_fit: Option<FitResult>,
    pub metrics: Option<ResidualMetrics>,
    pub sweep: Option<SweepOutcome>,
}

pub fn simulate(config: &ExperimentConfig) -> Result<ScenarioOutcome> {
    let execution = execute(config)?;
    let (mut trace, mut trace_fit) = (None, None);
    if let Some(t) = &config.outputs.trace {
        let mut tr = execution.output.trace((t.window_mhz[0], t.window_mhz[1]))?;
        if t.noise_relative > 0.0 {
            tr.hole_areas = with_noise(&tr.hole_areas, t.noise_relative, config.seed);
        }
        trace_fit = match t.fit {
            Some(TraceFitModel::Doubleexp) => Some(fit_double_exponential(&tr.delays_ms, &tr.hole_areas, None)?),
            Some(TraceFitModel::Expoffset) => Some(fit_exponential_offset(&tr.delays_ms, &tr.hole_areas)?),
            None => None,
        };
        trace = Some(tr);
    }
    let metrics = match &config.outputs.metrics {
        Some(m) => {
            let r = execution.readout(m.readout.as_deref())?;
            Some(residual_metrics(
                &r.baseline,
                &r.spectrum,
                (m.window_mhz[0], m.window_mhz[1]),
            )?)
        }
        None => None,
    };
    let sweep = config.sweep.as_ref().map(|s| run_sweep(config, s)).transpose()?;
    Ok(ScenarioOutcome {
        execution,
        trace,
        trace_fit,
        metrics,
        sweep,
    })
}

/// Record of one run, written next to its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub wall_time_s: f64,
    pub threads: usize,
    pub sweep_count: usize,
    pub files: Vec<String>,
    pub diagnostics: Vec<String>,
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_error(path))
}

fn write_sweep_csv(path: &Path, sweep: &SweepConfig, outcome: &SweepOutcome) -> Result<()> {
    let name = |p: SweepParameter| {
        serde_json::to_value(p)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default()
    };
    let metric = serde_json::to_value(sweep.metric)?
        .as_str()
        .unwrap_or_default()
        .to_owned();
    let file = fs::File::create(path).map_err(io_error(path))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = Vec::new();
    if let Some(o) = &sweep.outer {
        header.push(name(o.parameter));
    }
    header.push(name(sweep.parameter));
    header.push(metric);
    w.write_record(&header)?;
    for row in &outcome.rows {
        let mut rec = Vec::new();
        if let Some(o) = row.outer {
            rec.push(o.to_string());
        }
        rec.push(row.value.to_string());
        rec.push(row.metric.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(io_error(path))
}

#[derive(Serialize)]
struct SweepFitReport<'a> {
    fits: Vec<SweepFitEntry<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    outer_fit: Option<&'a FitResult>,
}

#[derive(Serialize)]
struct SweepFitEntry<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    outer: Option<f64>,
    fit: &'a FitResult,
}

/// Simulates `config` and writes its artifacts into `out_dir`, which is
/// created if needed. Returns the manifest, which is also written.
pub fn run_scenario(config: &ExperimentConfig, out_dir: &Path) -> Result<RunManifest> {
    let started = Instant::now();
    let outcome = simulate(config)?;
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let path = |name: &str| -> PathBuf { out_dir.join(name) };
    let mut files = Vec::new();
    let o = &config.outputs;

    if o.spectra {
        for (i, r) in outcome.execution.output.readouts.iter().enumerate() {
            let name = spectrum_file(&o.spectrum_prefix, i, r.readout.label.as_deref());
            r.spectrum.save(&path(&name))?;
            files.push(name);
        }
    }
    if let (Some(t), Some(trace)) = (&o.trace, &outcome.trace) {
        trace.save(&path(&t.file))?;
        files.push(t.file.clone());
        if let Some(fit) = &outcome.trace_fit {
            fit.save(&path(&t.fit_file))?;
            files.push(t.fit_file.clone());
        }
    }
    if let (Some(m), Some(metrics)) = (&o.metrics, &outcome.metrics) {
        write_json(&path(&m.file), metrics)?;
        files.push(m.file.clone());
    }
    if let (Some(s), Some(sweep)) = (&config.sweep, &outcome.sweep) {
        write_sweep_csv(&path(&s.file), s, sweep)?;
        files.push(s.file.clone());
        if s.fit.is_some() {
            let report = SweepFitReport {
                fits: sweep
                    .fits
                    .iter()
                    .map(|(outer, fit)| SweepFitEntry { outer: *outer, fit })
                    .collect(),
                outer_fit: sweep.outer_fit.as_ref(),
            };
            write_json(&path(&s.fit_file), &report)?;
            files.push(s.fit_file.clone());
        }
    }

    let manifest = RunManifest {
        name: config.name.clone(),
        config_sha256: config.hash()?,
        seed: config.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: started.elapsed().as_secs_f64(),
        threads: rayon::current_num_threads(),
        sweep_count: outcome.execution.sweep_count,
        files,
        diagnostics: outcome.execution.diagnostics.clone(),
    };
    write_json(&path(&o.manifest), &manifest)?;
    Ok(manifest)
}
