//! Ready-made experiment configurations, one per reproduced measurement.

use crate::config::{
    ExperimentConfig, MetricsOutput, OuterSweep, OutputConfig, SweepConfig, SweepFitModel, SweepMetric, SweepParameter,
    TraceFitModel, TraceOutput,
};
use crate::engine::LaserLineshape;
use crate::ensemble::InhomogeneousProfile;
use crate::error::{Error, Result};
use crate::levels::{RateParams, ZeemanConfig, BOHR_MHZ_PER_MT};
use crate::sequence::{
    DelayReference, DriveModel, Pulse, PumpPulse, ReadoutPulse, RfPulse, StimulationPulse, WaitPulse,
};

pub const T1_MS: f64 = 11.0;
pub const TZ_MS: f64 = 100.0;
pub const BETA: f64 = 0.9;
pub const G_GROUND: f64 = 12.0;
pub const G_EXCITED: f64 = 8.0;
/// Excited-state splitting matched by the RF drive.
pub const DELTA_E_MHZ: f64 = 135.0;

/// Peak pump rate of the swept pump, 1/ms (calibrated).
pub const PUMP_RATE: f64 = 2.0789;
/// Spin-preserving branching of decay through the auxiliary level
/// (calibrated).
pub const BETA_Z2: f64 = 0.8290;

pub const PUMP_MS: f64 = 200.0;
pub const STIM_POWER_MW: f64 = 20.0;
/// Stimulation kept on after the pump.
pub const STIM_OVERHANG_MS: f64 = 1.0;
pub const RF_BANDWIDTH_MHZ: f64 = 20.0;
pub const RF_VOLTAGE_VPP: f64 = 10.0;
pub const EARLY_DELAY_MS: f64 = 2.8;
pub const LATE_DELAY_MS: f64 = 60.0;

const PRESETS: &[(&str, &str)] = &[
    (
        "fig3_standard_pumping",
        "single-frequency pumping, hole decay trace with a double-exponential fit",
    ),
    (
        "fig4_stim_detuning",
        "hole area versus stimulation-laser detuning with a Lorentzian fit",
    ),
    (
        "fig5_stim_rate",
        "hole depth versus stimulation time at several powers; decay rate versus power",
    ),
    (
        "stimulated_pumping",
        "swept pumping with stimulated emission; residual absorption",
    ),
    (
        "rf_mixing",
        "swept pumping with stimulated emission and excited-state RF mixing",
    ),
    ("fig6_rf_power", "residual population versus RF voltage"),
    (
        "fig7_tailoring",
        "50 MHz transparency pit with a preserved 2 MHz absorption line",
    ),
];

/// Names and one-line descriptions of every preset.
pub fn list_presets() -> Vec<(&'static str, &'static str)> {
    PRESETS.to_vec()
}

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let config = match name {
        "fig3_standard_pumping" => fig3_standard_pumping(),
        "fig4_stim_detuning" => fig4_stim_detuning(),
        "fig5_stim_rate" => fig5_stim_rate(),
        "stimulated_pumping" => stimulated_pumping(),
        "rf_mixing" => rf_mixing(),
        "fig6_rf_power" => fig6_rf_power(),
        "fig7_tailoring" => fig7_tailoring(),
        other => return Err(Error::UnknownPreset(other.into())),
    };
    let description = PRESETS.iter().find(|(n, _)| *n == name).map_or("", |(_, d)| *d);
    Ok(ExperimentConfig {
        name: name.into(),
        description: description.into(),
        ..config
    })
}

fn base(zeeman: ZeemanConfig, rates: RateParams, profile: InhomogeneousProfile) -> ExperimentConfig {
    ExperimentConfig {
        name: String::new(),
        description: String::new(),
        seed: 0,
        dt_max_ms: None,
        zeeman,
        rates,
        profile,
        drive: DriveModel::default(),
        outputs: OutputConfig::default(),
        sweep: None,
        sequence: Vec::new(),
    }
}

/// Spin-flip oscillator strength matching the decay branching.
pub const CROSS_STRENGTH: f64 = (1.0 - BETA) / BETA;

fn standard_rates() -> RateParams {
    RateParams {
        cross_strength: Some(CROSS_STRENGTH),
        ..RateParams::new(T1_MS, TZ_MS, BETA)
    }
}

fn rates() -> RateParams {
    RateParams {
        beta_z2: Some(BETA_Z2),
        ..standard_rates()
    }
}

fn profile(span_mhz: f64, step_mhz: f64) -> InhomogeneousProfile {
    InhomogeneousProfile {
        grid_span_mhz: span_mhz,
        grid_step_mhz: step_mhz,
        ..InhomogeneousProfile::default()
    }
}

fn pump(duration_ms: f64, power_rate: f64) -> PumpPulse {
    PumpPulse {
        start_ms: None,
        duration_ms,
        center_mhz: 0.0,
        sweep_span_mhz: 0.0,
        sweep_period_ms: 0.0,
        gate_gap_mhz: 0.0,
        power_rate,
    }
}

fn swept_pump(span_mhz: f64, period_ms: f64, gap_mhz: f64, power_rate: f64) -> Pulse {
    Pulse::Pump(PumpPulse {
        sweep_span_mhz: span_mhz,
        sweep_period_ms: period_ms,
        gate_gap_mhz: gap_mhz,
        ..pump(PUMP_MS, power_rate)
    })
}

fn stimulation(start_ms: f64, duration_ms: f64, power_mw: f64) -> Pulse {
    Pulse::Stimulation(StimulationPulse {
        start_ms: Some(start_ms),
        duration_ms,
        power_mw,
        detuning_mhz: 0.0,
    })
}

fn rf(start_ms: f64, duration_ms: f64) -> Pulse {
    Pulse::Rf(RfPulse {
        start_ms: Some(start_ms),
        duration_ms,
        center_mhz: DELTA_E_MHZ,
        bandwidth_mhz: RF_BANDWIDTH_MHZ,
        sweep_period_ms: 0.0,
        voltage_vpp: RF_VOLTAGE_VPP,
    })
}

fn wait(duration_ms: f64) -> Pulse {
    Pulse::Wait(WaitPulse {
        start_ms: None,
        duration_ms,
    })
}

fn readout(half_span_mhz: f64, step_mhz: f64, delay_ms: f64, label: Option<&str>) -> Pulse {
    Pulse::Readout(ReadoutPulse {
        f_start_mhz: -half_span_mhz,
        f_stop_mhz: half_span_mhz,
        n_points: (2.0 * half_span_mhz / step_mhz).round() as usize + 1,
        at_delay_ms: delay_ms,
        reference: DelayReference::PumpEnd,
        label: label.map(str::to_owned),
    })
}

/// Delays of the hole-decay trace, ms after the pump.
pub const TRACE_DELAYS_MS: [f64; 18] = [
    1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 70.0, 100.0, 130.0, 160.0, 200.0, 250.0, 300.0,
];

fn fig3_standard_pumping() -> ExperimentConfig {
    // ground minus excited splitting of 60 MHz puts the inner antiholes at -60 MHz
    let field = 60.0 / (BOHR_MHZ_PER_MT * (G_GROUND - G_EXCITED));
    let mut c = base(
        ZeemanConfig::new(field, G_GROUND, G_EXCITED),
        standard_rates(),
        profile(420.0, 0.25),
    );
    c.sequence.push(Pulse::Pump(pump(PUMP_MS, PUMP_RATE)));
    c.sequence.push(wait(TRACE_DELAYS_MS[TRACE_DELAYS_MS.len() - 1]));
    for d in TRACE_DELAYS_MS {
        c.sequence.push(readout(200.0, 0.25, d, Some(&format!("t{d}ms"))));
    }
    c.outputs.trace = Some(TraceOutput {
        window_mhz: [-2.0, 2.0],
        file: "trace.csv".into(),
        fit: Some(TraceFitModel::Doubleexp),
        fit_file: "trace_fit.json".into(),
        noise_relative: 0.0,
    });
    c
}

/// Detunings of the stimulation laser, MHz.
pub fn fig4_detunings() -> Vec<f64> {
    (-20..=20).map(|k| 2000.0 * k as f64).collect()
}

fn fig4_stim_detuning() -> ExperimentConfig {
    let mut c = base(
        ZeemanConfig::with_excited_splitting(DELTA_E_MHZ, G_GROUND, G_EXCITED),
        rates(),
        profile(100.0, 0.25),
    );
    c.sequence = vec![
        Pulse::Pump(pump(PUMP_MS, PUMP_RATE)),
        // weak enough that the hole responds linearly to the stimulation rate
        stimulation(PUMP_MS, STIM_OVERHANG_MS, 0.05),
        wait(1.5),
        readout(20.0, 0.1, 2.5, Some("probe")),
    ];
    c.sweep = Some(SweepConfig {
        parameter: SweepParameter::StimDetuning,
        values: fig4_detunings(),
        metric: SweepMetric::HoleArea,
        window_mhz: [-2.0, 2.0],
        readout: Some("probe".into()),
        fit: Some(SweepFitModel::Lorentzian),
        outer: None,
        file: "sweep.csv".into(),
        fit_file: "sweep_fit.json".into(),
    });
    c
}

pub const FIG5_PERSISTENT_FRACTION: f64 = 0.1;
pub const FIG5_POWERS_MW: [f64; 3] = [5.0, 10.0, 20.0];

/// Stimulation times after the pump, ms.
pub fn fig5_overhangs() -> Vec<f64> {
    (0..=20).map(|k| 0.1 * k as f64).collect()
}

fn fig5_stim_rate() -> ExperimentConfig {
    // grounds coupled far faster than the excited decay, so only the
    // excited population and the persistent hole are seen
    let rates = RateParams {
        persistent_fraction: FIG5_PERSISTENT_FRACTION,
        tz_ms: 0.005,
        ..rates()
    };
    let mut c = base(
        ZeemanConfig::with_excited_splitting(DELTA_E_MHZ, G_GROUND, G_EXCITED),
        rates,
        InhomogeneousProfile::flat(10.0, 0.1),
    );
    c.sequence = vec![
        Pulse::Pump(pump(PUMP_MS, 1000.0)),
        stimulation(0.0, PUMP_MS + STIM_OVERHANG_MS, FIG5_POWERS_MW[0]),
        wait(0.01),
        Pulse::Readout(ReadoutPulse {
            reference: DelayReference::DriveEnd,
            ..match readout(5.0, 0.05, 0.01, Some("probe")) {
                Pulse::Readout(r) => r,
                _ => unreachable!(),
            }
        }),
    ];
    c.sweep = Some(SweepConfig {
        parameter: SweepParameter::StimOverhang,
        values: fig5_overhangs(),
        metric: SweepMetric::HoleDepth,
        window_mhz: [-1.0, 1.0],
        readout: Some("probe".into()),
        fit: Some(SweepFitModel::Expoffset),
        outer: Some(OuterSweep {
            parameter: SweepParameter::StimPower,
            values: FIG5_POWERS_MW.to_vec(),
            fit_parameter: Some("rate".into()),
        }),
        file: "sweep.csv".into(),
        fit_file: "sweep_fit.json".into(),
    });
    c
}

/// Swept pump, stimulation through the pump and its overhang, readouts
/// shortly after the pump and after the excited state has decayed.
fn stimulated_pumping() -> ExperimentConfig {
    let mut c = base(
        ZeemanConfig::with_excited_splitting(DELTA_E_MHZ, G_GROUND, G_EXCITED),
        rates(),
        profile(540.0, 0.5),
    );
    c.sequence = vec![
        swept_pump(10.0, 0.5, 0.0, PUMP_RATE),
        stimulation(0.0, PUMP_MS + STIM_OVERHANG_MS, STIM_POWER_MW),
        wait(LATE_DELAY_MS - STIM_OVERHANG_MS),
        readout(100.0, 0.1, EARLY_DELAY_MS, Some("early")),
        readout(100.0, 0.1, LATE_DELAY_MS, Some("late")),
    ];
    c.outputs.metrics = Some(MetricsOutput {
        window_mhz: [-2.0, 2.0],
        readout: Some("early".into()),
        file: "metrics.json".into(),
    });
    c
}

fn rf_mixing() -> ExperimentConfig {
    let mut c = stimulated_pumping();
    c.sequence.insert(2, rf(0.0, PUMP_MS + STIM_OVERHANG_MS));
    c
}

/// RF voltages of the saturation curve, Vpp.
pub fn fig6_voltages() -> Vec<f64> {
    (0..=10).map(f64::from).collect()
}

fn fig6_rf_power() -> ExperimentConfig {
    let mut c = rf_mixing();
    c.sweep = Some(SweepConfig {
        parameter: SweepParameter::RfVoltage,
        values: fig6_voltages(),
        metric: SweepMetric::RemainingFraction,
        window_mhz: [-2.0, 2.0],
        readout: Some("early".into()),
        fit: None,
        outer: None,
        file: "sweep.csv".into(),
        fit_file: "sweep_fit.json".into(),
    });
    c
}

pub const FIG7_SPAN_MHZ: f64 = 50.0;
pub const FIG7_PERIOD_MS: f64 = 0.1;
pub const FIG7_GAP_MHZ: f64 = 2.5;
pub const FIG7_PUMP_RATE: f64 = 30.0;

fn fig7_tailoring() -> ExperimentConfig {
    let mut c = base(
        ZeemanConfig::with_excited_splitting(DELTA_E_MHZ, G_GROUND, G_EXCITED),
        rates(),
        profile(600.0, 0.25),
    );
    c.drive.laser_lineshape = LaserLineshape::Gaussian;
    c.sequence = vec![
        swept_pump(FIG7_SPAN_MHZ, FIG7_PERIOD_MS, FIG7_GAP_MHZ, FIG7_PUMP_RATE),
        stimulation(0.0, PUMP_MS + STIM_OVERHANG_MS, STIM_POWER_MW),
        rf(0.0, PUMP_MS + STIM_OVERHANG_MS),
        wait(EARLY_DELAY_MS - STIM_OVERHANG_MS),
        readout(40.0, 0.1, EARLY_DELAY_MS, Some("tailored")),
    ];
    c
}
