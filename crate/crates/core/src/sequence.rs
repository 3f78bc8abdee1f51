//! Pulse sequences: declarative pulses, their compilation into
//! piecewise-constant drive segments, and the executor that evolves an
//! ensemble through them and captures spectra.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{
    build_rate_matrix, rf_mix_rate, stimulation_rate, DriveRates, IonClassState, LaserLineshape, PersistentTrap,
    Propagator, RateMatrix,
};
use crate::ensemble::{absorbance_of, hole_area, scan_grid, EnsembleState, IonClass, Spectrum};
use crate::error::{invalid, Error, Result};
use crate::levels::RateParams;

fn is_none<T>(v: &Option<T>) -> bool {
    v.is_none()
}

/// Optical pump. With a non-zero `sweep_span_mhz` the laser is chirped in a
/// sawtooth across `center_mhz ± sweep_span_mhz/2` once per
/// `sweep_period_ms`, and switched off while within `gate_gap_mhz/2` of the
/// center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpPulse {
    #[serde(default, skip_serializing_if = "is_none")]
    pub start_ms: Option<f64>,
    pub duration_ms: f64,
    #[serde(default)]
    pub center_mhz: f64,
    #[serde(default)]
    pub sweep_span_mhz: f64,
    #[serde(default)]
    pub sweep_period_ms: f64,
    #[serde(default)]
    pub gate_gap_mhz: f64,
    /// Pump rate on resonance, 1/ms.
    pub power_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StimulationPulse {
    #[serde(default, skip_serializing_if = "is_none")]
    pub start_ms: Option<f64>,
    pub duration_ms: f64,
    pub power_mw: f64,
    /// Detuning of the stimulation laser from the excited-state resonance.
    #[serde(default)]
    pub detuning_mhz: f64,
}

/// RF drive swept across `center_mhz ± bandwidth_mhz/2`; it mixes the
/// excited Zeeman levels of every class whose splitting lies in the band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RfPulse {
    #[serde(default, skip_serializing_if = "is_none")]
    pub start_ms: Option<f64>,
    pub duration_ms: f64,
    pub center_mhz: f64,
    pub bandwidth_mhz: f64,
    #[serde(default)]
    pub sweep_period_ms: f64,
    pub voltage_vpp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaitPulse {
    #[serde(default, skip_serializing_if = "is_none")]
    pub start_ms: Option<f64>,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayReference {
    /// End of the last pump pulse (end of all drives if there is no pump).
    #[default]
    PumpEnd,
    /// End of the last pump, stimulation or RF pulse.
    DriveEnd,
    SequenceStart,
}

/// Snapshot of the transmission spectrum `at_delay_ms` after `reference`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutPulse {
    pub f_start_mhz: f64,
    pub f_stop_mhz: f64,
    pub n_points: usize,
    pub at_delay_ms: f64,
    #[serde(default)]
    pub reference: DelayReference,
    #[serde(default, skip_serializing_if = "is_none")]
    pub label: Option<String>,
}

/// One entry of a sequence. Timed pulses without `start_ms` begin when
/// every earlier timed pulse has ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pulse {
    Pump(PumpPulse),
    Stimulation(StimulationPulse),
    Rf(RfPulse),
    Wait(WaitPulse),
    Readout(ReadoutPulse),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Channel {
    Pump,
    Stimulation,
    Rf,
}

impl Channel {
    fn name(self) -> &'static str {
        match self {
            Channel::Pump => "pump",
            Channel::Stimulation => "stimulation",
            Channel::Rf => "rf",
        }
    }
}

impl Pulse {
    fn timing(&self) -> Option<(Option<f64>, f64)> {
        match self {
            Pulse::Pump(p) => Some((p.start_ms, p.duration_ms)),
            Pulse::Stimulation(p) => Some((p.start_ms, p.duration_ms)),
            Pulse::Rf(p) => Some((p.start_ms, p.duration_ms)),
            Pulse::Wait(p) => Some((p.start_ms, p.duration_ms)),
            Pulse::Readout(_) => None,
        }
    }

    fn channel(&self) -> Option<Channel> {
        match self {
            Pulse::Pump(_) => Some(Channel::Pump),
            Pulse::Stimulation(_) => Some(Channel::Stimulation),
            Pulse::Rf(_) => Some(Channel::Rf),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.issues("pulse").into_iter().next().map_or(Ok(()), Err)
    }

    /// Invariant violations, with field paths rooted at `path`.
    pub(crate) fn issues(&self, path: &str) -> Vec<Error> {
        let mut out = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                out.push(invalid(format!("{path}.{field}"), msg));
            }
        };
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if let Some((start, duration)) = self.timing() {
            check(non_negative(duration), "duration_ms", "must be >= 0");
            if let Some(s) = start {
                check(non_negative(s), "start_ms", "must be >= 0");
            }
        }
        match self {
            Pulse::Pump(p) => {
                check(p.center_mhz.is_finite(), "center_mhz", "must be finite");
                check(non_negative(p.power_rate), "power_rate", "must be >= 0");
                check(non_negative(p.sweep_span_mhz), "sweep_span_mhz", "must be >= 0");
                if p.sweep_span_mhz > 0.0 {
                    check(
                        p.sweep_period_ms.is_finite() && p.sweep_period_ms > 0.0,
                        "sweep_period_ms",
                        "must be > 0 for a swept pump",
                    );
                }
                check(
                    non_negative(p.gate_gap_mhz) && (p.gate_gap_mhz == 0.0 || p.gate_gap_mhz < p.sweep_span_mhz),
                    "gate_gap_mhz",
                    "must be >= 0 and below sweep_span_mhz",
                );
            }
            Pulse::Stimulation(p) => {
                check(non_negative(p.power_mw), "power_mw", "must be >= 0");
                check(p.detuning_mhz.is_finite(), "detuning_mhz", "must be finite");
            }
            Pulse::Rf(p) => {
                check(p.center_mhz.is_finite(), "center_mhz", "must be finite");
                check(non_negative(p.bandwidth_mhz), "bandwidth_mhz", "must be >= 0");
                check(non_negative(p.sweep_period_ms), "sweep_period_ms", "must be >= 0");
                check(p.voltage_vpp.is_finite(), "voltage_vpp", "must be finite");
            }
            Pulse::Wait(_) => {}
            Pulse::Readout(r) => {
                check(
                    r.f_start_mhz.is_finite() && r.f_stop_mhz.is_finite() && r.f_start_mhz < r.f_stop_mhz,
                    "f_stop_mhz",
                    "must exceed f_start_mhz",
                );
                check(r.n_points >= 2, "n_points", "must be >= 2");
                check(non_negative(r.at_delay_ms), "at_delay_ms", "must be >= 0");
            }
        }
        out
    }
}

fn default_stim_slope() -> f64 {
    0.35
}
fn default_rf_coupling() -> f64 {
    1.0
}
fn default_laser_linewidth() -> f64 {
    1.0
}
fn default_stim_linewidth() -> f64 {
    14_000.0
}

/// Conversion of laboratory drive settings into rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveModel {
    /// Stimulation rate per mW, 1/(ms mW).
    #[serde(default = "default_stim_slope")]
    pub stim_slope_per_mw_ms: f64,
    /// Mixing rate per squared RF voltage, 1/(ms V^2).
    #[serde(default = "default_rf_coupling")]
    pub rf_coupling_per_v2_ms: f64,
    /// FWHM of the pump laser.
    #[serde(default = "default_laser_linewidth")]
    pub laser_linewidth_mhz: f64,
    #[serde(default)]
    pub laser_lineshape: LaserLineshape,
    /// FWHM of the stimulation response versus laser detuning.
    #[serde(default = "default_stim_linewidth")]
    pub stim_linewidth_mhz: f64,
    /// Width of a soft RF band edge; zero gives a hard band.
    #[serde(default)]
    pub rf_edge_mhz: f64,
}

impl Default for DriveModel {
    fn default() -> Self {
        Self {
            stim_slope_per_mw_ms: default_stim_slope(),
            rf_coupling_per_v2_ms: default_rf_coupling(),
            laser_linewidth_mhz: default_laser_linewidth(),
            laser_lineshape: LaserLineshape::default(),
            stim_linewidth_mhz: default_stim_linewidth(),
            rf_edge_mhz: 0.0,
        }
    }
}

impl DriveModel {
    pub fn validate(&self) -> Result<()> {
        self.issues().into_iter().next().map_or(Ok(()), Err)
    }

    pub(crate) fn issues(&self) -> Vec<Error> {
        let mut out = Vec::new();
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if !non_negative(self.stim_slope_per_mw_ms) {
            out.push(invalid("drive.stim_slope_per_mw_ms", "must be >= 0"));
        }
        if !non_negative(self.rf_coupling_per_v2_ms) {
            out.push(invalid("drive.rf_coupling_per_v2_ms", "must be >= 0"));
        }
        if !positive(self.laser_linewidth_mhz) {
            out.push(invalid("drive.laser_linewidth_mhz", "must be > 0"));
        }
        if !positive(self.stim_linewidth_mhz) {
            out.push(invalid("drive.stim_linewidth_mhz", "must be > 0"));
        }
        if !non_negative(self.rf_edge_mhz) {
            out.push(invalid("drive.rf_edge_mhz", "must be >= 0"));
        }
        out
    }

    /// Relative stimulation efficiency at `detuning_mhz`.
    pub fn stim_detuning_factor(&self, detuning_mhz: f64) -> f64 {
        let x = 2.0 * detuning_mhz / self.stim_linewidth_mhz;
        1.0 / (1.0 + x * x)
    }

    /// Fraction of the RF rate that reaches a class with excited splitting
    /// `delta_e_mhz`.
    pub fn rf_band_factor(&self, rf: &RfDrive, delta_e_mhz: f64) -> f64 {
        let outside = (delta_e_mhz - rf.center_mhz).abs() - 0.5 * rf.bandwidth_mhz;
        if self.rf_edge_mhz > 0.0 {
            1.0 / (1.0 + (outside / self.rf_edge_mhz).exp())
        } else if outside <= 1e-9 * rf.center_mhz.abs().max(1.0) {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PumpDrive {
    /// Laser frequency range covered during the segment.
    pub freq_lo_mhz: f64,
    pub freq_hi_mhz: f64,
    pub peak_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StimDrive {
    pub gamma_per_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RfDrive {
    pub center_mhz: f64,
    pub bandwidth_mhz: f64,
    pub rate_per_ms: f64,
}

/// Interval of constant drive settings, shared by all classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriveSegment {
    pub t_start_ms: f64,
    pub t_end_ms: f64,
    pub pump: Option<PumpDrive>,
    pub stimulation: Option<StimDrive>,
    pub rf: Option<RfDrive>,
}

impl DriveSegment {
    pub fn duration_ms(&self) -> f64 {
        self.t_end_ms - self.t_start_ms
    }

    /// Per-class rates during this segment. `strengths` scales the pump
    /// rate of each transition.
    pub fn class_rates(
        &self,
        class: &IonClass,
        model: &DriveModel,
        strengths: [f64; 4],
        delta_e_mhz: f64,
    ) -> DriveRates {
        let mut rates = DriveRates::none();
        if let Some(p) = &self.pump {
            let lines = class.transitions.as_array().into_iter().zip(strengths);
            for (rate, (f, strength)) in rates.pump_rate.iter_mut().zip(lines) {
                *rate = model.laser_lineshape.mean_rate(
                    strength * p.peak_rate,
                    model.laser_linewidth_mhz,
                    p.freq_lo_mhz - f,
                    p.freq_hi_mhz - f,
                );
            }
        }
        if let Some(s) = &self.stimulation {
            rates = rates.with_stimulation(s.gamma_per_ms);
        }
        if let Some(rf) = &self.rf {
            rates = rates.with_mixing(rf.rate_per_ms * model.rf_band_factor(rf, delta_e_mhz));
        }
        rates
    }

    fn key(&self) -> [u64; 9] {
        let dt = self.duration_ms();
        // round so that repeated sub-steps with rounding-level differences share a key
        let dt_key = (dt * 1e12).round().to_bits();
        let pump = self.pump.map_or([u64::MAX; 3], |p| {
            [p.freq_lo_mhz.to_bits(), p.freq_hi_mhz.to_bits(), p.peak_rate.to_bits()]
        });
        let stim = self.stimulation.map_or(u64::MAX, |s| s.gamma_per_ms.to_bits());
        let rf = self.rf.map_or([u64::MAX; 3], |r| {
            [
                r.center_mhz.to_bits(),
                r.bandwidth_mhz.to_bits(),
                r.rate_per_ms.to_bits(),
            ]
        });
        [dt_key, pump[0], pump[1], pump[2], stim, rf[0], rf[1], rf[2], 0]
    }
}

/// `segments[first .. first + len]`, executed `count` times back to back.
/// The repeats occupy the following `len * (count - 1)` segments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SegmentBlock {
    pub first: usize,
    pub len: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduledReadout {
    pub time_ms: f64,
    pub delay_ms: f64,
    pub f_start_mhz: f64,
    pub f_stop_mhz: f64,
    pub n_points: usize,
    pub label: Option<String>,
    /// Number of blocks completed when the snapshot is taken.
    pub after_block: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompiledSequence {
    pub segments: Vec<DriveSegment>,
    pub blocks: Vec<SegmentBlock>,
    /// Interned id of each segment's settings and duration.
    pub descriptors: Vec<usize>,
    pub descriptor_count: usize,
    pub readouts: Vec<ScheduledReadout>,
    pub horizon_ms: f64,
    pub pump_end_ms: f64,
    pub drive_end_ms: f64,
    /// Complete sawtooth sweeps executed by all pump pulses.
    pub sweep_count: usize,
    pub drive: DriveModel,
}

#[derive(Debug, Clone, Copy)]
struct Placed<'a> {
    start: f64,
    end: f64,
    pulse: &'a Pulse,
}

struct Builder {
    segments: Vec<DriveSegment>,
    blocks: Vec<SegmentBlock>,
}

impl Builder {
    fn push_block(&mut self, segments: Vec<DriveSegment>, len: usize) {
        if segments.is_empty() {
            return;
        }
        debug_assert_eq!(segments.len() % len, 0);
        self.blocks.push(SegmentBlock {
            first: self.segments.len(),
            len,
            count: segments.len() / len,
        });
        self.segments.extend(segments);
    }
}

/// `(start, end)` of every timed pulse; `None` for readouts.
pub fn placements(pulses: &[Pulse]) -> Vec<Option<(f64, f64)>> {
    let mut cursor = 0.0f64;
    pulses
        .iter()
        .map(|pulse| {
            pulse.timing().map(|(start, duration)| {
                let start = start.unwrap_or(cursor);
                let end = start + duration;
                cursor = cursor.max(end);
                (start, end)
            })
        })
        .collect()
}

/// Splits the sequence into piecewise-constant drive segments.
///
/// Without `dt_max_ms`, swept pumps are stepped at `sweep_period_ms / 50`
/// and unswept intervals are left whole; with it, every segment is at most
/// `dt_max_ms` long.
pub fn compile(pulses: &[Pulse], drive: &DriveModel, dt_max_ms: Option<f64>) -> Result<CompiledSequence> {
    drive.validate()?;
    if let Some(dt) = dt_max_ms {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(invalid("dt_max_ms", "must be > 0"));
        }
    }
    for (i, p) in pulses.iter().enumerate() {
        if let Some(e) = p.issues(&format!("sequence[{i}]")).into_iter().next() {
            return Err(e);
        }
    }

    let placed: Vec<Placed> = pulses
        .iter()
        .zip(placements(pulses))
        .filter_map(|(pulse, span)| span.map(|(start, end)| Placed { start, end, pulse }))
        .collect();
    let horizon = placed.iter().fold(0.0f64, |h, p| h.max(p.end));
    let eps = 1e-9 * horizon.max(1.0);

    for channel in [Channel::Pump, Channel::Stimulation, Channel::Rf] {
        let mut spans: Vec<(f64, f64)> = placed
            .iter()
            .filter(|p| p.pulse.channel() == Some(channel) && p.end > p.start)
            .map(|p| (p.start, p.end))
            .collect();
        spans.sort_by(|a, b| a.0.total_cmp(&b.0));
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 - eps {
                return Err(Error::OverlappingPulses {
                    channel: channel.name(),
                    a_start: w[0].0,
                    a_end: w[0].1,
                    b_start: w[1].0,
                    b_end: w[1].1,
                });
            }
        }
    }

    let end_of = |pred: &dyn Fn(&Pulse) -> bool| {
        placed
            .iter()
            .filter(|p| pred(p.pulse))
            .map(|p| p.end)
            .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))))
    };
    let drive_end = end_of(&|p| p.channel().is_some()).unwrap_or(0.0);
    let pump_end = end_of(&|p| matches!(p, Pulse::Pump(_))).unwrap_or(drive_end);

    let mut readouts = Vec::new();
    for pulse in pulses {
        if let Pulse::Readout(r) = pulse {
            let reference = match r.reference {
                DelayReference::PumpEnd => pump_end,
                DelayReference::DriveEnd => drive_end,
                DelayReference::SequenceStart => 0.0,
            };
            let time = reference + r.at_delay_ms;
            if time > horizon + eps {
                return Err(Error::ReadoutBeyondHorizon {
                    at_ms: time,
                    horizon_ms: horizon,
                });
            }
            readouts.push(ScheduledReadout {
                time_ms: time.min(horizon),
                delay_ms: r.at_delay_ms,
                f_start_mhz: r.f_start_mhz,
                f_stop_mhz: r.f_stop_mhz,
                n_points: r.n_points,
                label: r.label.clone(),
                after_block: 0,
            });
        }
    }

    let mut cuts: Vec<f64> = vec![0.0, horizon];
    for p in &placed {
        if p.pulse.channel().is_some() {
            cuts.push(p.start);
            cuts.push(p.end);
        }
    }
    cuts.extend(readouts.iter().map(|r| r.time_ms));
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|b, a| (*b - *a).abs() <= eps);

    let mut builder = Builder {
        segments: Vec::new(),
        blocks: Vec::new(),
    };
    let mut block_ends = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b - a <= eps {
            continue;
        }
        let active = |ch: Channel| {
            placed
                .iter()
                .find(|p| p.pulse.channel() == Some(ch) && p.start <= a + eps && p.end >= b - eps)
        };
        let stimulation = active(Channel::Stimulation).map(|p| match p.pulse {
            Pulse::Stimulation(s) => StimDrive {
                gamma_per_ms: stimulation_rate(s.power_mw, drive.stim_slope_per_mw_ms)
                    * drive.stim_detuning_factor(s.detuning_mhz),
            },
            _ => unreachable!(),
        });
        let rf = active(Channel::Rf).map(|p| match p.pulse {
            Pulse::Rf(r) => RfDrive {
                center_mhz: r.center_mhz,
                bandwidth_mhz: r.bandwidth_mhz,
                rate_per_ms: rf_mix_rate(r.voltage_vpp, drive.rf_coupling_per_v2_ms),
            },
            _ => unreachable!(),
        });
        let base = DriveSegment {
            t_start_ms: a,
            t_end_ms: b,
            pump: None,
            stimulation,
            rf,
        };
        match active(Channel::Pump) {
            Some(Placed {
                start,
                pulse: Pulse::Pump(p),
                ..
            }) if p.sweep_span_mhz > 0.0 => {
                emit_sweep(&mut builder, &base, p, *start, dt_max_ms);
            }
            pump => {
                let pump = pump.map(|pl| match pl.pulse {
                    Pulse::Pump(p) => PumpDrive {
                        freq_lo_mhz: p.center_mhz,
                        freq_hi_mhz: p.center_mhz,
                        peak_rate: p.power_rate,
                    },
                    _ => unreachable!(),
                });
                let pieces = dt_max_ms.map_or(1, |dt| ((b - a) / dt - 1e-9).ceil().max(1.0) as usize);
                let step = (b - a) / pieces as f64;
                let segs = (0..pieces)
                    .map(|i| DriveSegment {
                        t_start_ms: a + i as f64 * step,
                        t_end_ms: if i + 1 == pieces { b } else { a + (i + 1) as f64 * step },
                        pump,
                        ..base
                    })
                    .collect();
                builder.push_block(segs, 1);
            }
        }
        while block_ends.len() < builder.blocks.len() {
            block_ends.push(b);
        }
    }

    for r in &mut readouts {
        r.after_block = block_ends.iter().take_while(|&&e| e <= r.time_ms + eps).count();
    }

    let sweep_count = placed
        .iter()
        .filter_map(|p| match p.pulse {
            Pulse::Pump(pp) if pp.sweep_span_mhz > 0.0 => {
                Some((pp.duration_ms / pp.sweep_period_ms + 1e-9).floor() as usize)
            }
            _ => None,
        })
        .sum();

    let mut interned: HashMap<[u64; 9], usize> = HashMap::new();
    let descriptors = builder
        .segments
        .iter()
        .map(|s| {
            let n = interned.len();
            *interned.entry(s.key()).or_insert(n)
        })
        .collect();

    Ok(CompiledSequence {
        segments: builder.segments,
        blocks: builder.blocks,
        descriptors,
        descriptor_count: interned.len(),
        readouts,
        horizon_ms: horizon,
        pump_end_ms: pump_end,
        drive_end_ms: drive_end,
        sweep_count,
        drive: *drive,
    })
}

/// Sub-step boundaries of one sweep period as phase fractions in `[0, 1]`.
fn sweep_template(p: &PumpPulse, dt_sub: f64) -> Vec<f64> {
    let mut edges = vec![0.0];
    if p.gate_gap_mhz > 0.0 {
        let half = 0.5 * p.gate_gap_mhz / p.sweep_span_mhz;
        edges.extend([0.5 - half, 0.5 + half]);
    }
    edges.push(1.0);
    let mut phases = vec![0.0];
    for w in edges.windows(2) {
        let pieces = ((w[1] - w[0]) * p.sweep_period_ms / dt_sub - 1e-9).ceil().max(1.0) as usize;
        for i in 1..=pieces {
            phases.push(if i == pieces {
                w[1]
            } else {
                w[0] + (w[1] - w[0]) * i as f64 / pieces as f64
            });
        }
    }
    phases
}

fn emit_sweep(builder: &mut Builder, base: &DriveSegment, p: &PumpPulse, pump_start: f64, dt_max_ms: Option<f64>) {
    let period = p.sweep_period_ms;
    let template = sweep_template(p, dt_max_ms.unwrap_or(period / 50.0));
    let lowest = p.center_mhz - 0.5 * p.sweep_span_mhz;
    let gate_half = 0.5 * p.gate_gap_mhz;
    let tol = 1e-9;

    let piece = |k: i64, f0: f64, f1: f64| {
        let lo = lowest + f0 * p.sweep_span_mhz;
        let hi = lowest + f1 * p.sweep_span_mhz;
        let gated = gate_half > 0.0 && (0.5 * (lo + hi) - p.center_mhz).abs() < gate_half;
        DriveSegment {
            t_start_ms: pump_start + (k as f64 + f0) * period,
            t_end_ms: pump_start + (k as f64 + f1) * period,
            pump: (!gated).then_some(PumpDrive {
                freq_lo_mhz: lo,
                freq_hi_mhz: hi,
                peak_rate: p.power_rate,
            }),
            ..*base
        }
    };
    // pieces of period `k` between phases `f0` and `f1`
    let partial = |k: i64, f0: f64, f1: f64| -> Vec<DriveSegment> {
        let mut cuts = vec![f0];
        cuts.extend(template.iter().copied().filter(|&f| f > f0 + tol && f < f1 - tol));
        cuts.push(f1);
        cuts.windows(2).map(|w| piece(k, w[0], w[1])).collect()
    };

    let ua = (base.t_start_ms - pump_start) / period;
    let ub = (base.t_end_ms - pump_start) / period;
    let (mut ka, mut fa) = (ua.floor() as i64, ua - ua.floor());
    if fa > 1.0 - tol {
        ka += 1;
        fa = 0.0;
    }
    let (mut kb, mut fb) = (ub.floor() as i64, ub - ub.floor());
    if fb < tol {
        kb -= 1;
        fb = 1.0;
    }
    if fa < tol {
        fa = 0.0;
    }
    if fb > 1.0 - tol {
        fb = 1.0;
    }

    if ka == kb {
        let segs = partial(ka, fa, fb);
        let n = segs.len();
        builder.push_block(segs, n);
        return;
    }
    let mut first_full = ka;
    if fa > 0.0 {
        let segs = partial(ka, fa, 1.0);
        let n = segs.len();
        builder.push_block(segs, n);
        first_full += 1;
    }
    let last_full = if fb < 1.0 { kb - 1 } else { kb };
    if last_full >= first_full {
        let len = template.len() - 1;
        let segs = (first_full..=last_full)
            .flat_map(|k| template.windows(2).map(move |w| (k, w[0], w[1])))
            .map(|(k, f0, f1)| piece(k, f0, f1))
            .collect();
        builder.push_block(segs, len);
    }
    if fb < 1.0 {
        let segs = partial(kb, 0.0, fb);
        let n = segs.len();
        builder.push_block(segs, n);
    }
}

/// Hole area versus readout delay.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub delays_ms: Vec<f64>,
    pub hole_areas: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TraceRow {
    delay_ms: f64,
    hole_area: f64,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.delays_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delays_ms.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (&delay_ms, &hole_area) in self.delays_ms.iter().zip(&self.hole_areas) {
            w.serialize(TraceRow { delay_ms, hole_area })?;
        }
        w.flush().map_err(|e| Error::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut t = Trace::default();
        for row in csv::Reader::from_reader(reader).deserialize() {
            let row: TraceRow = row?;
            t.delays_ms.push(row.delay_ms);
            t.hole_areas.push(row.hole_area);
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: path.to_owned(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutResult {
    pub readout: ScheduledReadout,
    pub spectrum: Spectrum,
    /// The same scan taken before the sequence started.
    pub baseline: Spectrum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub readouts: Vec<ReadoutResult>,
}

impl RunOutput {
    /// Hole area in `window` for every readout, in sequence order.
    pub fn trace(&self, window: (f64, f64)) -> Result<Trace> {
        let mut t = Trace::default();
        for r in &self.readouts {
            t.delays_ms.push(r.readout.delay_ms);
            t.hole_areas.push(hole_area(&r.spectrum, &r.baseline, window)?);
        }
        Ok(t)
    }
}

struct ClassRunner<'a> {
    compiled: &'a CompiledSequence,
    params: &'a RateParams,
    class: &'a IonClass,
    delta_e: f64,
    trap: Option<PersistentTrap>,
    cache: Vec<Option<(RateMatrix, Propagator)>>,
    leaky: Vec<Option<Propagator>>,
}

impl<'a> ClassRunner<'a> {
    fn entry(&mut self, index: usize) -> Result<(RateMatrix, Propagator)> {
        let id = self.compiled.descriptors[index];
        if let Some(e) = self.cache[id] {
            return Ok(e);
        }
        let seg = &self.compiled.segments[index];
        let rates = seg.class_rates(
            self.class,
            &self.compiled.drive,
            self.params.transition_strengths(),
            self.delta_e,
        );
        let m = build_rate_matrix(self.params, &rates);
        let e = (m, Propagator::new(&m, seg.duration_ms())?);
        self.cache[id] = Some(e);
        Ok(e)
    }

    fn step_with_trap(&mut self, state: IonClassState, index: usize, trap: PersistentTrap) -> Result<IonClassState> {
        let (m, prop) = self.entry(index)?;
        if trap.is_full(&state) {
            return Ok(prop.apply(&state));
        }
        let id = self.compiled.descriptors[index];
        let dt = self.compiled.segments[index].duration_ms();
        let leaky = match self.leaky[id] {
            Some(p) => p,
            None => {
                let p = Propagator::new(&m.with_excited_leak(trap.rate_per_ms), dt)?;
                self.leaky[id] = Some(p);
                p
            }
        };
        let next = leaky.apply(&state);
        if next.persistent_bleached <= trap.capacity {
            Ok(next)
        } else {
            trap.fill_across(&state, &m, dt)
        }
    }

    fn advance_block(&mut self, state: IonClassState, block: &SegmentBlock) -> Result<IonClassState> {
        if let Some(trap) = self.trap {
            if !trap.is_full(&state) {
                let mut s = state;
                for rep in 0..block.count {
                    for j in 0..block.len {
                        s = self.step_with_trap(s, block.first + rep * block.len + j, trap)?;
                    }
                }
                return Ok(s);
            }
        }
        let mut period = Propagator::identity();
        for j in 0..block.len {
            period = period.then(&self.entry(block.first + j)?.1);
        }
        Ok(power(&period, block.count).apply(&state))
    }

    /// Final state plus the state at each readout.
    fn run(mut self, order: &[usize]) -> Result<(IonClassState, Vec<IonClassState>)> {
        let readouts = &self.compiled.readouts;
        let mut snaps = vec![self.class.state; readouts.len()];
        let mut state = self.class.state;
        let mut next = 0;
        for (bi, block) in self.compiled.blocks.iter().enumerate() {
            while next < order.len() && readouts[order[next]].after_block <= bi {
                snaps[order[next]] = state;
                next += 1;
            }
            state = self.advance_block(state, block)?;
        }
        for &i in &order[next..] {
            snaps[i] = state;
        }
        Ok((state, snaps))
    }
}

fn power(p: &Propagator, mut n: usize) -> Propagator {
    let mut result = Propagator::identity();
    let mut base = *p;
    while n > 0 {
        if n & 1 == 1 {
            result = result.then(&base);
        }
        n >>= 1;
        if n > 0 {
            base = base.then(&base);
        }
    }
    result
}

fn spectrum_of(ensemble: &EnsembleState, states: &[IonClassState], r: &ScheduledReadout) -> Result<Spectrum> {
    let freqs = scan_grid(r.f_start_mhz, r.f_stop_mhz, r.n_points)?;
    let od = freqs
        .par_iter()
        .map(|&f| absorbance_of(ensemble, states.iter(), f))
        .collect();
    Ok(Spectrum::from_optical_depth(freqs, od))
}

/// Evolves every class of `ensemble` through the compiled sequence and
/// captures the requested spectra. The ensemble is left in its final state.
pub fn run(ensemble: &mut EnsembleState, compiled: &CompiledSequence) -> Result<RunOutput> {
    let mut order: Vec<usize> = (0..compiled.readouts.len()).collect();
    order.sort_by_key(|&i| compiled.readouts[i].after_block);
    let delta_e = ensemble.config.delta_e();
    let trap = PersistentTrap::from_params(&ensemble.params);
    let params = ensemble.params;

    let results: Vec<(IonClassState, Vec<IonClassState>)> = ensemble
        .classes
        .par_iter()
        .map(|class| {
            ClassRunner {
                compiled,
                params: &params,
                class,
                delta_e,
                trap,
                cache: vec![None; compiled.descriptor_count],
                leaky: vec![None; compiled.descriptor_count],
            }
            .run(&order)
        })
        .collect::<Result<_>>()?;

    let initial: Vec<IonClassState> = ensemble.classes.iter().map(|c| c.state).collect();
    let mut baselines: Vec<(f64, f64, usize, Spectrum)> = Vec::new();
    let mut readouts = Vec::with_capacity(compiled.readouts.len());
    for (k, r) in compiled.readouts.iter().enumerate() {
        let states: Vec<IonClassState> = results.iter().map(|(_, snaps)| snaps[k]).collect();
        let spectrum = spectrum_of(ensemble, &states, r)?;
        let key = (r.f_start_mhz, r.f_stop_mhz, r.n_points);
        let baseline = match baselines.iter().find(|b| (b.0, b.1, b.2) == key) {
            Some(b) => b.3.clone(),
            None => {
                let b = spectrum_of(ensemble, &initial, r)?;
                baselines.push((key.0, key.1, key.2, b.clone()));
                b
            }
        };
        readouts.push(ReadoutResult {
            readout: r.clone(),
            spectrum,
            baseline,
        });
    }

    for (class, (state, _)) in ensemble.classes.iter_mut().zip(results) {
        class.state = state;
    }
    Ok(RunOutput { readouts })
}
