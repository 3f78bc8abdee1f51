//! Experiment configuration: a TOML document describing the ion, the
//! ensemble, the pulse sequence and the requested artifacts.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::InhomogeneousProfile;
use crate::error::{ConfigIssue, Error, Result};
use crate::levels::{RateParams, ZeemanConfig};
use crate::sequence::{compile, DriveModel, Pulse};

fn yes() -> bool {
    true
}
fn default_spectrum_prefix() -> String {
    "spectrum".into()
}
fn default_manifest() -> String {
    "manifest.json".into()
}
fn default_trace_file() -> String {
    "trace.csv".into()
}
fn default_trace_fit_file() -> String {
    "trace_fit.json".into()
}
fn default_metrics_file() -> String {
    "metrics.json".into()
}
fn default_sweep_file() -> String {
    "sweep.csv".into()
}
fn default_sweep_fit_file() -> String {
    "sweep_fit.json".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFitModel {
    Doubleexp,
    Expoffset,
}

/// Hole area versus readout delay, over every readout of the sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceOutput {
    pub window_mhz: [f64; 2],
    #[serde(default = "default_trace_file")]
    pub file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<TraceFitModel>,
    #[serde(default = "default_trace_fit_file")]
    pub fit_file: String,
    /// Gaussian noise added to the hole areas before writing and fitting,
    /// as a fraction of each value; seeded by the config seed.
    #[serde(default)]
    pub noise_relative: f64,
}

/// Residual-population metrics of one readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsOutput {
    pub window_mhz: [f64; 2],
    /// Label of the readout to evaluate; the last readout when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<String>,
    #[serde(default = "default_metrics_file")]
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    /// Write every readout spectrum as CSV.
    #[serde(default = "yes")]
    pub spectra: bool,
    #[serde(default = "default_spectrum_prefix")]
    pub spectrum_prefix: String,
    #[serde(default = "default_manifest")]
    pub manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsOutput>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            spectra: true,
            spectrum_prefix: default_spectrum_prefix(),
            manifest: default_manifest(),
            trace: None,
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    RfVoltage,
    StimPower,
    /// Stimulation time after the pump has ended.
    StimOverhang,
    StimDetuning,
    PumpRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMetric {
    HoleArea,
    /// One minus the residual optical-depth ratio.
    HoleDepth,
    Rho1Res,
    RemainingFraction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepFitModel {
    Linear,
    Lorentzian,
    Expoffset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterSweep {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Parameter of the inner fit that is regressed linearly on the outer
    /// values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_parameter: Option<String>,
}

/// Re-runs the sequence for each value of one knob and records a metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub metric: SweepMetric,
    pub window_mhz: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub readout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<SweepFitModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outer: Option<OuterSweep>,
    #[serde(default = "default_sweep_file")]
    pub file: String,
    #[serde(default = "default_sweep_fit_file")]
    pub fit_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    /// Longest propagation step; see [`crate::sequence::compile`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt_max_ms: Option<f64>,
    pub zeeman: ZeemanConfig,
    pub rates: RateParams,
    #[serde(default)]
    pub profile: InhomogeneousProfile,
    #[serde(default)]
    pub drive: DriveModel,
    #[serde(default)]
    pub outputs: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub sequence: Vec<Pulse>,
}

fn issue(path: impl Into<String>, message: impl Into<String>) -> ConfigIssue {
    ConfigIssue {
        path: path.into(),
        message: message.into(),
    }
}

fn as_issue(e: Error, fallback_path: &str) -> ConfigIssue {
    match e {
        Error::InvalidParameter { field, message } => issue(field, message),
        other => issue(fallback_path, other.to_string()),
    }
}

/// Dotted path of the key at byte `offset` of a TOML document.
fn path_at(text: &str, offset: usize) -> Option<String> {
    let head = &text[..offset.min(text.len())];
    let line_start = head.rfind('\n').map_or(0, |i| i + 1);
    let line = &text[line_start..];
    let key: String = line
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_' || *c == '-')
        .collect();
    let mut table = String::new();
    let mut arrays: std::collections::HashMap<String, usize> = Default::default();
    for l in head[..line_start].lines() {
        let l = l.trim();
        if let Some(name) = l.strip_prefix("[[").and_then(|r| r.strip_suffix("]]")) {
            let name = name.trim().to_string();
            let n = arrays.entry(name.clone()).or_insert(0);
            table = format!("{name}[{n}]");
            *n += 1;
        } else if let Some(name) = l.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            table = name.trim().to_string();
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (_, true) if table.is_empty() => None,
        (_, true) => Some(table),
        (true, false) => Some(key),
        (false, false) => Some(format!("{table}.{key}")),
    }
}

/// Offset of the key named in an "unknown field" message. For arrays of
/// tables the reported span covers only the first header, so the search
/// continues through the rest of the document.
fn unknown_key_offset(text: &str, span: std::ops::Range<usize>, message: &str) -> Option<usize> {
    let rest = message.split("unknown field `").nth(1)?;
    let key = &rest[..rest.find('`')?];
    let region = text.get(span.start..)?;
    let header = text.get(span.clone())?.trim();
    let table = header.trim_start_matches('[').trim_end_matches(']').trim();
    let mut offset = span.start;
    for line in region.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if let Some(after) = trimmed.strip_prefix(key) {
            let at = offset + (line.len() - trimmed.len());
            let in_table = !header.starts_with('[') || path_at(text, at).is_some_and(|p| p.starts_with(table));
            if after.trim_start().starts_with('=') && in_table {
                return Some(at);
            }
        }
        offset += line.len();
    }
    None
}

/// Parses and validates a TOML experiment description.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = toml::from_str(text).map_err(|e| {
        let path = e
            .span()
            .and_then(|s| {
                path_at(
                    text,
                    unknown_key_offset(text, s.clone(), e.message()).unwrap_or(s.start),
                )
            })
            .unwrap_or_else(|| "<document>".into());
        Error::Config(vec![issue(path, e.message().trim().to_string())])
    })?;
    let issues = config.issues();
    if issues.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(issues))
    }
}

impl ExperimentConfig {
    /// Canonical TOML text.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(vec![issue("<document>", e.to_string())]))
    }

    /// SHA-256 of the canonical TOML text, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    fn readout_labels(&self) -> Vec<Option<&str>> {
        self.sequence
            .iter()
            .filter_map(|p| match p {
                Pulse::Readout(r) => Some(r.label.as_deref()),
                _ => None,
            })
            .collect()
    }

    /// Every invariant violation, addressed by field path.
    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        if let Err(e) = self.zeeman.validate() {
            out.push(as_issue(e, "zeeman"));
        }
        out.extend(self.rates.issues().into_iter().map(|e| as_issue(e, "rates")));
        out.extend(self.profile.issues().into_iter().map(|e| as_issue(e, "profile")));
        out.extend(self.drive.issues().into_iter().map(|e| as_issue(e, "drive")));
        if let Some(dt) = self.dt_max_ms {
            if !(dt.is_finite() && dt > 0.0) {
                out.push(issue("dt_max_ms", "must be > 0"));
            }
        }
        let mut pulse_ok = true;
        for (i, p) in self.sequence.iter().enumerate() {
            let found = p.issues(&format!("sequence[{i}]"));
            pulse_ok &= found.is_empty();
            out.extend(found.into_iter().map(|e| as_issue(e, "sequence")));
        }
        if pulse_ok && self.drive.issues().is_empty() {
            if let Err(e) = compile(&self.sequence, &self.drive, self.dt_max_ms.filter(|d| *d > 0.0)) {
                out.push(as_issue(e, "sequence"));
            }
        }

        let labels = self.readout_labels();
        let mut seen = HashSet::new();
        for l in labels.iter().flatten() {
            if !seen.insert(*l) {
                out.push(issue("sequence", format!("duplicate readout label `{l}`")));
            }
        }
        let known = |name: &Option<String>, path: &str, out: &mut Vec<ConfigIssue>| {
            if labels.is_empty() {
                out.push(issue(path, "the sequence has no readout"));
            } else if let Some(n) = name {
                if !labels.contains(&Some(n.as_str())) {
                    out.push(issue(path, format!("no readout labelled `{n}`")));
                }
            }
        };
        let window = |w: [f64; 2], path: &str, out: &mut Vec<ConfigIssue>| {
            if !(w[0].is_finite() && w[1].is_finite() && w[0] < w[1]) {
                out.push(issue(path, "window must be [low, high] with low < high"));
            }
        };

        let o = &self.outputs;
        let mut files: Vec<(&str, String)> = vec![("outputs.manifest", o.manifest.clone())];
        if o.spectra {
            for (i, l) in labels.iter().enumerate() {
                files.push(("outputs.spectrum_prefix", spectrum_file(&o.spectrum_prefix, i, *l)));
            }
        }
        if let Some(t) = &o.trace {
            window(t.window_mhz, "outputs.trace.window_mhz", &mut out);
            known(&None, "outputs.trace", &mut out);
            if !(t.noise_relative.is_finite() && t.noise_relative >= 0.0) {
                out.push(issue("outputs.trace.noise_relative", "must be >= 0"));
            }
            files.push(("outputs.trace.file", t.file.clone()));
            if t.fit.is_some() {
                files.push(("outputs.trace.fit_file", t.fit_file.clone()));
            }
        }
        if let Some(m) = &o.metrics {
            window(m.window_mhz, "outputs.metrics.window_mhz", &mut out);
            known(&m.readout, "outputs.metrics.readout", &mut out);
            files.push(("outputs.metrics.file", m.file.clone()));
        }
        if let Some(s) = &self.sweep {
            window(s.window_mhz, "sweep.window_mhz", &mut out);
            known(&s.readout, "sweep.readout", &mut out);
            if s.values.is_empty() || s.values.iter().any(|v| !v.is_finite()) {
                out.push(issue("sweep.values", "must be a non-empty list of finite numbers"));
            }
            if let Some(outer) = &s.outer {
                if outer.values.is_empty() || outer.values.iter().any(|v| !v.is_finite()) {
                    out.push(issue(
                        "sweep.outer.values",
                        "must be a non-empty list of finite numbers",
                    ));
                }
                if outer.parameter == s.parameter {
                    out.push(issue("sweep.outer.parameter", "must differ from sweep.parameter"));
                }
                if outer.fit_parameter.is_some() && s.fit.is_none() {
                    out.push(issue("sweep.outer.fit_parameter", "requires sweep.fit"));
                }
            }
            let params = std::iter::once((s.parameter, "sweep.parameter"))
                .chain(s.outer.as_ref().map(|o| (o.parameter, "sweep.outer.parameter")));
            for (p, path) in params {
                let needed = |f: fn(&Pulse) -> bool| self.sequence.iter().any(f);
                let present = match p {
                    SweepParameter::RfVoltage => needed(|p| matches!(p, Pulse::Rf(_))),
                    SweepParameter::PumpRate => needed(|p| matches!(p, Pulse::Pump(_))),
                    _ => needed(|p| matches!(p, Pulse::Stimulation(_))),
                };
                if !present {
                    out.push(issue(path, "the sequence has no pulse this parameter acts on"));
                }
            }
            files.push(("sweep.file", s.file.clone()));
            if s.fit.is_some() {
                files.push(("sweep.fit_file", s.fit_file.clone()));
            }
        }
        let mut names = HashSet::new();
        for (path, f) in &files {
            if f.is_empty() || f.contains('/') || f.contains('\\') || f == "." || f == ".." {
                out.push(issue(*path, format!("`{f}` is not a plain file name")));
            } else if !names.insert(f.clone()) {
                out.push(issue(*path, format!("output file `{f}` is used twice")));
            }
        }
        out
    }
}

/// File name of the `index`-th readout spectrum.
pub fn spectrum_file(prefix: &str, index: usize, label: Option<&str>) -> String {
    match label {
        Some(l) => format!("{prefix}_{l}.csv"),
        None => format!("{prefix}_{index}.csv"),
    }
}
