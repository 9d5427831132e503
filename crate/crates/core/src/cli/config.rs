use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{BoundaryMode, FlowConfig, FlowMode};
use crate::surface::{build_model, ModelSpec, SurfaceModel, MIN_RESOLUTION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    PuncturedTorus,
    /// Single exact cone end; zero curvature, used as a solver smoke test.
    ExactCone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Number of punctures `k`.
    pub punctures: usize,
    /// Cone angle parameter shared by every end unless `angles` is given.
    pub alpha: f64,
    pub angles: Option<Vec<f64>>,
    pub resolution: usize,
    pub end_resolution: Option<usize>,
    /// Defaults to `12/α` per end.
    pub rho_max: Option<f64>,
    /// Inner radius of the exact-cone fixture.
    pub rho_min: f64,
    pub perturbation_amp: f64,
    pub order_tau: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::PuncturedTorus,
            punctures: 1,
            alpha: 0.5,
            angles: None,
            resolution: 96,
            end_resolution: None,
            rho_max: None,
            rho_min: 0.0,
            perturbation_amp: 0.0,
            order_tau: 1.0,
        }
    }
}

impl ModelSection {
    pub fn angles(&self) -> Vec<f64> {
        self.angles.clone().unwrap_or_else(|| vec![self.alpha; self.punctures])
    }

    pub fn spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::with_angles(&self.angles(), self.resolution);
        spec.end_resolution = self.end_resolution;
        spec.rho_max = self.rho_max;
        if self.perturbation_amp != 0.0 {
            spec = spec.perturbation(self.perturbation_amp, self.order_tau);
        }
        spec
    }

    pub fn build(&self) -> Result<SurfaceModel> {
        match self.kind {
            ModelKind::PuncturedTorus => build_model(&self.spec()),
            ModelKind::ExactCone => SurfaceModel::exact_cone_fixture(
                self.alpha,
                self.resolution,
                self.rho_min,
                self.rho_max.unwrap_or(12.0 / self.alpha),
            ),
        }
    }
}

/// The flow settings plus the two switches that change the initial data
/// and what is carried along.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub mode: FlowMode,
    pub boundary_mode: BoundaryMode,
    pub dt_initial: f64,
    pub dt_max: f64,
    pub dt_relative: Option<f64>,
    pub safety_factor: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub linear_max_iter: usize,
    pub t_end: f64,
    pub fixed_dt: bool,
    /// Start from `e^{2ψ}` with `ψ` the nonpositive-curvature gauge.
    pub gauge: bool,
    pub track_potential: bool,
}

impl Default for FlowSection {
    fn default() -> Self {
        let c = FlowConfig::default();
        Self {
            mode: c.mode,
            boundary_mode: c.boundary_mode,
            dt_initial: c.dt_initial,
            dt_max: c.dt_max,
            dt_relative: c.dt_relative,
            safety_factor: c.safety_factor,
            newton_tol: c.newton_tol,
            newton_max_iter: c.newton_max_iter,
            linear_max_iter: c.linear_max_iter,
            t_end: c.t_end,
            fixed_dt: c.fixed_dt,
            gauge: false,
            track_potential: c.track_potential,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Bounds,
    AronsonBenilan,
    CurvatureDecay,
    SignConservation,
    Rescaled,
    Harnack,
    Convergence,
    /// Always fails; exercises the failure path end to end.
    InjectedFault,
}

impl CheckKind {
    pub fn raw_default() -> Vec<CheckKind> {
        vec![
            CheckKind::Bounds,
            CheckKind::AronsonBenilan,
            CheckKind::CurvatureDecay,
            CheckKind::SignConservation,
        ]
    }

    pub fn rescaled_default() -> Vec<CheckKind> {
        vec![CheckKind::Rescaled, CheckKind::Harnack, CheckKind::Convergence]
    }

    pub fn needs_mode(self) -> Option<FlowMode> {
        match self {
            CheckKind::Bounds | CheckKind::AronsonBenilan | CheckKind::CurvatureDecay | CheckKind::SignConservation => {
                Some(FlowMode::Raw)
            }
            CheckKind::Rescaled | CheckKind::Harnack | CheckKind::Convergence => Some(FlowMode::Rescaled),
            CheckKind::InjectedFault => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    /// Defaults to every check that applies to the flow mode.
    pub checks: Option<Vec<CheckKind>>,
    pub harnack_pairs: usize,
    pub harnack_seed: u64,
    pub conservation_tol: f64,
    pub error_threshold: f64,
    pub curvature_threshold: f64,
    pub kappa_samples: usize,
    pub kappa_seed: u64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            checks: None,
            harnack_pairs: 64,
            harnack_seed: 11,
            conservation_tol: 0.01,
            error_threshold: 0.02,
            curvature_threshold: 0.05,
            kappa_samples: 16,
            kappa_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: String,
    /// Snapshot times besides the start and end; raw runs also stop at t = 1.
    pub snapshot_schedule: Vec<f64>,
    /// Keep every n-th step in `series.csv`.
    pub csv_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: "out".into(),
            snapshot_schedule: Vec::new(),
            csv_every: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub flow: FlowSection,
    pub diagnostics: DiagnosticsSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn flow_config(&self) -> FlowConfig {
        let f = &self.flow;
        FlowConfig {
            mode: f.mode,
            boundary_mode: f.boundary_mode,
            dt_initial: f.dt_initial,
            dt_max: f.dt_max,
            dt_relative: f.dt_relative,
            safety_factor: f.safety_factor,
            newton_tol: f.newton_tol,
            newton_max_iter: f.newton_max_iter,
            linear_max_iter: f.linear_max_iter,
            t_end: f.t_end,
            snapshot_schedule: self.schedule(),
            fixed_dt: f.fixed_dt,
            track_potential: f.track_potential,
        }
    }

    /// The configured snapshot times, plus `t = 1` for raw runs that reach
    /// it: the bounds are calibrated there.
    pub fn schedule(&self) -> Vec<f64> {
        let mut s = self.output.snapshot_schedule.clone();
        if self.flow.mode == FlowMode::Raw && self.flow.t_end >= 1.0 && !s.contains(&1.0) {
            s.push(1.0);
        }
        s
    }

    pub fn checks(&self) -> Vec<CheckKind> {
        match &self.diagnostics.checks {
            Some(c) => c.clone(),
            None if self.flow.mode == FlowMode::Raw => CheckKind::raw_default(),
            None => CheckKind::rescaled_default(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Validation for a config assembled in code rather than parsed.
    pub fn validate_standalone(&self) -> Result<()> {
        self.validate(&self.to_toml())
    }

    /// Checks invariants that serde cannot express. `text` is used only to
    /// find line numbers.
    fn validate(&self, text: &str) -> Result<()> {
        let err = |section: &str, key: &str, message: String| Error::Config {
            line: locate(text, section, key),
            message,
        };
        let m = &self.model;
        for (key, v) in [("alpha", m.alpha)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(err("model", key, format!("model.{key} must be positive, got {v}")));
            }
        }
        if let Some(a) = &m.angles {
            if a.len() != m.punctures {
                return Err(err(
                    "model",
                    "angles",
                    format!("model.angles has {} entries for {} punctures", a.len(), m.punctures),
                ));
            }
            if let Some(bad) = a.iter().find(|&&x| !(x > 0.0 && x.is_finite())) {
                return Err(err("model", "angles", format!("model.angles must be positive, got {bad}")));
            }
        }
        if m.kind == ModelKind::PuncturedTorus && m.punctures == 0 {
            return Err(err("model", "punctures", "model.punctures must be at least 1".into()));
        }
        if m.resolution < MIN_RESOLUTION {
            return Err(err(
                "model",
                "resolution",
                format!("model.resolution must be at least {MIN_RESOLUTION}, got {}", m.resolution),
            ));
        }
        if let Some(r) = m.rho_max {
            if !(r > m.rho_min && r.is_finite()) {
                return Err(err("model", "rho_max", format!("model.rho_max must exceed rho_min, got {r}")));
            }
        }
        if !(m.order_tau > 0.0) {
            return Err(err("model", "order_tau", format!("model.order_tau must be positive, got {}", m.order_tau)));
        }

        if let Err(Error::InvalidArgument(msg)) = self.flow_config().validate() {
            let key = msg.split_whitespace().next().unwrap_or("");
            return Err(err("flow", key, format!("flow.{msg}")));
        }
        if self.flow.gauge && self.flow.mode != FlowMode::Raw {
            return Err(err("flow", "gauge", "flow.gauge needs raw mode".into()));
        }
        if self.flow.track_potential && self.flow.mode != FlowMode::Raw {
            return Err(err("flow", "track_potential", "flow.track_potential needs raw mode".into()));
        }

        let d = &self.diagnostics;
        if d.harnack_pairs == 0 || d.kappa_samples == 0 {
            return Err(err("diagnostics", "harnack_pairs", "sample counts must be positive".into()));
        }
        for (key, v) in [
            ("conservation_tol", d.conservation_tol),
            ("error_threshold", d.error_threshold),
            ("curvature_threshold", d.curvature_threshold),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(err("diagnostics", key, format!("diagnostics.{key} must be positive, got {v}")));
            }
        }
        for c in self.checks() {
            if let Some(mode) = c.needs_mode() {
                if mode != self.flow.mode {
                    return Err(err(
                        "diagnostics",
                        "checks",
                        format!("check {c:?} needs {} mode", mode.name()),
                    ));
                }
            }
        }

        let o = &self.output;
        if o.csv_every == 0 {
            return Err(err("output", "csv_every", "output.csv_every must be at least 1".into()));
        }
        if let Some(bad) = o
            .snapshot_schedule
            .iter()
            .find(|&&t| !(t >= 0.0 && t <= self.flow.t_end))
        {
            return Err(err(
                "output",
                "snapshot_schedule",
                format!("snapshot time {bad} outside [0, {}]", self.flow.t_end),
            ));
        }
        if o.directory.is_empty() {
            return Err(err("output", "directory", "output.directory is empty".into()));
        }
        Ok(())
    }
}

/// Parses and validates a config; every error carries a 1-based line number
/// (0 when the problem is not tied to a line).
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map_or(0, |s| line_at(text, s.start)),
        message: e.message().to_string(),
    })?;
    cfg.validate(text)?;
    Ok(cfg)
}

fn line_at(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]`, or 0 if the key is absent (a
/// default or a combination of keys is at fault).
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            continue;
        }
        if current == section {
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return i + 1;
                }
            }
        }
    }
    0
}
