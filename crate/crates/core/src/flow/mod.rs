//! Backward-Euler integration of the conformal flow, raw and rescaled.
//!
//! Each step is solved for `w = log u` by damped Newton. The unknown is the
//! logarithm so positivity of `u = e^w` holds by construction and the
//! Jacobian `diag(cw·e^w/dt) + K` is an M-matrix.

mod newton;

use serde::{Deserialize, Serialize};

use crate::elliptic::{evolve_potential, PotentialState};
use crate::error::{Error, Result};
use crate::surface::ops::{curvature_from_log, log_field, sync_in_place, total_curvature_from_log};
use crate::surface::SurfaceModel;

pub use newton::NewtonReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowMode {
    /// `u` against `t`.
    Raw,
    /// `ũ = u/t` against `τ = log t`.
    Rescaled,
}

impl FlowMode {
    pub fn name(self) -> &'static str {
        match self {
            FlowMode::Raw => "raw",
            FlowMode::Rescaled => "rescaled",
        }
    }
}

/// Closure of the truncation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// `u = 1` (raw) or `ũ = e^{-τ}` (rescaled).
    DirichletOne,
    /// `log u` relaxes to its far-field value like `e^{-ατρ}`.
    AsymptoticDecay,
    /// No flux through the truncation; the PDE is kept on a half cell.
    ZeroFlux,
    /// Truncation values are held at their current values.
    Frozen,
}

/// The evolving conformal factor.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformalState {
    pub mode: FlowMode,
    pub time: f64,
    pub u: Vec<f64>,
    pub step_count: u64,
    pub last_dt: f64,
    /// Step size the controller proposes next (unclipped by the schedule).
    pub next_dt: f64,
}

impl ConformalState {
    /// `u ≡ 1` at time zero.
    pub fn initial(model: &SurfaceModel, mode: FlowMode) -> Self {
        Self {
            mode,
            time: 0.0,
            u: vec![1.0; model.num_nodes()],
            step_count: 0,
            last_dt: 0.0,
            next_dt: 0.0,
        }
    }

    /// Wraps a field after checking length and positivity. Overlap values are
    /// re-synchronized in `log u`.
    pub fn from_field(model: &SurfaceModel, mode: FlowMode, time: f64, u: Vec<f64>) -> Result<Self> {
        let w = log_field(model, &u)?;
        if !(time >= 0.0 && time.is_finite()) {
            return Err(Error::InvalidArgument(format!("time {time} must be finite and nonnegative")));
        }
        Ok(Self {
            mode,
            time,
            u: exp_field(model, &w),
            step_count: 0,
            last_dt: 0.0,
            next_dt: 0.0,
        })
    }

    /// Rescaled state at `τ = log t` built from a raw state at `t ≥ 1`.
    pub fn to_rescaled(&self) -> Result<Self> {
        if self.mode != FlowMode::Raw {
            return Err(Error::WrongMode { expected: "raw" });
        }
        if !(self.time >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "rescaling needs t ≥ 1, got {}",
                self.time
            )));
        }
        Ok(Self {
            mode: FlowMode::Rescaled,
            time: self.time.ln(),
            u: self.u.iter().map(|v| v / self.time).collect(),
            step_count: self.step_count,
            last_dt: 0.0,
            next_dt: 0.0,
        })
    }
}

/// `u = e^w`, with overlap values of `w` interpolated first so they match
/// the constraint rows of the step. Holes hold 1.
pub(crate) fn exp_field(model: &SurfaceModel, w: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = (0..w.len()).map(|g| if model.is_solved(g) { w[g] } else { 0.0 }).collect();
    sync_in_place(model, &mut w);
    w.iter().map(|x| x.exp()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub mode: FlowMode,
    pub boundary_mode: BoundaryMode,
    pub dt_initial: f64,
    pub dt_max: f64,
    pub safety_factor: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub linear_max_iter: usize,
    /// `t_end` in raw mode, `τ_end` in rescaled mode.
    pub t_end: f64,
    pub snapshot_schedule: Vec<f64>,
    /// Keep `dt = dt_initial` (failures still abort instead of retrying).
    pub fixed_dt: bool,
    /// Optional accuracy cap `dt ≤ max(dt_initial, dt_relative·t)` on top of
    /// the iteration-count controller. Scaling `dt_initial`, `dt_max` and
    /// `dt_relative` together scales every step, which the iteration-count
    /// rule alone does not do.
    pub dt_relative: Option<f64>,
    /// Carry the heat-flow potential along a raw run.
    pub track_potential: bool,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            mode: FlowMode::Raw,
            boundary_mode: BoundaryMode::DirichletOne,
            dt_initial: 1e-3,
            dt_max: 0.5,
            safety_factor: 0.5,
            newton_tol: 1e-8,
            newton_max_iter: 10,
            linear_max_iter: 2000,
            t_end: 50.0,
            snapshot_schedule: Vec::new(),
            fixed_dt: false,
            dt_relative: None,
            track_potential: false,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        for (name, v) in [
            ("dt_initial", self.dt_initial),
            ("dt_max", self.dt_max),
            ("newton_tol", self.newton_tol),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if !(self.safety_factor > 0.0 && self.safety_factor < 1.0) {
            return bad(format!("safety_factor must lie in (0, 1), got {}", self.safety_factor));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return bad(format!("t_end must be finite and nonnegative, got {}", self.t_end));
        }
        if self.newton_max_iter == 0 || self.linear_max_iter == 0 {
            return bad("iteration limits must be positive".into());
        }
        if let Some(theta) = self.dt_relative {
            if !(theta > 0.0 && theta.is_finite()) {
                return bad(format!("dt_relative must be positive and finite, got {theta}"));
            }
        }
        if self.dt_max < self.dt_initial {
            return bad("dt_max must be at least dt_initial".into());
        }
        Ok(())
    }

    pub fn dt_floor(&self) -> f64 {
        self.dt_initial * 1e-4
    }
}

/// Result of one implicit step.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub state: ConformalState,
    pub newton: NewtonReport,
}

/// One backward-Euler step of `∂t u = Δ₀ log u − R₀`.
pub fn step_raw(
    model: &SurfaceModel,
    state: &ConformalState,
    dt: f64,
    config: &FlowConfig,
) -> Result<StepOutcome> {
    if state.mode != FlowMode::Raw {
        return Err(Error::WrongMode { expected: "raw" });
    }
    step(model, state, dt, config)
}

/// One backward-Euler step of `∂τ ũ = Δ₀ log ũ − R₀ − ũ`.
pub fn step_rescaled(
    model: &SurfaceModel,
    state: &ConformalState,
    dtau: f64,
    config: &FlowConfig,
) -> Result<StepOutcome> {
    if state.mode != FlowMode::Rescaled {
        return Err(Error::WrongMode { expected: "rescaled" });
    }
    step(model, state, dtau, config)
}

/// Mode-dispatching step.
pub fn step(
    model: &SurfaceModel,
    state: &ConformalState,
    dt: f64,
    config: &FlowConfig,
) -> Result<StepOutcome> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    model.check_len(&state.u)?;
    let w_old = log_field(model, &state.u)?;
    let new_time = state.time + dt;
    let problem = newton::StepProblem::new(model, state, &w_old, dt, new_time, config.boundary_mode);
    let (w, report) = problem.solve(&w_old, config)?;
    let u = exp_field(model, &w);
    for g in 0..u.len() {
        if model.is_active(g) && !(u[g] > 0.0 && u[g].is_finite()) {
            return Err(Error::NonPositive { node: g, value: u[g] });
        }
    }
    Ok(StepOutcome {
        state: ConformalState {
            mode: state.mode,
            time: new_time,
            u,
            step_count: state.step_count + 1,
            last_dt: dt,
            next_dt: state.next_dt,
        },
        newton: report,
    })
}

fn propose(dt: f64, iters: usize, config: &FlowConfig) -> f64 {
    let next = if iters > config.newton_max_iter {
        dt * config.safety_factor
    } else if iters <= 4 {
        dt * 1.25
    } else {
        dt
    };
    next.clamp(config.dt_floor(), config.dt_max)
}

/// Step-size controller: grow 1.25× after a cheap solve (≤ 4 iterations),
/// shrink by the safety factor after a failed one (more iterations than the
/// Newton limit), clamp to `[dt_initial·1e-4, dt_max]`.
pub fn adaptive_dt(state: &ConformalState, last_newton_iters: usize, config: &FlowConfig) -> f64 {
    propose(state.last_dt, last_newton_iters, config)
}

/// Per-step record of a run. Extremes are over the core region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRecord {
    pub time: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub min_r: f64,
    pub max_r: f64,
    pub total_curvature: f64,
    pub newton_iters: usize,
}

impl SeriesRecord {
    pub fn measure(model: &SurfaceModel, core: &[bool], state: &ConformalState, newton_iters: usize) -> Result<Self> {
        let w = log_field(model, &state.u)?;
        let r = curvature_from_log(model, &w);
        let mut rec = SeriesRecord {
            time: state.time,
            min_u: f64::INFINITY,
            max_u: f64::NEG_INFINITY,
            min_r: f64::INFINITY,
            max_r: f64::NEG_INFINITY,
            total_curvature: total_curvature_from_log(model, &w),
            newton_iters,
        };
        for g in (0..core.len()).filter(|&g| core[g]) {
            rec.min_u = rec.min_u.min(state.u[g]);
            rec.max_u = rec.max_u.max(state.u[g]);
            rec.min_r = rec.min_r.min(r[g]);
            rec.max_r = rec.max_r.max(r[g]);
        }
        Ok(rec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub state: ConformalState,
    pub potential: Option<PotentialState>,
}

/// Ordered snapshots plus the per-step series.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub snapshots: Vec<Snapshot>,
    pub series: Vec<SeriesRecord>,
    /// Newton tolerance the trajectory was computed with.
    pub newton_tol: f64,
    /// Largest step actually taken.
    pub max_dt: f64,
}

impl Trajectory {
    pub fn mode(&self) -> Option<FlowMode> {
        self.snapshots.first().map(|s| s.state.mode)
    }

    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.state.time).collect()
    }

    /// Snapshot closest in time to `t`.
    pub fn nearest(&self, t: f64) -> Option<&Snapshot> {
        self.snapshots
            .iter()
            .min_by(|a, b| (a.state.time - t).abs().total_cmp(&(b.state.time - t).abs()))
    }
}

/// A fatal step error together with everything integrated before it.
#[derive(Debug, thiserror::Error)]
#[error("run aborted at t = {time}: {source}")]
pub struct RunFailure {
    pub time: f64,
    #[source]
    pub source: Error,
    pub partial: Trajectory,
}

impl From<RunFailure> for Error {
    fn from(f: RunFailure) -> Self {
        f.source
    }
}

/// Integrates from `initial` to `config.t_end`, emitting a snapshot at the
/// start, at every scheduled time and at the end. Steps are shortened to land
/// on scheduled times exactly; the controller keeps its unclipped proposal.
pub fn run(
    model: &SurfaceModel,
    config: &FlowConfig,
    initial: &ConformalState,
) -> Result<Trajectory, Box<RunFailure>> {
    let start = Snapshot {
        state: initial.clone(),
        potential: None,
    };
    run_from(model, config, start)
}

/// As [`run`], continuing from a stored snapshot (including its potential).
pub fn run_from(
    model: &SurfaceModel,
    config: &FlowConfig,
    start: Snapshot,
) -> Result<Trajectory, Box<RunFailure>> {
    let t0 = start.state.time;
    let fail = |source: Error, traj: Trajectory, time: f64| {
        Box::new(RunFailure {
            time,
            source,
            partial: traj,
        })
    };
    let mut traj = Trajectory {
        newton_tol: config.newton_tol,
        ..Default::default()
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, traj, t0));
    }
    if start.state.mode != config.mode {
        return Err(fail(
            Error::WrongMode {
                expected: config.mode.name(),
            },
            traj,
            t0,
        ));
    }
    if let Err(e) = model.check_len(&start.state.u) {
        return Err(fail(e, traj, t0));
    }
    for &s in &config.snapshot_schedule {
        if !(s >= 0.0 && s <= config.t_end) {
            return Err(fail(
                Error::InvalidArgument(format!(
                    "snapshot time {s} lies outside [0, {}]",
                    config.t_end
                )),
                traj,
                t0,
            ));
        }
    }
    let mut schedule: Vec<f64> = config
        .snapshot_schedule
        .iter()
        .copied()
        .filter(|&s| s > t0)
        .collect();
    if config.t_end > t0 {
        schedule.push(config.t_end);
    }
    schedule.sort_by(f64::total_cmp);
    schedule.dedup();

    let core = model.core_mask(None);
    let track = config.track_potential && config.mode == FlowMode::Raw;
    let mut current = start;
    if track && current.potential.is_none() {
        match PotentialState::new(model, &current.state) {
            Ok(p) => current.potential = Some(p),
            Err(e) => return Err(fail(e, traj, t0)),
        }
    }
    if current.state.step_count == 0 && current.state.next_dt == 0.0 {
        current.state.next_dt = config.dt_initial;
    }
    match SeriesRecord::measure(model, &core, &current.state, 0) {
        Ok(r) => traj.series.push(r),
        Err(e) => return Err(fail(e, traj, t0)),
    }
    traj.snapshots.push(current.clone());

    for target in schedule {
        while current.state.time < target {
            let remaining = target - current.state.time;
            let mut proposal = if config.fixed_dt {
                config.dt_initial
            } else {
                let p = current.state.next_dt.clamp(config.dt_floor(), config.dt_max);
                match config.dt_relative {
                    Some(theta) => p.min((theta * current.state.time).max(config.dt_initial)),
                    None => p,
                }
            };
            let outcome = loop {
                // finish exactly on the target; avoid leaving a sliver behind
                let dt = if proposal >= remaining * (1.0 - 1e-12) || remaining - proposal < 1e-3 * proposal {
                    remaining
                } else {
                    proposal
                };
                match step(model, &current.state, dt, config) {
                    Ok(o) => break o,
                    Err(Error::NewtonDiverged { .. } | Error::LinearSolver { .. })
                        if !config.fixed_dt =>
                    {
                        proposal = dt * config.safety_factor;
                        if proposal < config.dt_floor() {
                            let t = current.state.time;
                            let floor = config.dt_floor();
                            return Err(fail(Error::StepFloor { time: t, floor }, traj, t));
                        }
                    }
                    Err(e) => {
                        let t = current.state.time;
                        return Err(fail(e, traj, t));
                    }
                }
            };
            let mut next = outcome.state;
            if next.time > target - 1e-12 * target.abs().max(1.0) {
                next.time = target;
            }
            next.next_dt = if config.fixed_dt {
                config.dt_initial
            } else {
                propose(proposal, outcome.newton.iterations, config)
            };
            traj.max_dt = traj.max_dt.max(next.last_dt);
            let potential = match (&current.potential, track) {
                (Some(p), true) => match evolve_potential(model, p, &current.state, &next) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        let t = current.state.time;
                        return Err(fail(e, traj, t));
                    }
                },
                _ => None,
            };
            match SeriesRecord::measure(model, &core, &next, outcome.newton.iterations) {
                Ok(r) => traj.series.push(r),
                Err(e) => {
                    let t = next.time;
                    return Err(fail(e, traj, t));
                }
            }
            current = Snapshot {
                state: next,
                potential,
            };
        }
        traj.snapshots.push(current.clone());
    }
    Ok(traj)
}

/// Raw run on `[0, 1]` followed by the switch to rescaled variables, the
/// standard way to start a rescaled run.
pub fn rescaled_start(model: &SurfaceModel, config: &FlowConfig) -> Result<ConformalState> {
    let raw = FlowConfig {
        mode: FlowMode::Raw,
        t_end: 1.0,
        snapshot_schedule: Vec::new(),
        track_potential: false,
        boundary_mode: match config.boundary_mode {
            BoundaryMode::Frozen => BoundaryMode::DirichletOne,
            b => b,
        },
        ..config.clone()
    };
    let traj = run(model, &raw, &ConformalState::initial(model, FlowMode::Raw)).map_err(|f| f.source)?;
    let last = traj.snapshots.last().expect("run emits a final snapshot");
    let mut s = last.state.to_rescaled()?;
    s.next_dt = config.dt_initial;
    Ok(s)
}

#[cfg(test)]
mod tests;
