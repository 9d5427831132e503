use std::fs;
use std::path::{Path, PathBuf};

use crate::diagnostics::{
    check_aronson_benilan, check_bounds, check_convergence, check_curvature_decay, check_harnack, check_rescaled,
    check_sign_and_conservation, sample_harnack_pairs, CheckEntry, ConvergenceOptions, CurvatureDecayOptions,
    DiagnosticsReport,
};
use crate::elliptic::{gauge_nonpositive, solve_potential, uniformize_oracle, OracleSolution};
use crate::error::{Error, Result};
use crate::flow::{rescaled_start, run, run_from, ConformalState, FlowMode, SeriesRecord, Trajectory};
use crate::surface::SurfaceModel;

use super::config::{parse_config, CheckKind, ExperimentConfig};
use super::store::{self, Manifest, Meta};

pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.cric";
pub const SERIES_FILE: &str = "series.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const TRAJECTORY_FILE: &str = "trajectory.meta";
pub const ORACLE_FILE: &str = "oracle.cric";
pub const ORACLE_REPORT: &str = "oracle.txt";

/// What a command left behind.
#[derive(Debug)]
pub struct Outcome {
    pub directory: PathBuf,
    pub report: DiagnosticsReport,
    /// Set when integration stopped early; partial output is on disk.
    pub failure: Option<String>,
    /// Nothing was recomputed (resume of a finished run).
    pub no_op: bool,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.report.passed()
    }
}

/// Changes accepted by [`resume`].
#[derive(Clone, Debug, Default)]
pub struct ResumeOverrides {
    pub t_end: Option<f64>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config(&fs::read_to_string(path)?)
}

fn model_arrays(model: &SurfaceModel) -> [&[f64]; 4] {
    [
        model.background_log_factor(),
        model.background_curvature(),
        model.cell_weights(),
        model.partition(),
    ]
}

/// Initial state for the configured mode: `u = 1` or the gauged factor in
/// raw mode, the rescaled state at `τ = 0` otherwise.
pub fn initial_state(model: &SurfaceModel, cfg: &ExperimentConfig) -> Result<ConformalState> {
    let flow = cfg.flow_config();
    match flow.mode {
        FlowMode::Rescaled => rescaled_start(model, &flow),
        FlowMode::Raw if cfg.flow.gauge => {
            let psi = gauge_nonpositive(model)?;
            let u = psi.iter().map(|p| (2.0 * p).exp()).collect();
            ConformalState::from_field(model, FlowMode::Raw, 0.0, u)
        }
        FlowMode::Raw => Ok(ConformalState::initial(model, FlowMode::Raw)),
    }
}

/// Runs every configured check on a stored trajectory.
pub fn evaluate(
    model: &SurfaceModel,
    cfg: &ExperimentConfig,
    traj: &Trajectory,
    oracle: Option<&[f64]>,
) -> Result<DiagnosticsReport> {
    let d = &cfg.diagnostics;
    let mut report = DiagnosticsReport::default();
    for kind in cfg.checks() {
        let part = match kind {
            CheckKind::Bounds => check_bounds(model, traj)?,
            CheckKind::AronsonBenilan => check_aronson_benilan(model, traj)?,
            CheckKind::CurvatureDecay => check_curvature_decay(model, traj, &CurvatureDecayOptions::default())?,
            CheckKind::SignConservation => check_sign_and_conservation(model, traj, cfg.flow.gauge, d.conservation_tol)?,
            CheckKind::Rescaled => check_rescaled(model, traj)?,
            CheckKind::Harnack => {
                let pairs = sample_harnack_pairs(model, traj, d.harnack_pairs, d.harnack_seed);
                check_harnack(model, traj, &pairs)?
            }
            CheckKind::Convergence => {
                let oracle = oracle.ok_or_else(|| Error::Trajectory("convergence check needs the oracle".into()))?;
                let opts = ConvergenceOptions {
                    error_threshold: d.error_threshold,
                    curvature_threshold: d.curvature_threshold,
                    kappa_samples: d.kappa_samples,
                    seed: d.kappa_seed,
                    ..Default::default()
                };
                check_convergence(model, traj, oracle, &opts)?
            }
            CheckKind::InjectedFault => {
                let mut r = DiagnosticsReport::default();
                r.push(
                    CheckEntry::new("injected-fault", "deliberate failure")
                        .pass_if(false)
                        .worst(1.0, None),
                );
                r
            }
        };
        report.merge(part);
    }
    Ok(report)
}

fn oracle_text(model: &SurfaceModel, sol: &OracleSolution) -> Result<String> {
    let mut s = format!(
        "residual = {:e}\nnewton_iterations = {}\nshift_updates = {}\n",
        sol.residual,
        sol.history.len(),
        sol.shift_updates
    );
    for (j, shift) in sol.shifts.iter().enumerate() {
        s.push_str(&format!("end {j} cusp_shift = {shift}\n"));
    }
    // asymptotics of the background potential Δ₀f₀ = R₀
    if !model.ends().is_empty() {
        let (_, asym) = solve_potential(model, model.background_curvature())?;
        for j in 0..model.ends().len() {
            s.push_str(&format!(
                "end {j} beta = {} gamma = {}\n",
                asym.beta[j], asym.gamma[j]
            ));
        }
        s.push_str(&format!(
            "potential_residual = {:e}\ncompatibility_defect = {:e}\n",
            asym.residual, asym.compatibility_defect
        ));
    }
    Ok(s)
}

fn write_oracle(dir: &Path, model: &SurfaceModel, sol: &OracleSolution) -> Result<()> {
    store::write_arrays(&dir.join(ORACLE_FILE), &[&sol.u, &sol.shifts])?;
    fs::write(dir.join(ORACLE_REPORT), oracle_text(model, sol)?)?;
    Ok(())
}

fn read_oracle(dir: &Path) -> Result<Vec<f64>> {
    let path = dir.join(ORACLE_FILE);
    let mut a = store::read_arrays(&path)?;
    if a.len() != 2 {
        return Err(Error::Snapshot {
            path,
            message: "expected oracle field and shifts".into(),
        });
    }
    Ok(a.swap_remove(0))
}

fn decimate(series: &[SeriesRecord], first_step: u64, every: usize) -> Vec<SeriesRecord> {
    series
        .iter()
        .enumerate()
        .filter(|(i, _)| (first_step + *i as u64) % every as u64 == 0)
        .map(|(_, r)| r.clone())
        .collect()
}

fn files_of(dir: &Path, n_snapshots: usize, report: &DiagnosticsReport, oracle: bool) -> Vec<String> {
    let mut files: Vec<String> = [CONFIG_FILE, MODEL_FILE, SERIES_FILE, TRAJECTORY_FILE, REPORT_FILE]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..n_snapshots {
        let stem = store::snapshot_stem(i);
        files.push(format!("{stem}.cric"));
        files.push(format!("{stem}.meta"));
    }
    for s in &report.series {
        files.push(format!("diag_{}.csv", s.name));
    }
    if oracle {
        files.push(ORACLE_FILE.into());
        files.push(ORACLE_REPORT.into());
    }
    files.retain(|f| dir.join(f).exists());
    files
}

fn write_report(dir: &Path, report: &DiagnosticsReport, failure: Option<&str>) -> Result<()> {
    let mut text = report.to_text();
    if let Some(f) = failure {
        text.push_str(&format!("run-aborted fail [{f}]\n"));
    }
    text.push_str(&format!("overall {}\n", if failure.is_none() && report.passed() { "pass" } else { "fail" }));
    fs::write(dir.join(REPORT_FILE), text)?;
    for s in &report.series {
        store::write_table(&dir.join(format!("diag_{}.csv", s.name)), s)?;
    }
    Ok(())
}

fn write_trajectory_meta(dir: &Path, traj: &Trajectory, passed: bool) -> Result<()> {
    let mut meta = Meta::new();
    meta.insert("newton_tol".into(), traj.newton_tol.to_string());
    meta.insert("max_dt".into(), traj.max_dt.to_string());
    meta.insert("passed".into(), passed.to_string());
    store::write_meta(&dir.join(TRAJECTORY_FILE), &meta)
}

fn finish(
    dir: &Path,
    model: &SurfaceModel,
    cfg: &ExperimentConfig,
    traj: &Trajectory,
    failure: Option<String>,
    oracle: Option<&[f64]>,
) -> Result<Outcome> {
    let (report, error) = match failure {
        None => match evaluate(model, cfg, traj, oracle) {
            Ok(r) => (r, None),
            Err(e) => (DiagnosticsReport::default(), Some(e)),
        },
        Some(_) => (DiagnosticsReport::default(), None),
    };
    let note = error.as_ref().map(|e| format!("diagnostics error: {e}"));
    write_report(dir, &report, failure.as_deref().or(note.as_deref()))?;
    let passed = failure.is_none() && error.is_none() && report.passed();
    write_trajectory_meta(dir, traj, passed)?;
    let files = files_of(dir, traj.snapshots.len(), &report, oracle.is_some());
    Manifest::collect(dir, &files, traj.snapshots.len(), failure.is_none())?.write(dir)?;
    if let Some(e) = error {
        return Err(e);
    }
    Ok(Outcome {
        directory: dir.to_path_buf(),
        report,
        failure,
        no_op: false,
    })
}

/// Keeps only what the last snapshot can reproduce, so a resume continues
/// exactly where the stored state stops.
fn trim_to_last_snapshot(traj: &mut Trajectory) {
    if let (Some(first), Some(last)) = (traj.snapshots.first(), traj.snapshots.last()) {
        let keep = (last.state.step_count - first.state.step_count) as usize + 1;
        traj.series.truncate(keep);
    }
}

/// Builds the model, integrates, checks, and writes everything under
/// `dir` (the configured directory when `None`). Integration failures are
/// reported in the outcome with partial output kept; other errors abort.
pub fn run_experiment(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Outcome> {
    let dir = dir.map_or_else(|| PathBuf::from(&cfg.output.directory), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    if dir.join(store::MANIFEST).exists() {
        fs::remove_file(dir.join(store::MANIFEST))?;
    }
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let model = cfg.model.build()?;
    store::write_arrays(&dir.join(MODEL_FILE), &model_arrays(&model))?;

    let oracle = if cfg.checks().contains(&CheckKind::Convergence) {
        let sol = uniformize_oracle(&model)?;
        write_oracle(&dir, &model, &sol)?;
        Some(sol.u)
    } else {
        None
    };

    let initial = initial_state(&model, cfg)?;
    let (mut traj, failure) = match run(&model, &cfg.flow_config(), &initial) {
        Ok(t) => (t, None),
        Err(f) => {
            let msg = f.to_string();
            (f.partial, Some(msg))
        }
    };
    trim_to_last_snapshot(&mut traj);
    for (i, s) in traj.snapshots.iter().enumerate() {
        store::save_snapshot(&dir, i, s)?;
    }
    store::write_series(&dir.join(SERIES_FILE), &decimate(&traj.series, 0, cfg.output.csv_every))?;
    finish(&dir, &model, cfg, &traj, failure, oracle.as_deref())
}

fn verified_model(dir: &Path, cfg: &ExperimentConfig) -> Result<SurfaceModel> {
    let model = cfg.model.build()?;
    let stored = store::read_arrays(&dir.join(MODEL_FILE))?;
    let current = model_arrays(&model);
    let same = stored.len() == current.len()
        && stored
            .iter()
            .zip(current)
            .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    if !same {
        return Err(Error::Snapshot {
            path: dir.join(MODEL_FILE),
            message: "stored model differs from the one the config builds".into(),
        });
    }
    Ok(model)
}

fn load_trajectory(dir: &Path, manifest: &Manifest) -> Result<Trajectory> {
    let meta_path = dir.join(TRAJECTORY_FILE);
    let meta = store::read_meta(&meta_path)?;
    let num = |k: &str| -> Result<f64> {
        meta.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Snapshot {
            path: meta_path.clone(),
            message: format!("missing or bad {k}"),
        })
    };
    Ok(Trajectory {
        snapshots: (0..manifest.snapshots)
            .map(|i| store::load_snapshot(dir, i))
            .collect::<Result<_>>()?,
        series: store::read_series(&dir.join(SERIES_FILE))?,
        newton_tol: num("newton_tol")?,
        max_dt: num("max_dt")?,
    })
}

/// Opens an output directory after checking its manifest and checksums.
pub fn open(dir: &Path) -> Result<(ExperimentConfig, SurfaceModel, Manifest, Trajectory)> {
    let manifest = Manifest::read(dir)?;
    manifest.verify(dir)?;
    let cfg = load_config(&dir.join(CONFIG_FILE))?;
    let model = verified_model(dir, &cfg)?;
    let traj = load_trajectory(dir, &manifest)?;
    if traj.snapshots.is_empty() {
        return Err(Error::Trajectory("no snapshots to resume from".into()));
    }
    Ok((cfg, model, manifest, traj))
}

fn stored_outcome(dir: &Path, passed: bool) -> Outcome {
    let mut report = DiagnosticsReport::default();
    if !passed {
        report.push(CheckEntry::new("stored-result", "earlier run failed").pass_if(false));
    }
    Outcome {
        directory: dir.to_path_buf(),
        report,
        failure: None,
        no_op: true,
    }
}

/// Continues a run from its last snapshot. With nothing left to integrate
/// the directory is left untouched.
pub fn resume(dir: &Path, overrides: &ResumeOverrides) -> Result<Outcome> {
    let (mut cfg, model, manifest, mut traj) = open(dir)?;
    if let Some(t) = overrides.t_end {
        cfg.flow.t_end = t;
        cfg.validate_standalone()?;
    }
    let last = traj.snapshots.last().expect("checked nonempty").clone();
    if manifest.complete && last.state.time >= cfg.flow.t_end {
        let meta = store::read_meta(&dir.join(TRAJECTORY_FILE))?;
        return Ok(stored_outcome(dir, meta.get("passed").is_some_and(|v| v == "true")));
    }
    if last.state.time > cfg.flow.t_end {
        return Err(Error::InvalidArgument(format!(
            "run already reached {} beyond t_end {}",
            last.state.time, cfg.flow.t_end
        )));
    }
    fs::remove_file(dir.join(store::MANIFEST))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let oracle = if cfg.checks().contains(&CheckKind::Convergence) {
        Some(read_oracle(dir)?)
    } else {
        None
    };

    let first_step = last.state.step_count;
    let (more, failure) = match run_from(&model, &cfg.flow_config(), last) {
        Ok(t) => (t, None),
        Err(f) => {
            let msg = f.to_string();
            (f.partial, Some(msg))
        }
    };
    let mut more = more;
    trim_to_last_snapshot(&mut more);
    // both ends of the seam are already stored
    let offset = traj.snapshots.len() - 1;
    for (i, s) in more.snapshots.iter().enumerate().skip(1) {
        store::save_snapshot(dir, offset + i, s)?;
    }
    let new_rows = decimate(more.series.get(1..).unwrap_or(&[]), first_step + 1, cfg.output.csv_every);
    traj.series.extend(new_rows);
    traj.snapshots.extend(more.snapshots.into_iter().skip(1));
    traj.max_dt = traj.max_dt.max(more.max_dt);
    store::write_series(&dir.join(SERIES_FILE), &traj.series)?;
    finish(dir, &model, &cfg, &traj, failure, oracle.as_deref())
}

/// Re-runs the diagnostics of a finished directory and rewrites the report.
pub fn check(dir: &Path) -> Result<Outcome> {
    let (cfg, model, manifest, traj) = open(dir)?;
    if !manifest.complete {
        return Err(Error::Trajectory("run is incomplete; resume it first".into()));
    }
    let oracle = if cfg.checks().contains(&CheckKind::Convergence) {
        Some(read_oracle(dir)?)
    } else {
        None
    };
    fs::remove_file(dir.join(store::MANIFEST))?;
    finish(dir, &model, &cfg, &traj, None, oracle.as_deref())
}

/// Solves for the uniformizer only and writes it with its report.
pub fn oracle(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<OracleSolution> {
    let dir = dir.map_or_else(|| PathBuf::from(&cfg.output.directory), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;
    let model = cfg.model.build()?;
    store::write_arrays(&dir.join(MODEL_FILE), &model_arrays(&model))?;
    let sol = uniformize_oracle(&model)?;
    write_oracle(&dir, &model, &sol)?;
    Ok(sol)
}
