use rayon::prelude::*;

use super::report::{CheckEntry, DiagnosticsReport, Series};
use super::solver_slack;
use crate::error::{Error, Result};
use crate::flow::{FlowMode, Trajectory};
use crate::surface::{scalar_curvature, total_curvature, SurfaceModel};

pub(crate) fn require_mode(traj: &Trajectory, mode: FlowMode) -> Result<()> {
    match traj.mode() {
        None => Err(Error::Trajectory("no snapshots".into())),
        Some(m) if m != mode => Err(Error::Trajectory(format!("needs a {} trajectory", mode.name()))),
        _ => Ok(()),
    }
}

fn masked(mask: &[bool]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(g, _)| g)
}

/// Least-squares slope of `min_K u(·, t)` against `t` over the second half
/// of the run.
pub fn lower_bound_slope(traj: &Trajectory, mask: &[bool]) -> f64 {
    let t_end = traj.snapshots.last().map_or(0.0, |s| s.state.time);
    let pts: Vec<(f64, f64)> = traj
        .snapshots
        .iter()
        .filter(|s| s.state.time >= 0.5 * t_end)
        .map(|s| {
            let m = masked(mask).map(|g| s.state.u[g]).fold(f64::INFINITY, f64::min);
            (s.state.time, m)
        })
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let mu = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mu)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    sxy / sxx
}

/// Linear bounds `C₁ ≤ u ≤ C₂(1+t)` calibrated on `t ≤ 1`, and the growth of
/// the minimum over the compact set `K` (the flat part of the core chart).
pub fn check_bounds(model: &SurfaceModel, traj: &Trajectory) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Raw)?;
    let t_end = traj.snapshots.last().map_or(0.0, |s| s.state.time);
    if t_end < 10.0 {
        return Err(Error::Trajectory(format!("bounds need t_end ≥ 10, got {t_end}")));
    }
    let core = model.core_mask(None);
    let early: Vec<_> = traj.snapshots.iter().filter(|s| s.state.time <= 1.0 + 1e-12).collect();
    if !early.iter().any(|s| (s.state.time - 1.0).abs() <= 1e-9) {
        return Err(Error::Trajectory("bounds calibration needs a snapshot at t = 1".into()));
    }
    let c1 = 0.5
        * early
            .iter()
            .flat_map(|s| masked(&core).map(move |g| s.state.u[g]))
            .fold(f64::INFINITY, f64::min);
    let c2 = 2.0
        * early
            .iter()
            .flat_map(|s| masked(&core).map(move |g| s.state.u[g] / (1.0 + s.state.time)))
            .fold(f64::NEG_INFINITY, f64::max);

    let mut low = (f64::INFINITY, None);
    let mut high = (f64::NEG_INFINITY, None);
    let mut series = Series::new("bounds", &["time", "min_u", "max_u", "c1", "c2_1pt"]);
    for s in &traj.snapshots {
        let t = s.state.time;
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        for g in masked(&core) {
            let u = s.state.u[g];
            mn = mn.min(u);
            mx = mx.max(u);
            if u / c1 < low.0 {
                low = (u / c1, Some((g, t)));
            }
            let r = u / (c2 * (1.0 + t));
            if r > high.0 {
                high = (r, Some((g, t)));
            }
        }
        series.rows.push(vec![t, mn, mx, c1, c2 * (1.0 + t)]);
    }

    let flat = model.flat_core_mask();
    let slope = lower_bound_slope(traj, &flat);
    let mut rep = DiagnosticsReport::default();
    rep.push(
        CheckEntry::new("bounds-lower", "u ≥ C₁, C₁ = ½·min_{t≤1} u")
            .worst(low.0, low.1)
            .tol(1.0)
            .pass_if(low.0 >= 1.0),
    );
    rep.push(
        CheckEntry::new("bounds-upper", "u ≤ C₂(1+t), C₂ = 2·max_{t≤1} u/(1+t)")
            .worst(high.0, high.1)
            .tol(1.0)
            .pass_if(high.0 <= 1.0),
    );
    rep.push(
        CheckEntry::new("bounds-core-slope", "d/dt min_K u > 0 at late times")
            .worst(slope, None)
            .pass_if(slope > 0.0),
    );
    rep.push(CheckEntry::new("bounds-c1", "calibrated C₁").worst(c1, None).info());
    rep.push(CheckEntry::new("bounds-c2", "calibrated C₂").worst(c2, None).info());
    rep.series.push(series);
    Ok(rep)
}

/// Per-node bound on `|∂²u/∂t²|` around snapshot pair `(i, i+1)`, from the
/// second divided differences of the neighbouring triples.
fn second_derivative_proxy(traj: &Trajectory, i: usize, mask: &[bool]) -> f64 {
    let s = &traj.snapshots;
    let triple = |k: usize| -> f64 {
        let (a, b, c) = (&s[k].state, &s[k + 1].state, &s[k + 2].state);
        let (t0, t1, t2) = (a.time, b.time, c.time);
        masked(mask)
            .map(|g| {
                let d1 = (b.u[g] - a.u[g]) / (t1 - t0);
                let d2 = (c.u[g] - b.u[g]) / (t2 - t1);
                (2.0 * (d2 - d1) / (t2 - t0)).abs()
            })
            .fold(0.0, f64::max)
    };
    let mut m: f64 = 0.0;
    if i >= 1 {
        m = m.max(triple(i - 1));
    }
    if i + 2 < s.len() {
        m = m.max(triple(i));
    }
    m
}

/// `(u(t₂) − u(t₁))/(t₂ − t₁) ≤ u(t₂)/t₂ + ε` on consecutive snapshots with
/// `t₁ > 0`, `ε = 10·newton_tol + 2·(t₂ − t₁)·max|∂²u/∂t²|`.
pub fn check_aronson_benilan(model: &SurfaceModel, traj: &Trajectory) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Raw)?;
    let core = model.core_mask(None);
    let s = &traj.snapshots;
    let pairs: Vec<usize> = (0..s.len().saturating_sub(1)).filter(|&i| s[i].state.time > 0.0).collect();
    if pairs.is_empty() {
        return Err(Error::Trajectory("no snapshot pair with t > 0".into()));
    }
    let base = solver_slack(traj);
    let per_pair: Vec<(f64, f64, usize, f64, usize)> = pairs
        .par_iter()
        .map(|&i| {
            let (a, b) = (&s[i].state, &s[i + 1].state);
            let dt = b.time - a.time;
            let eps = base + 2.0 * dt * second_derivative_proxy(traj, i, &core);
            let mut worst = (f64::NEG_INFINITY, 0usize);
            let mut violations = 0;
            for g in masked(&core) {
                let margin = (b.u[g] - a.u[g]) / dt - b.u[g] / b.time;
                if margin > eps {
                    violations += 1;
                }
                if margin - eps > worst.0 {
                    worst = (margin - eps, g);
                }
            }
            (worst.0, b.time, worst.1, eps, violations)
        })
        .collect();
    let worst = per_pair
        .iter()
        .copied()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("at least one pair");
    let violations: usize = per_pair.iter().map(|p| p.4).sum();
    let max_eps = per_pair.iter().map(|p| p.3).fold(0.0, f64::max);
    let mut series = Series::new("aronson_benilan", &["time", "worst_margin", "slack", "violations"]);
    for p in &per_pair {
        series.rows.push(vec![p.1, p.0 + p.3, p.3, p.4 as f64]);
    }
    let mut rep = DiagnosticsReport::default();
    rep.push(
        CheckEntry::new("aronson-benilan", "u_t ≤ u/t + ε")
            .worst(worst.0, Some((worst.2, worst.1)))
            .tol(max_eps)
            .pass_if(violations == 0),
    );
    rep.push(
        CheckEntry::new("aronson-benilan-violations", "count of nodes exceeding the slack")
            .worst(violations as f64, None)
            .info(),
    );
    rep.series.push(series);
    Ok(rep)
}

#[derive(Clone, Debug)]
pub struct CurvatureDecayOptions {
    /// Decay order used for exact ends, which decay faster than any power.
    pub exact_order: f64,
    /// Envelope growth factor tolerated across the window.
    pub flatness: f64,
    /// Level below which `|R|` counts as solver noise.
    pub noise: f64,
}

impl Default for CurvatureDecayOptions {
    fn default() -> Self {
        Self {
            exact_order: 1.0,
            flatness: 3.0,
            noise: 1e-6,
        }
    }
}

/// Envelope `sup_θ |R(ρ,θ,t)|·e^{(2+τ)αρ}` on each end, over rows from one
/// unit past the removed disk out to half the truncation radius. The check
/// asserts the envelope does not grow outward: its maximum over the outer half
/// of the window stays within `flatness` of its maximum over the inner half.
pub fn check_curvature_decay(
    model: &SurfaceModel,
    traj: &Trajectory,
    opts: &CurvatureDecayOptions,
) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Raw)?;
    let r_cut = model.spec().map_or(crate::surface::DEFAULT_R_CUT, |s| s.r_cut);
    let rho_a = -r_cut.ln() + 1.0;
    let per_snap: Vec<Result<Vec<(usize, f64, f64, f64, f64, f64)>>> = traj
        .snapshots
        .par_iter()
        .map(|s| {
            let r = scalar_curvature(model, &s.state.u)?;
            let mut out = Vec::new();
            for (j, e) in model.ends().iter().enumerate() {
                let ci = model.end_chart(j);
                let c = &model.charts()[ci];
                let order = if e.perturbation_amp != 0.0 { e.order_tau } else { opts.exact_order };
                let rho_b = 0.5 * e.rho_max;
                // rows below the noise level carry no decay information and
                // would blow up under the exponential weight
                let mut env = Vec::new();
                let mut noise_from = f64::NAN;
                for row in 0..c.resolution[1] {
                    let rho = c.origin[1] + row as f64 * c.spacing[1];
                    if rho < rho_a || rho > rho_b {
                        continue;
                    }
                    let sup = (0..c.resolution[0])
                        .map(|i| r[c.offset + c.local(i, row)].abs())
                        .fold(0.0, f64::max);
                    if sup > opts.noise {
                        noise_from = f64::NAN;
                        env.push(sup * ((2.0 + order) * e.angle_alpha * rho).exp());
                    } else if noise_from.is_nan() {
                        noise_from = rho;
                    }
                }
                let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
                let half = env.len() / 2;
                let (inner, outer) = if env.len() < 2 { (max(&env), 0.0) } else { (max(&env[..half]), max(&env[half..])) };
                let spread = if env.is_empty() { 1.0 } else { max(&env) / env.iter().copied().fold(f64::INFINITY, f64::min) };
                out.push((j, s.state.time, inner, outer, spread, noise_from));
            }
            Ok(out)
        })
        .collect();
    let mut rep = DiagnosticsReport::default();
    let mut series = Series::new("curvature_envelope", &["time", "end", "inner_max", "outer_max", "spread", "noise_from_rho"]);
    let mut worst = (0.0f64, None);
    let mut quiet = (f64::NEG_INFINITY, None);
    for snap in per_snap {
        for (j, t, inner, outer, spread, noise_from) in snap? {
            series.rows.push(vec![t, j as f64, inner, outer, spread, noise_from]);
            let ratio = if outer == 0.0 { 0.0 } else { outer / inner };
            if ratio > worst.0 {
                worst = (ratio, Some((j, t)));
            }
            if model.ends()[j].perturbation_amp == 0.0 && noise_from > quiet.0 {
                quiet = (noise_from, Some((j, t)));
            }
        }
    }
    rep.push(
        CheckEntry::new("curvature-decay", "sup_θ|R|·e^{(2+τ)αρ} bounded in ρ on each end")
            .worst(worst.0, worst.1)
            .tol(opts.flatness)
            .pass_if(worst.0 <= opts.flatness),
    );
    if quiet.1.is_some() {
        rep.push(
            CheckEntry::new("curvature-quiet-radius", "largest ρ beyond which |R| ≤ noise on exact ends")
                .worst(quiet.0, quiet.1)
                .tol(opts.noise)
                .info(),
        );
    }
    rep.series.push(series);
    Ok(rep)
}

/// Sign preservation (gauged runs), conservation of `Σ R dA`, and, when the
/// potential was tracked, monotonicity of `max h` and `sup R ≤ max h(0)`.
pub fn check_sign_and_conservation(
    model: &SurfaceModel,
    traj: &Trajectory,
    gauged: bool,
    conservation_tol: f64,
) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Raw)?;
    let core = model.core_mask(None);
    let eps = solver_slack(traj);
    let per: Vec<Result<(f64, f64, usize, f64, Option<f64>)>> = traj
        .snapshots
        .par_iter()
        .map(|s| {
            let r = scalar_curvature(model, &s.state.u)?;
            let (mut mx, mut at) = (f64::NEG_INFINITY, 0);
            for g in masked(&core) {
                if r[g] > mx {
                    mx = r[g];
                    at = g;
                }
            }
            let total = total_curvature(model, &s.state.u)?;
            let hmax = s
                .potential
                .as_ref()
                .map(|p| masked(&core).map(|g| p.h[g]).fold(f64::NEG_INFINITY, f64::max));
            Ok((s.state.time, mx, at, total, hmax))
        })
        .collect();
    let per: Vec<_> = per.into_iter().collect::<Result<_>>()?;
    let total0 = per[0].3;
    let mut rep = DiagnosticsReport::default();
    let mut series = Series::new("sign_conservation", &["time", "max_r", "total_curvature", "max_h"]);
    for p in &per {
        series.rows.push(vec![p.0, p.1, p.3, p.4.unwrap_or(f64::NAN)]);
    }

    let sign_worst = per.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty");
    let sign = CheckEntry::new("sign-preservation", "R(0) ≤ 0 ⇒ max R(t) ≤ ε")
        .worst(sign_worst.1, Some((sign_worst.2, sign_worst.0)))
        .tol(eps);
    rep.push(if gauged { sign.pass_if(sign_worst.1 <= eps) } else { sign.info() });

    let drift = per
        .iter()
        // unit floor: a flat model has zero total curvature
        .map(|p| ((p.3 - total0) / total0.abs().max(1.0), p.0))
        .max_by(|a, b| a.0.abs().total_cmp(&b.0.abs()))
        .expect("nonempty");
    rep.push(
        CheckEntry::new("conservation", "|ΣR dA(t) − ΣR dA(0)| / max(|ΣR dA(0)|, 1)")
            .worst(drift.0.abs(), Some((0, drift.1)))
            .tol(conservation_tol)
            .pass_if(drift.0.abs() <= conservation_tol),
    );

    if per.iter().all(|p| p.4.is_some()) {
        let h: Vec<f64> = per.iter().map(|p| p.4.expect("checked")).collect();
        let mut rise = (f64::NEG_INFINITY, 0.0);
        for k in 1..h.len() {
            if h[k] - h[k - 1] > rise.0 {
                rise = (h[k] - h[k - 1], per[k].0);
            }
        }
        rep.push(
            CheckEntry::new("h-monotone", "max h(t) nonincreasing")
                .worst(rise.0, Some((0, rise.1)))
                .tol(eps)
                .pass_if(rise.0 <= eps),
        );
        let excess = per
            .iter()
            .map(|p| (p.1 - h[0], p.0, p.2))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .expect("nonempty");
        rep.push(
            CheckEntry::new("curvature-bound-by-h", "sup R(t) ≤ max h(0) + ε")
                .worst(excess.0, Some((excess.2, excess.1)))
                .tol(eps)
                .pass_if(excess.0 <= eps),
        );
    } else {
        rep.push(CheckEntry::new("h-monotone", "potential not tracked").info());
    }
    rep.series.push(series);
    Ok(rep)
}
