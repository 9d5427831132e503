use std::collections::HashMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checks::require_mode;
use super::report::{CheckEntry, DiagnosticsReport, Series};
use super::solver_slack;
use crate::error::{Error, Result};
use crate::flow::{FlowMode, Trajectory};
use crate::surface::{scalar_curvature, DistanceGraph, SurfaceModel};

fn masked(mask: &[bool]) -> impl Iterator<Item = usize> + '_ {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(g, _)| g)
}

fn snapshot_at(traj: &Trajectory, tau: f64) -> Result<usize> {
    traj.snapshots
        .iter()
        .position(|s| (s.state.time - tau).abs() <= 1e-9 * tau.abs().max(1.0))
        .ok_or_else(|| Error::Trajectory(format!("no snapshot at τ = {tau}")))
}

/// Node of the core chart nearest to a point of the torus.
fn core_node(model: &SurfaceModel, x: [f64; 2]) -> usize {
    let c = &model.charts()[0];
    let n = c.resolution;
    let i = ((x[0].rem_euclid(1.0) / c.spacing[0]).round() as usize) % n[0];
    let j = ((x[1].rem_euclid(1.0) / c.spacing[1]).round() as usize) % n[1];
    c.offset + c.local(i, j)
}

/// Pointwise statements along a rescaled run: `ũ` nonincreasing, `R̃ ≥ −1`,
/// a point where `ũ` stays bounded below, and a uniform curvature bound on
/// the core.
pub fn check_rescaled(model: &SurfaceModel, traj: &Trajectory) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Rescaled)?;
    let core = model.core_mask(None);
    let eps = solver_slack(traj);
    let s = &traj.snapshots;

    let mut rise = (f64::NEG_INFINITY, None);
    let mut rises = 0usize;
    for k in 1..s.len() {
        let (a, b) = (&s[k - 1].state.u, &s[k].state.u);
        for g in 0..a.len() {
            if !model.is_active(g) {
                continue;
            }
            let d = b[g] - a[g];
            if d > eps {
                rises += 1;
            }
            if d > rise.0 {
                rise = (d, Some((g, s[k].state.time)));
            }
        }
    }

    let curv: Vec<Vec<f64>> = s
        .par_iter()
        .map(|sn| scalar_curvature(model, &sn.state.u))
        .collect::<Result<_>>()?;
    let mut floor = (f64::INFINITY, None);
    let mut local = (0.0f64, None);
    let mut inf_u = vec![f64::INFINITY; model.num_nodes()];
    let mut series = Series::new("rescaled", &["time", "min_r", "max_abs_r", "min_u", "max_u"]);
    for (sn, r) in s.iter().zip(&curv) {
        let t = sn.state.time;
        let (mut mn, mut mabs, mut umin, mut umax) = (f64::INFINITY, 0.0f64, f64::INFINITY, 0.0f64);
        for g in masked(&core) {
            if r[g] < floor.0 {
                floor = (r[g], Some((g, t)));
            }
            if r[g].abs() > local.0 {
                local = (r[g].abs(), Some((g, t)));
            }
            mn = mn.min(r[g]);
            mabs = mabs.max(r[g].abs());
            umin = umin.min(sn.state.u[g]);
            umax = umax.max(sn.state.u[g]);
            inf_u[g] = inf_u[g].min(sn.state.u[g]);
        }
        series.rows.push(vec![t, mn, mabs, umin, umax]);
    }
    let (best_node, best) = masked(&core)
        .map(|g| (g, inf_u[g]))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or((0, f64::NAN));

    let mut rep = DiagnosticsReport::default();
    rep.push(
        CheckEntry::new("rescaled-monotone", "ũ(τ₂) ≤ ũ(τ₁) + ε")
            .worst(rise.0, rise.1)
            .tol(eps)
            .pass_if(rises == 0),
    );
    rep.push(
        CheckEntry::new("rescaled-curvature-floor", "R̃ ≥ −1 − ε")
            .worst(floor.0 + 1.0, floor.1)
            .tol(eps)
            .pass_if(floor.0 >= -1.0 - eps),
    );
    rep.push(
        CheckEntry::new("rescaled-point-lower-bound", "max_x inf_τ ũ(x, τ) > 0")
            .worst(best, Some((best_node, f64::NAN)))
            .pass_if(best > 0.0),
    );
    rep.push(
        CheckEntry::new("rescaled-local-curvature", "sup_τ max_core |R̃| < ∞")
            .worst(local.0, local.1)
            .pass_if(local.0.is_finite()),
    );
    rep.series.push(series);
    Ok(rep)
}

/// A space-time pair for the Harnack calibration, given in torus
/// coordinates so it can be replayed on another resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HarnackPair {
    pub x1: [f64; 2],
    pub tau1: f64,
    pub x2: [f64; 2],
    pub tau2: f64,
}

/// `count` pairs with both points on the flat core and `1 ≤ τ₁ < τ₂` drawn
/// from the snapshot times, deterministic in `seed`.
pub fn sample_harnack_pairs(model: &SurfaceModel, traj: &Trajectory, count: usize, seed: u64) -> Vec<HarnackPair> {
    let flat = model.flat_core_mask();
    let times: Vec<f64> = traj.times().into_iter().filter(|&t| t >= 1.0).collect();
    if times.len() < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |rng: &mut ChaCha8Rng| loop {
        let x = [rng.gen::<f64>(), rng.gen::<f64>()];
        if flat[core_node(model, x)] {
            return x;
        }
    };
    (0..count)
        .map(|_| {
            let a = rng.gen_range(0..times.len() - 1);
            let b = rng.gen_range(a + 1..times.len());
            HarnackPair {
                x1: point(&mut rng),
                tau1: times[a],
                x2: point(&mut rng),
                tau2: times[b],
            }
        })
        .collect()
}

/// The constant `Ĉ` making the Harnack inequality an equality for one pair,
/// with the path energy replaced by `d(x₁,x₂,τ₁)²/(τ₂−τ₁)`. `None` when
/// `R̃(x₁,τ₁) + 1 ≤ 0`; `+∞` when `R̃(x₂,τ₂) + 1 ≤ 0`.
pub fn harnack_constant(
    model: &SurfaceModel,
    graph: &DistanceGraph,
    r1: &[f64],
    r2: &[f64],
    pair: &HarnackPair,
) -> Result<Option<f64>> {
    let dtau = pair.tau2 - pair.tau1;
    if !(dtau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Harnack pair needs τ₂ > τ₁, got {} and {}",
            pair.tau1, pair.tau2
        )));
    }
    let (n1, n2) = (core_node(model, pair.x1), core_node(model, pair.x2));
    let a = r1[n1] + 1.0;
    if !(a > 0.0) {
        return Ok(None);
    }
    let b = r2[n2] + 1.0;
    if !(b > 0.0) {
        return Ok(Some(f64::INFINITY));
    }
    let d = graph.distance(n1, n2)?;
    let energy = d * d / dtau;
    Ok(Some(((a / b).ln() - 0.25 * energy) / dtau))
}

/// Largest `Ĉ` over the pairs; skipped pairs are counted.
pub fn check_harnack(model: &SurfaceModel, traj: &Trajectory, pairs: &[HarnackPair]) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Rescaled)?;
    for p in pairs {
        if !(p.tau2 > p.tau1) {
            return Err(Error::InvalidArgument(format!(
                "Harnack pair needs τ₂ > τ₁, got {} and {}",
                p.tau1, p.tau2
            )));
        }
    }
    let mut idx: Vec<usize> = Vec::new();
    for p in pairs {
        idx.push(snapshot_at(traj, p.tau1)?);
        idx.push(snapshot_at(traj, p.tau2)?);
    }
    idx.sort_unstable();
    idx.dedup();
    let curv: HashMap<usize, Vec<f64>> = idx
        .par_iter()
        .map(|&k| Ok((k, scalar_curvature(model, &traj.snapshots[k].state.u)?)))
        .collect::<Result<_>>()?;
    let mut sources: Vec<usize> = pairs.iter().map(|p| snapshot_at(traj, p.tau1)).collect::<Result<_>>()?;
    sources.sort_unstable();
    sources.dedup();
    let graphs: HashMap<usize, DistanceGraph> = sources
        .par_iter()
        .map(|&k| Ok((k, DistanceGraph::new(model, &traj.snapshots[k].state.u)?)))
        .collect::<Result<_>>()?;

    let values: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|p| {
            let (k1, k2) = (snapshot_at(traj, p.tau1)?, snapshot_at(traj, p.tau2)?);
            harnack_constant(model, &graphs[&k1], &curv[&k1], &curv[&k2], p)
        })
        .collect::<Result<_>>()?;
    let mut series = Series::new("harnack", &["tau1", "tau2", "c_hat"]);
    let mut worst = (f64::NEG_INFINITY, None);
    let mut skipped = 0usize;
    for (p, v) in pairs.iter().zip(&values) {
        match v {
            None => {
                skipped += 1;
                series.rows.push(vec![p.tau1, p.tau2, f64::NAN]);
            }
            Some(c) => {
                series.rows.push(vec![p.tau1, p.tau2, *c]);
                if *c > worst.0 {
                    worst = (*c, Some((core_node(model, p.x2), p.tau2)));
                }
            }
        }
    }
    let mut rep = DiagnosticsReport::default();
    rep.push(
        CheckEntry::new("harnack-constant", "R̃₂+1 ≥ e^{−Δ/4 − Ĉ(τ₂−τ₁)}(R̃₁+1), max Ĉ finite")
            .worst(worst.0, worst.1)
            .pass_if(worst.0.is_finite()),
    );
    rep.push(
        CheckEntry::new("harnack-skipped", "pairs with R̃(x₁,τ₁) + 1 ≤ 0")
            .worst(skipped as f64, None)
            .info(),
    );
    rep.series.push(series);
    Ok(rep)
}

#[derive(Clone, Debug)]
pub struct ConvergenceOptions {
    /// Threshold on `‖ũ − Ũ‖∞/‖Ũ‖∞` (core) at the final time.
    pub error_threshold: f64,
    /// Threshold on `‖R̃ + 1‖∞` (core) at the final time.
    pub curvature_threshold: f64,
    /// Accepted range of the core area as a fraction of `4πk`.
    pub area_range: [f64; 2],
    pub kappa_radius: f64,
    pub kappa_min: f64,
    pub kappa_samples: usize,
    pub seed: u64,
    /// Minimum final time.
    pub tau_min: f64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        Self {
            error_threshold: 0.02,
            curvature_threshold: 0.05,
            area_range: [0.8, 1.0],
            kappa_radius: 0.5,
            kappa_min: 1.0,
            kappa_samples: 16,
            seed: 7,
            tau_min: 8.0,
        }
    }
}

fn nonincreasing_excess(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0].abs().max(1e-300))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Distance of `ũ(τ)` and `R̃(τ)` from the uniformizer on the core,
/// κ-noncollapsing of small balls, and the core area against `4πk`.
pub fn check_convergence(
    model: &SurfaceModel,
    traj: &Trajectory,
    oracle: &[f64],
    opts: &ConvergenceOptions,
) -> Result<DiagnosticsReport> {
    require_mode(traj, FlowMode::Rescaled)?;
    model.check_len(oracle)?;
    let tau_end = traj.snapshots.last().map_or(0.0, |s| s.state.time);
    if tau_end < opts.tau_min {
        return Err(Error::Trajectory(format!(
            "convergence needs τ_end ≥ {}, got {tau_end}",
            opts.tau_min
        )));
    }
    let core = model.core_mask(None);
    let area_w = model.area_weights();
    let oracle_max = masked(&core).map(|g| oracle[g].abs()).fold(0.0, f64::max);

    let flat = model.flat_core_mask();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centers: Vec<usize> = (0..opts.kappa_samples)
        .map(|_| loop {
            let g = core_node(model, [rng.gen(), rng.gen()]);
            if flat[g] {
                break g;
            }
        })
        .collect();

    let rows: Vec<[f64; 5]> = traj
        .snapshots
        .par_iter()
        .map(|s| {
            let u = &s.state.u;
            let r = scalar_curvature(model, u)?;
            let mut e: f64 = 0.0;
            let mut c: f64 = 0.0;
            let mut area = 0.0;
            for g in masked(&core) {
                e = e.max((u[g] - oracle[g]).abs());
                c = c.max((r[g] + 1.0).abs());
                area += u[g] * area_w[g];
            }
            let graph = DistanceGraph::new(model, u)?;
            let mut kappa = f64::INFINITY;
            for &x in &centers {
                let d = graph.distances_from(x)?;
                let ball: f64 = (0..d.len())
                    .filter(|&g| d[g] < opts.kappa_radius && area_w[g] != 0.0)
                    .map(|g| u[g] * area_w[g])
                    .sum();
                kappa = kappa.min(ball / (opts.kappa_radius * opts.kappa_radius));
            }
            Ok([s.state.time, e / oracle_max, c, area, kappa])
        })
        .collect::<Result<_>>()?;

    let k_ends = model.ends().len() as f64;
    let mut series = Series::new(
        "convergence",
        &["tau", "rel_error", "curvature_error", "core_area_over_4pik", "kappa"],
    );
    for r in &rows {
        series.rows.push(vec![r[0], r[1], r[2], r[3] / (4.0 * PI * k_ends), r[4]]);
    }
    let late: Vec<&[f64; 5]> = rows.iter().filter(|r| r[0] >= 0.5 * tau_end).collect();
    let e_late: Vec<f64> = late.iter().map(|r| r[1]).collect();
    let c_late: Vec<f64> = late.iter().map(|r| r[2]).collect();
    let last = rows.last().expect("nonempty");
    let mono_tol = 1e-6;
    let kappa_min = rows.iter().map(|r| r[4]).fold(f64::INFINITY, f64::min);
    let area_ratio = last[3] / (4.0 * PI * k_ends);

    let mut rep = DiagnosticsReport::default();
    let e_up = nonincreasing_excess(&e_late);
    let c_up = nonincreasing_excess(&c_late);
    rep.push(
        CheckEntry::new("convergence-error", "‖ũ(τ_end) − Ũ‖∞/‖Ũ‖∞ on the core")
            .worst(last[1], Some((0, last[0])))
            .tol(opts.error_threshold)
            .pass_if(last[1] <= opts.error_threshold),
    );
    rep.push(
        CheckEntry::new("convergence-error-monotone", "relative error nonincreasing over the last half")
            .worst(e_up, None)
            .tol(mono_tol)
            .pass_if(e_up <= mono_tol),
    );
    rep.push(
        CheckEntry::new("convergence-curvature", "‖R̃(τ_end) + 1‖∞ on the core")
            .worst(last[2], Some((0, last[0])))
            .tol(opts.curvature_threshold)
            .pass_if(last[2] <= opts.curvature_threshold),
    );
    rep.push(
        CheckEntry::new("convergence-curvature-monotone", "‖R̃ + 1‖∞ nonincreasing over the last half")
            .worst(c_up, None)
            .tol(mono_tol)
            .pass_if(c_up <= mono_tol),
    );
    rep.push(
        CheckEntry::new("kappa-noncollapsed", "Area(B(x,r))/r² ≥ κ'")
            .worst(kappa_min, None)
            .tol(opts.kappa_min)
            .pass_if(kappa_min >= opts.kappa_min),
    );
    rep.push(
        CheckEntry::new("finite-area", "core area of ũ·g₀ at τ_end over 4πk")
            .worst(area_ratio, Some((0, last[0])))
            .tol(opts.area_range[1])
            .pass_if(area_ratio >= opts.area_range[0] && area_ratio <= opts.area_range[1]),
    );
    rep.series.push(series);
    Ok(rep)
}
