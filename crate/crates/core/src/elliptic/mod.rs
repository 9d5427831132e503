//! Linear and semilinear elliptic solves on the overset atlas.
//!
//! Potentials carry a Neumann closure on each truncation row whose flux is
//! the end's share of the total source. The overset coupling is not exactly
//! conservative, so a pure Neumann problem is very slightly incompatible; the
//! defect is absorbed by a multiple of a fixed bump on the flat core and
//! reported back to the caller.

mod oracle;

pub use oracle::{uniformize_oracle, uniformize_oracle_with, OracleOptions, OracleSolution};

use std::f64::consts::PI;

use crate::discrete::{self, Closure};
use crate::error::{Error, Result};
use crate::flow::ConformalState;
use crate::linalg::{self, CsrMatrix};
use crate::surface::ops::{curvature_from_log, gradient_norm_sq, laplacian_unchecked, log_field, sync_in_place};
use crate::surface::SurfaceModel;

/// Relative tolerance of potential solves.
pub const POTENTIAL_TOL: f64 = 1e-10;
const GAUGE_TOL: f64 = 1e-12;
const MAX_LINEAR_ITER: usize = 20_000;

/// Leading behaviour `f ≈ βⱼ·αⱼρ + γⱼ` of a potential on each end.
#[derive(Clone, Debug, PartialEq)]
pub struct EndAsymptotics {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Constant `c` of the core bump subtracted from the source to make the
    /// discrete Neumann problem solvable (zero for a conservative scheme).
    pub compatibility_defect: f64,
    /// Residual of the final solve in the area-weighted norm.
    pub residual: f64,
}

fn check_source(model: &SurfaceModel, source: &[f64]) -> Result<()> {
    model.check_len(source)?;
    for (g, s) in source.iter().enumerate() {
        if model.is_solved(g) && !s.is_finite() {
            return Err(Error::NonFinite { node: g });
        }
    }
    Ok(())
}

/// Outward flux `∂ρ f` prescribed on each end for a source of total mass
/// `total`: the ends share it in proportion to `1 + αⱼ`.
pub fn end_fluxes(model: &SurfaceModel, total: f64) -> Vec<f64> {
    let ends = model.ends();
    let weight: f64 = ends.iter().map(|e| 1.0 + e.angle_alpha).sum();
    ends.iter()
        .map(|e| total * (1.0 + e.angle_alpha) / weight / (2.0 * PI))
        .collect()
}

/// Right-hand side contribution of a prescribed outward flux on the outer
/// truncation row of each end chart.
fn add_flux(model: &SurfaceModel, flux: &[f64], rhs: &mut [f64]) {
    for (ci, _) in model.charts().iter().enumerate() {
        let Some(j) = model.chart_end(ci) else { continue };
        for g in model.truncation_row(ci) {
            rhs[g] += discrete::face_width(model, g) * flux[j];
        }
    }
}

fn pde_rhs(model: &SurfaceModel, closure: &Closure, source: &[f64]) -> Vec<f64> {
    let cw = model.cell_weights();
    (0..source.len())
        .map(|g| {
            if discrete::is_pde_row(model, closure, g) {
                -cw[g] * source[g]
            } else {
                0.0
            }
        })
        .collect()
}

fn linear_solve(model: &SurfaceModel, a: &CsrMatrix, closure: &Closure, rhs: &[f64], rel_tol: f64) -> Result<Vec<f64>> {
    let mut x = vec![0.0; rhs.len()];
    let scale = discrete::residual_norm(model, closure, rhs).max(1.0);
    linalg::solve(a, rhs, &mut x, rel_tol * scale, MAX_LINEAR_ITER, |r| {
        discrete::residual_norm(model, closure, r)
    })?;
    sync_in_place(model, &mut x);
    Ok(x)
}

/// `Δ₀ f − source` in the stiffness form, for residual reporting.
fn flux_residual(model: &SurfaceModel, f: &[f64], source: &[f64], flux: &[f64]) -> Vec<f64> {
    let cw = model.cell_weights();
    let mut r = vec![0.0; f.len()];
    for g in 0..f.len() {
        r[g] = match model.tag(g) {
            crate::surface::NodeTag::Interior => discrete::stiffness_interior(model, f, g) + cw[g] * source[g],
            crate::surface::NodeTag::Truncation => discrete::stiffness_flux(model, f, g) + cw[g] * source[g],
            crate::surface::NodeTag::Overlap => discrete::fringe_residual(model, f, g),
            crate::surface::NodeTag::Hole => 0.0,
        };
    }
    let mut b = vec![0.0; f.len()];
    add_flux(model, flux, &mut b);
    r.iter_mut().zip(&b).for_each(|(ri, bi)| *ri -= bi);
    r
}

/// Solves `Δ₀ f = source` with the flux law on every end, `f = 0` at the
/// anchor node.
pub fn solve_potential(model: &SurfaceModel, source: &[f64]) -> Result<(Vec<f64>, EndAsymptotics)> {
    potential_with_tol(model, source, POTENTIAL_TOL)
}

fn potential_with_tol(model: &SurfaceModel, source: &[f64], tol: f64) -> Result<(Vec<f64>, EndAsymptotics)> {
    check_source(model, source)?;
    let total = model.weighted_sum(source);
    let flux = end_fluxes(model, total);
    let closure = Closure::Flux;
    let anchor = discrete::anchor_node(model);
    let a = discrete::assemble(model, &vec![0.0; model.num_nodes()], &closure, Some(anchor));

    let mut rhs = pde_rhs(model, &closure, source);
    add_flux(model, &flux, &mut rhs);
    rhs[anchor] = 0.0;
    let fs = linear_solve(model, &a, &closure, &rhs, tol)?;

    // the anchored row's equation decides the compatibility constant
    let cw = model.cell_weights();
    let row = |f: &[f64], s: &[f64]| discrete::stiffness_interior(model, f, anchor) + cw[anchor] * s[anchor];
    let r_s = row(&fs, source);
    let (f, c) = if r_s == 0.0 {
        (fs, 0.0)
    } else {
        let bump = discrete::core_bump(model);
        let mut rhs_b = pde_rhs(model, &closure, &bump);
        rhs_b[anchor] = 0.0;
        let fb = linear_solve(model, &a, &closure, &rhs_b, tol)?;
        let r_b = row(&fb, &bump);
        let c = r_s / r_b;
        (fs.iter().zip(&fb).map(|(x, y)| x - c * y).collect::<Vec<_>>(), c)
    };

    let bump = discrete::core_bump(model);
    let effective: Vec<f64> = source.iter().zip(&bump).map(|(s, b)| s - c * b).collect();
    let residual = discrete::residual_norm(model, &closure, &flux_residual(model, &f, &effective, &flux));
    let ends = model.ends();
    let beta: Vec<f64> = ends.iter().zip(&flux).map(|(e, q)| q / e.angle_alpha).collect();
    let gamma = ends
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let rows = model.truncation_row(model.end_chart(j));
            let n = rows.len() as f64;
            rows.map(|g| f[g] - flux[j] * e.rho_max).sum::<f64>() / n
        })
        .collect();
    Ok((
        f,
        EndAsymptotics {
            beta,
            gamma,
            compatibility_defect: c,
            residual,
        },
    ))
}

/// Heat-flow potential along a raw trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialState {
    pub time: f64,
    pub f: Vec<f64>,
    pub f0: Vec<f64>,
    /// `h = Δf + |∇f|²` in the current metric.
    pub h: Vec<f64>,
    pub grad_norm_max: f64,
    /// Outward `∂ρ f` held on each end.
    pub flux: Vec<f64>,
}

fn derived(model: &SurfaceModel, f: &[f64], u: &[f64]) -> Result<(Vec<f64>, f64)> {
    let lap = laplacian_unchecked(model, f);
    let grad = gradient_norm_sq(model, f, u)?;
    let mut h = vec![0.0; f.len()];
    let mut gmax: f64 = 0.0;
    for g in 0..f.len() {
        if model.is_active(g) {
            h[g] = lap[g] / u[g] + grad[g];
            gmax = gmax.max(grad[g].sqrt());
        }
    }
    if !gmax.is_finite() {
        return Err(Error::NonFinite { node: 0 });
    }
    Ok((h, gmax))
}

impl PotentialState {
    /// Potential of the metric `u·g₀` of `state`: `Δ_g f₀ = R`, i.e.
    /// `Δ₀ f₀ = R₀ − Δ₀ log u`.
    pub fn new(model: &SurfaceModel, state: &ConformalState) -> Result<Self> {
        let w = log_field(model, &state.u)?;
        let r = curvature_from_log(model, &w);
        let source: Vec<f64> = r.iter().zip(&state.u).map(|(r, u)| r * u).collect();
        let (f0, asym) = solve_potential(model, &source)?;
        let flux = asym
            .beta
            .iter()
            .zip(model.ends())
            .map(|(b, e)| b * e.angle_alpha)
            .collect();
        let (h, grad_norm_max) = derived(model, &f0, &state.u)?;
        Ok(Self {
            time: state.time,
            f: f0.clone(),
            f0,
            h,
            grad_norm_max,
            flux,
        })
    }
}

/// Backward-Euler step of `∂t f = (1/u)·Δ₀ f` from `old.time` to `new.time`,
/// with `u` taken at the new time. `h` and `|∇f|` are recomputed on the new
/// metric.
pub fn evolve_potential(
    model: &SurfaceModel,
    pot: &PotentialState,
    old: &ConformalState,
    new: &ConformalState,
) -> Result<PotentialState> {
    model.check_len(&pot.f)?;
    model.check_len(&new.u)?;
    let dt = new.time - old.time;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("potential step needs dt > 0, got {dt}")));
    }
    let closure = Closure::Flux;
    let cw = model.cell_weights();
    let mass: Vec<f64> = (0..cw.len()).map(|g| cw[g] * new.u[g] / dt).collect();
    let a = discrete::assemble(model, &mass, &closure, None);
    // solved for the increment: the right-hand side is then the static
    // residual, which keeps the relative tolerance meaningful when |f| is
    // large on the ends
    let zero = vec![0.0; cw.len()];
    let mut rhs = flux_residual(model, &pot.f, &zero, &pot.flux);
    rhs.iter_mut().for_each(|r| *r = -*r);
    let mut delta = vec![0.0; cw.len()];
    let scale = discrete::residual_norm(model, &closure, &rhs).max(1.0);
    linalg::solve(&a, &rhs, &mut delta, POTENTIAL_TOL * scale, MAX_LINEAR_ITER, |r| {
        discrete::residual_norm(model, &closure, r)
    })?;
    let mut f: Vec<f64> = pot.f.iter().zip(&delta).map(|(f, d)| f + d).collect();
    sync_in_place(model, &mut f);
    let (h, grad_norm_max) = derived(model, &f, &new.u)?;
    Ok(PotentialState {
        time: new.time,
        f,
        f0: pot.f0.clone(),
        h,
        grad_norm_max,
        flux: pot.flux.clone(),
    })
}

/// Bounded `ψ` with `Δ₀ψ ≥ ½R₀`, so that `e^{2ψ}g₀` has nonpositive
/// curvature.
///
/// `Q = ½R₀ + m·b` with `b` the unit-mass core bump and `m = −½ΣR₀dA₀ > 0`.
/// Since `ΣQ dA₀ = 0` every end flux vanishes, so the flux-law solve of
/// `Δ₀ψ = Q` has no log-growing part and tends to a constant on each end.
/// The result is shifted so that it vanishes on the first end.
pub fn gauge_nonpositive(model: &SurfaceModel) -> Result<Vec<f64>> {
    let r0 = model.background_curvature();
    let n = model.num_nodes();
    if (0..n).filter(|&g| model.is_solved(g)).all(|g| r0[g] <= 0.0) {
        return Ok(vec![0.0; n]);
    }
    let q = gauge_source(model)?;
    let (mut psi, _) = potential_with_tol(model, &q, GAUGE_TOL)?;
    if !model.ends().is_empty() {
        let rows = model.truncation_row(model.end_chart(0));
        let count = rows.len() as f64;
        let shift = rows.map(|g| psi[g]).sum::<f64>() / count;
        for g in 0..n {
            if model.is_active(g) {
                psi[g] -= shift;
            }
        }
    }
    Ok(psi)
}

/// The source `Q` of [`gauge_nonpositive`]; `Σ Q dA₀ = 0` up to rounding.
pub fn gauge_source(model: &SurfaceModel) -> Result<Vec<f64>> {
    let r0 = model.background_curvature();
    let total = model.weighted_sum(r0);
    if !(total < 0.0) {
        return Err(Error::InvalidModel(format!(
            "total background curvature {total} is not negative; no gauge source exists"
        )));
    }
    let bump = discrete::core_bump(model);
    let m = -0.5 * total;
    Ok(r0.iter().zip(&bump).map(|(r, b)| 0.5 * r + m * b).collect())
}

#[cfg(test)]
mod tests;
