//! Discrete geometric operators on a [`SurfaceModel`].

use super::{NodeTag, SurfaceModel, NO_NEIGHBOR};
use crate::error::{Error, Result};

/// Relative mismatch tolerated by [`check_synchronized`].
pub const SYNC_TOL: f64 = 1e-10;

/// Overwrites every overlap node with the bilinear interpolant of its donors.
pub(crate) fn sync_in_place(model: &SurfaceModel, f: &mut [f64]) {
    for link in model.fringe() {
        f[link.node] = link.donors.iter().map(|&(d, w)| w * f[d]).sum();
    }
}

/// Synchronizes overlap nodes from the partner chart interiors.
///
/// Undefined values are represented as NaN; a field that is only defined on
/// one chart therefore fails with [`Error::MissingDonor`].
pub fn chart_sync(model: &SurfaceModel, f: &mut [f64]) -> Result<()> {
    model.check_len(f)?;
    for link in model.fringe() {
        let mut acc = 0.0;
        for &(d, w) in &link.donors {
            if !f[d].is_finite() {
                return Err(Error::MissingDonor {
                    node: link.node,
                    donor: d,
                });
            }
            acc += w * f[d];
        }
        f[link.node] = acc;
    }
    Ok(())
}

/// Verifies that overlap values agree with their interpolants.
pub fn check_synchronized(model: &SurfaceModel, f: &[f64]) -> Result<()> {
    model.check_len(f)?;
    for link in model.fringe() {
        let interp: f64 = link.donors.iter().map(|&(d, w)| w * f[d]).sum();
        let mismatch = (f[link.node] - interp).abs();
        if !(mismatch <= SYNC_TOL * (1.0 + interp.abs())) {
            return Err(Error::Unsynchronized {
                node: link.node,
                mismatch,
            });
        }
    }
    Ok(())
}

fn check_finite(model: &SurfaceModel, f: &[f64]) -> Result<()> {
    for (g, v) in f.iter().enumerate() {
        if model.is_active(g) && !v.is_finite() {
            return Err(Error::NonFinite { node: g });
        }
    }
    Ok(())
}

/// Flat five-point Laplacian times the cell area, at a solved node.
///
/// Truncation rows use the second difference of the adjacent row in the
/// missing direction, which keeps the operator exact on affine fields.
pub(crate) fn flat_laplacian_cell(model: &SurfaceModel, f: &[f64], g: usize) -> f64 {
    let ci = model.chart_of(g);
    let kap = model.charts()[ci].kappa();
    let nb = model.stencil()[g];
    let x_part = kap[0] * (f[nb[0]] + f[nb[1]] - 2.0 * f[g]);
    let y_part = match (nb[2], nb[3]) {
        (NO_NEIGHBOR, up) => {
            let up2 = model.stencil()[up][3];
            f[g] - 2.0 * f[up] + f[up2]
        }
        (down, NO_NEIGHBOR) => {
            let down2 = model.stencil()[down][2];
            f[g] - 2.0 * f[down] + f[down2]
        }
        (down, up) => f[down] + f[up] - 2.0 * f[g],
    };
    x_part + kap[1] * y_part
}

pub(crate) fn laplacian_unchecked(model: &SurfaceModel, f: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; f.len()];
    for (g, o) in out.iter_mut().enumerate() {
        if model.is_solved(g) {
            let cw = model.cell_weights()[g];
            let half = if model.tag(g) == NodeTag::Truncation { 0.5 } else { 1.0 };
            // cell_weights = e^{2v}·cell·half
            *o = flat_laplacian_cell(model, f, g) * half / cw;
        }
    }
    sync_in_place(model, &mut out);
    out
}

/// `Δ₀ f`: in each chart `e^{-2v₀}` times the flat five-point Laplacian.
/// Overlap nodes of the result are synchronized; hole nodes are zero.
pub fn laplacian_apply(model: &SurfaceModel, f: &[f64]) -> Result<Vec<f64>> {
    model.check_len(f)?;
    check_finite(model, f)?;
    check_synchronized(model, f)?;
    Ok(laplacian_unchecked(model, f))
}

pub(crate) fn log_field(model: &SurfaceModel, u: &[f64]) -> Result<Vec<f64>> {
    model.check_len(u)?;
    let mut w = vec![0.0; u.len()];
    for g in 0..u.len() {
        if !model.is_solved(g) {
            continue;
        }
        let v = u[g];
        if !(v > 0.0) {
            return Err(Error::NonPositive { node: g, value: v });
        }
        if !v.is_finite() {
            return Err(Error::NonFinite { node: g });
        }
        w[g] = v.ln();
    }
    sync_in_place(model, &mut w);
    Ok(w)
}

pub(crate) fn curvature_from_log(model: &SurfaceModel, w: &[f64]) -> Vec<f64> {
    let lap = laplacian_unchecked(model, w);
    let r0 = model.background_curvature();
    let mut r = vec![0.0; w.len()];
    for g in 0..w.len() {
        if model.is_solved(g) {
            r[g] = (r0[g] - lap[g]) * (-w[g]).exp();
        }
    }
    sync_in_place(model, &mut r);
    r
}

/// Scalar curvature of `u·g₀`: `R = (R₀ − Δ₀ log u)/u`.
///
/// `log u` is taken on solved nodes and interpolated onto overlap nodes, which
/// is how every solver in the crate couples the charts.
pub fn scalar_curvature(model: &SurfaceModel, u: &[f64]) -> Result<Vec<f64>> {
    let w = log_field(model, u)?;
    Ok(curvature_from_log(model, &w))
}

/// `∫ R dA` of `u·g₀` over the truncated surface.
///
/// The region beyond the truncation contributes nothing analytically: exact
/// cone ends are flat, and the order-τ perturbation is proportional to
/// `cos θ`, so its curvature integrates to zero over every circle.
pub fn total_curvature(model: &SurfaceModel, u: &[f64]) -> Result<f64> {
    let w = log_field(model, u)?;
    Ok(total_curvature_from_log(model, &w))
}

pub(crate) fn total_curvature_from_log(model: &SurfaceModel, w: &[f64]) -> f64 {
    let lap = laplacian_unchecked(model, w);
    let r0 = model.background_curvature();
    model
        .area_weights()
        .iter()
        .enumerate()
        .filter(|(_, &a)| a != 0.0)
        .map(|(g, a)| (r0[g] - lap[g]) * a)
        .sum()
}

/// `|∇f|²` in the metric `u·g₀` (central differences; one-sided on
/// truncation rows). Overlap nodes are synchronized.
pub fn gradient_norm_sq(model: &SurfaceModel, f: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    model.check_len(f)?;
    model.check_len(u)?;
    let mut out = vec![0.0; f.len()];
    for (g, o) in out.iter_mut().enumerate() {
        if !model.is_solved(g) {
            continue;
        }
        if !(u[g] > 0.0) {
            return Err(Error::NonPositive {
                node: g,
                value: u[g],
            });
        }
        let c = &model.charts()[model.chart_of(g)];
        let [hx, hy] = c.spacing;
        let nb = model.stencil()[g];
        let dx = (f[nb[1]] - f[nb[0]]) / (2.0 * hx);
        let dy = match (nb[2], nb[3]) {
            (NO_NEIGHBOR, up) => (f[up] - f[g]) / hy,
            (down, NO_NEIGHBOR) => (f[g] - f[down]) / hy,
            (down, up) => (f[up] - f[down]) / (2.0 * hy),
        };
        let v = model.background_log_factor()[g];
        *o = (dx * dx + dy * dy) * (-2.0 * v).exp() / u[g];
    }
    sync_in_place(model, &mut out);
    Ok(out)
}
