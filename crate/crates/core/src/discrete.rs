//! Assembly of the implicit systems shared by the flow and elliptic solvers.
//!
//! Every PDE row is scaled by the node's full area element `e^{2v}·cell`, so
//! the Laplacian part becomes the symmetric stiffness `K = −cell·Δ_h` and the
//! zeroth-order terms become diagonal "mass" entries. Overlap rows carry the
//! interpolation constraint `x − Σ wₖ x_dₖ = 0`; hole rows are the identity.

use crate::linalg::{CsrBuilder, CsrMatrix};
use crate::surface::{NodeTag, SurfaceModel, NO_NEIGHBOR};

/// How truncation rows are closed.
#[derive(Clone, Debug)]
pub(crate) enum Closure {
    /// `x = value` (value supplied through the right-hand side).
    Dirichlet,
    /// `x − q·x_inner = 0` with one factor per node (log-linear decay).
    Decay(Vec<f64>),
    /// Half-cell finite volume row carrying the PDE, with an outward flux
    /// supplied through the right-hand side.
    Flux,
}

/// The inward neighbour of a truncation node.
pub(crate) fn inner_neighbor(model: &SurfaceModel, g: usize) -> usize {
    let nb = model.stencil()[g];
    if nb[2] == NO_NEIGHBOR {
        nb[3]
    } else {
        nb[2]
    }
}

/// `(K x)_g` for an interior node.
pub(crate) fn stiffness_interior(model: &SurfaceModel, x: &[f64], g: usize) -> f64 {
    let kap = model.charts()[model.chart_of(g)].kappa();
    let nb = model.stencil()[g];
    kap[0] * (2.0 * x[g] - x[nb[0]] - x[nb[1]]) + kap[1] * (2.0 * x[g] - x[nb[2]] - x[nb[3]])
}

/// `(K x)_g` for a truncation node in half-cell flux form (no flux term).
pub(crate) fn stiffness_flux(model: &SurfaceModel, x: &[f64], g: usize) -> f64 {
    let kap = model.charts()[model.chart_of(g)].kappa();
    let nb = model.stencil()[g];
    let inner = inner_neighbor(model, g);
    kap[1] * (x[g] - x[inner]) + 0.5 * kap[0] * (2.0 * x[g] - x[nb[0]] - x[nb[1]])
}

/// Width of a truncation node's boundary face (`h_θ`).
pub(crate) fn face_width(model: &SurfaceModel, g: usize) -> f64 {
    model.charts()[model.chart_of(g)].spacing[0]
}

/// Interpolation residual of an overlap row.
pub(crate) fn fringe_residual(model: &SurfaceModel, x: &[f64], g: usize) -> f64 {
    let link = model.fringe_link(g).expect("overlap node has a link");
    x[g] - link.donors.iter().map(|&(d, w)| w * x[d]).sum::<f64>()
}

/// Assembles `diag(mass) + K` on PDE rows with the given closure; `anchor`
/// replaces one row by the identity.
pub(crate) fn assemble(
    model: &SurfaceModel,
    mass: &[f64],
    closure: &Closure,
    anchor: Option<usize>,
) -> CsrMatrix {
    let n = model.num_nodes();
    let mut b = CsrBuilder::with_capacity(n, 5 * n);
    for g in 0..n {
        if Some(g) == anchor {
            b.push(g, 1.0);
            b.finish_row();
            continue;
        }
        match model.tag(g) {
            NodeTag::Hole => b.push(g, 1.0),
            NodeTag::Overlap => {
                let link = model.fringe_link(g).expect("overlap node has a link");
                b.push(g, 1.0);
                for &(d, w) in &link.donors {
                    b.push(d, -w);
                }
            }
            NodeTag::Interior => {
                let kap = model.charts()[model.chart_of(g)].kappa();
                let nb = model.stencil()[g];
                b.push(g, mass[g] + 2.0 * kap[0] + 2.0 * kap[1]);
                b.push(nb[0], -kap[0]);
                b.push(nb[1], -kap[0]);
                b.push(nb[2], -kap[1]);
                b.push(nb[3], -kap[1]);
            }
            NodeTag::Truncation => match closure {
                Closure::Dirichlet => b.push(g, 1.0),
                Closure::Decay(q) => {
                    b.push(g, 1.0);
                    b.push(inner_neighbor(model, g), -q[g]);
                }
                Closure::Flux => {
                    let kap = model.charts()[model.chart_of(g)].kappa();
                    let nb = model.stencil()[g];
                    b.push(g, mass[g] + kap[1] + kap[0]);
                    b.push(inner_neighbor(model, g), -kap[1]);
                    b.push(nb[0], -0.5 * kap[0]);
                    b.push(nb[1], -0.5 * kap[0]);
                }
            },
        }
        b.finish_row();
    }
    b.build()
}

/// Whether row `g` is a PDE row under the closure (as opposed to a
/// constraint row).
pub(crate) fn is_pde_row(model: &SurfaceModel, closure: &Closure, g: usize) -> bool {
    match model.tag(g) {
        NodeTag::Interior => true,
        NodeTag::Truncation => matches!(closure, Closure::Flux),
        _ => false,
    }
}

/// Norm used for every stopping test: area-weighted 2-norm of the unscaled
/// PDE residual plus the largest constraint-row violation.
pub(crate) fn residual_norm(model: &SurfaceModel, closure: &Closure, r: &[f64]) -> f64 {
    let cw = model.cell_weights();
    let mut s = 0.0;
    let mut m: f64 = 0.0;
    for (g, &v) in r.iter().enumerate() {
        if is_pde_row(model, closure, g) {
            s += v * v / cw[g];
        } else {
            m = m.max(v.abs());
        }
    }
    s.sqrt() + m
}

/// Core-chart bump used to absorb compatibility defects: the blend weight on
/// core interior nodes, normalized to unit `dA₀` mass.
pub(crate) fn core_bump(model: &SurfaceModel) -> Vec<f64> {
    let n = model.num_nodes();
    let mut b = vec![0.0; n];
    for g in 0..n {
        if model.chart_of(g) == 0 && model.tag(g) == NodeTag::Interior && model.chart_end(0).is_none()
        {
            b[g] = model.partition()[g];
        }
    }
    let mass = model.weighted_sum(&b);
    if mass > 0.0 {
        b.iter_mut().for_each(|x| *x /= mass);
    }
    b
}

/// A core interior node far from every puncture, used to pin constants.
pub(crate) fn anchor_node(model: &SurfaceModel) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for g in 0..model.num_nodes() {
        if model.tag(g) != NodeTag::Interior || model.chart_of(g) != 0 {
            continue;
        }
        let (_, rho) = model.end_coordinate(g);
        if rho < best.0 {
            best = (rho, g);
        }
    }
    best.1
}
