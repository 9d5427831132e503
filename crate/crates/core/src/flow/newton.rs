use rayon::prelude::*;

use super::{BoundaryMode, ConformalState, FlowConfig, FlowMode};
use crate::discrete::{self, Closure};
use crate::error::{Error, Result};
use crate::linalg::{bicgstab, Ilu0};
use crate::surface::{NodeTag, SurfaceModel};

/// Convergence record of one Newton solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NewtonReport {
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
    pub linear_iterations: usize,
    /// Residual level accepted as converged: the tolerance, or the
    /// floating-point floor of the residual if that is larger.
    pub floor: f64,
}

/// Backward-Euler system for `w⁺ = log u⁺`, rows scaled by `cw = e^{2v}·cell`:
///
/// `cw·[(e^w − u_old)/dt + b·e^w + R₀] + K w = 0`
///
/// with `b = 0` (raw) or `1` (rescaled).
pub(super) struct StepProblem<'a> {
    model: &'a SurfaceModel,
    u_old: &'a [f64],
    inv_dt: f64,
    b: f64,
    closure: Closure,
    /// Target for Dirichlet-type truncation rows, offset for decay rows.
    bc: Vec<f64>,
}

impl<'a> StepProblem<'a> {
    pub(super) fn new(
        model: &'a SurfaceModel,
        state: &'a ConformalState,
        w_old: &[f64],
        dt: f64,
        new_time: f64,
        mode: BoundaryMode,
    ) -> Self {
        let n = model.num_nodes();
        let (b, far) = match state.mode {
            FlowMode::Raw => (0.0, 0.0),
            FlowMode::Rescaled => (1.0, -new_time),
        };
        let mut bc = vec![far; n];
        let closure = match mode {
            BoundaryMode::DirichletOne => Closure::Dirichlet,
            BoundaryMode::Frozen => {
                bc.copy_from_slice(w_old);
                Closure::Dirichlet
            }
            BoundaryMode::ZeroFlux => Closure::Flux,
            BoundaryMode::AsymptoticDecay => {
                let mut q = vec![0.0; n];
                for (ci, c) in model.charts().iter().enumerate() {
                    let Some(j) = model.chart_end(ci) else { continue };
                    let e = &model.ends()[j];
                    let factor = (-e.angle_alpha * e.order_tau * c.spacing[1]).exp();
                    for g in model.truncation_row(ci) {
                        q[g] = factor;
                    }
                }
                Closure::Decay(q)
            }
        };
        Self {
            model,
            u_old: &state.u,
            inv_dt: 1.0 / dt,
            b,
            closure,
            bc,
        }
    }

    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let m = self.model;
        let cw = m.cell_weights();
        let r0 = m.background_curvature();
        (0..w.len())
            .into_par_iter()
            .map(|g| {
                let pde = |k: f64| {
                    let e = w[g].exp();
                    cw[g] * ((e - self.u_old[g]) * self.inv_dt + self.b * e + r0[g]) + k
                };
                match m.tag(g) {
                    NodeTag::Hole => w[g],
                    NodeTag::Overlap => discrete::fringe_residual(m, w, g),
                    NodeTag::Interior => pde(discrete::stiffness_interior(m, w, g)),
                    NodeTag::Truncation => match &self.closure {
                        Closure::Dirichlet => w[g] - self.bc[g],
                        Closure::Decay(q) => {
                            let inner = discrete::inner_neighbor(m, g);
                            (w[g] - self.bc[g]) - q[g] * (w[inner] - self.bc[g])
                        }
                        Closure::Flux => pde(discrete::stiffness_flux(m, w, g)),
                    },
                }
            })
            .collect()
    }

    /// Weighted norm of the row-wise sum of absolute terms, times twice
    /// machine epsilon: the level below which the residual cannot be
    /// resolved in floating point. It only binds in rescaled mode, where the
    /// far end carries area elements near `e^{2αρ_max}`.
    fn roundoff_floor(&self, w: &[f64]) -> f64 {
        let m = self.model;
        let cw = m.cell_weights();
        let r0 = m.background_curvature();
        let abs: Vec<f64> = (0..w.len())
            .map(|g| {
                if !discrete::is_pde_row(m, &self.closure, g) {
                    return w[g].abs();
                }
                let kap = m.charts()[m.chart_of(g)].kappa();
                let nb = m.stencil()[g];
                let k: f64 = 2.0 * (kap[0] + kap[1]) * w[g].abs()
                    + nb.iter().filter(|&&h| h != crate::surface::NO_NEIGHBOR).map(|&h| kap[0].max(kap[1]) * w[h].abs()).sum::<f64>();
                let e = w[g].exp();
                cw[g] * ((e + self.u_old[g]) * self.inv_dt + self.b * e + r0[g].abs()) + k
            })
            .collect();
        2.0 * f64::EPSILON * self.norm(&abs)
    }

    fn mass(&self, w: &[f64]) -> Vec<f64> {
        let cw = self.model.cell_weights();
        w.iter()
            .zip(cw)
            .map(|(wi, c)| c * (self.inv_dt + self.b) * wi.exp())
            .collect()
    }

    fn norm(&self, r: &[f64]) -> f64 {
        discrete::residual_norm(self.model, &self.closure, r)
    }

    /// Damped Newton from `w0`; the step is halved until the residual norm
    /// decreases.
    pub(super) fn solve(&self, w0: &[f64], config: &FlowConfig) -> Result<(Vec<f64>, NewtonReport)> {
        let mut w = w0.to_vec();
        let mut f = self.residual(&w);
        let mut nf = self.norm(&f);
        let mut report = NewtonReport {
            history: vec![nf],
            ..Default::default()
        };
        let n = w.len();
        let target = config.newton_tol.max(self.roundoff_floor(w0));
        report.floor = target;
        while nf > target {
            if report.iterations >= config.newton_max_iter {
                return Err(Error::NewtonDiverged {
                    iterations: report.iterations + 1,
                    residual: nf,
                });
            }
            report.iterations += 1;
            let a = discrete::assemble(self.model, &self.mass(&w), &self.closure, None);
            let ilu = Ilu0::new(&a)?;
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let mut delta = vec![0.0; n];
            let lin_tol = (1e-2 * target).max(1e-4 * nf);
            let stats = bicgstab(&a, &ilu, &rhs, &mut delta, lin_tol, config.linear_max_iter, |r| {
                self.norm(r)
            })?;
            report.linear_iterations += stats.iterations;

            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = w.iter().zip(&delta).map(|(a, d)| a + lambda * d).collect();
                let ft = self.residual(&trial);
                let nt = self.norm(&ft);
                if nt.is_finite() && nt < nf * (1.0 - 1e-4 * lambda) {
                    w = trial;
                    f = ft;
                    nf = nt;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1.0 / 1024.0 {
                    return Err(Error::NewtonDiverged {
                        iterations: report.iterations,
                        residual: nf,
                    });
                }
            }
            report.history.push(nf);
        }
        report.residual = nf;
        Ok((w, report))
    }
}
