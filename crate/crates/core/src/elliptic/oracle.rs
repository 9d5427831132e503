//! Uniformizing metric `Ũ·g₀` with `R ≡ −1` and cusp ends.
//!
//! Unknown `w = log Ũ`, equation `Δ₀w − R₀ − e^w = 0`. Each end is closed by
//! the exact cusp profile `Ũ·g₀ = 2(dρ² + dθ²)/(ρ + s)²` at the truncation
//! row. The shift `s` is fitted from the solution itself: on the cusp the
//! θ-averaged `L = w + 2ṽ` obeys `L'' = e^L` with zero energy, so
//! `ρ + s = √(2e^{−L})`. The fit is repeated until the shifts settle.

use crate::discrete::{self, Closure};
use crate::error::{Error, Result};
use crate::flow::exp_field;
use crate::linalg::{bicgstab, Ilu0};
use crate::surface::{ChartKind, NodeTag, SurfaceModel};

#[derive(Clone, Debug)]
pub struct OracleOptions {
    pub tol: f64,
    pub max_newton: usize,
    pub max_shift_updates: usize,
    pub shift_tol: f64,
    /// Initial cusp shift on every end.
    pub initial_shift: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_newton: 60,
            max_shift_updates: 40,
            shift_tol: 1e-9,
            initial_shift: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleSolution {
    pub u: Vec<f64>,
    /// Cusp shift of each end.
    pub shifts: Vec<f64>,
    /// Final weighted residual.
    pub residual: f64,
    /// Residual after every Newton iteration, all shift rounds concatenated.
    pub history: Vec<f64>,
    pub shift_updates: usize,
}

pub fn uniformize_oracle(model: &SurfaceModel) -> Result<OracleSolution> {
    uniformize_oracle_with(model, &OracleOptions::default())
}

fn cusp_log(x: f64) -> f64 {
    std::f64::consts::LN_2 - 2.0 * x.ln()
}

struct Liouville<'a> {
    model: &'a SurfaceModel,
    bc: Vec<f64>,
}

impl Liouville<'_> {
    fn residual(&self, w: &[f64]) -> Vec<f64> {
        let m = self.model;
        let cw = m.cell_weights();
        let r0 = m.background_curvature();
        (0..w.len())
            .map(|g| match m.tag(g) {
                NodeTag::Hole => w[g],
                NodeTag::Overlap => discrete::fringe_residual(m, w, g),
                NodeTag::Truncation => w[g] - self.bc[g],
                NodeTag::Interior => cw[g] * (w[g].exp() + r0[g]) + discrete::stiffness_interior(m, w, g),
            })
            .collect()
    }

    fn norm(&self, r: &[f64]) -> f64 {
        discrete::residual_norm(self.model, &Closure::Dirichlet, r)
    }

    /// Damped Newton; a pseudo-time mass `cw·e^w/δ` is added while the
    /// residual is large and removed as it falls.
    fn solve(&self, w: &mut Vec<f64>, opts: &OracleOptions, history: &mut Vec<f64>) -> Result<f64> {
        let m = self.model;
        let cw = m.cell_weights();
        let mut f = self.residual(w);
        let mut nf = self.norm(&f);
        history.push(nf);
        let mut delta_t = 1.0;
        let mut iters = 0;
        while nf > opts.tol {
            if iters >= opts.max_newton {
                return Err(Error::NewtonDiverged {
                    iterations: iters,
                    residual: nf,
                });
            }
            iters += 1;
            let pseudo = if nf < 1e-3 { 0.0 } else { 1.0 / delta_t };
            let mass: Vec<f64> = (0..w.len()).map(|g| cw[g] * w[g].exp() * (1.0 + pseudo)).collect();
            let a = discrete::assemble(m, &mass, &Closure::Dirichlet, None);
            let ilu = Ilu0::new(&a)?;
            let rhs: Vec<f64> = f.iter().map(|v| -v).collect();
            let mut d = vec![0.0; w.len()];
            let lin_tol = (1e-2 * opts.tol).max(1e-4 * nf);
            bicgstab(&a, &ilu, &rhs, &mut d, lin_tol, 5000, |r| self.norm(r))?;
            let mut lambda = 1.0;
            loop {
                let trial: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + lambda * b).collect();
                let ft = self.residual(&trial);
                let nt = self.norm(&ft);
                if nt.is_finite() && nt < nf * (1.0 - 1e-4 * lambda) {
                    delta_t = (delta_t * nf / nt).min(1e12);
                    *w = trial;
                    f = ft;
                    nf = nt;
                    break;
                }
                lambda *= 0.5;
                if lambda < 1e-4 {
                    return Err(Error::NewtonDiverged {
                        iterations: iters,
                        residual: nf,
                    });
                }
            }
            history.push(nf);
        }
        Ok(nf)
    }
}

/// Row of end chart `ci` nearest to `rho`, as (row index, ρ of the row).
fn row_near(model: &SurfaceModel, ci: usize, rho: f64) -> usize {
    let c = &model.charts()[ci];
    (((rho - c.origin[1]) / c.spacing[1]).round() as usize).clamp(2, c.resolution[1] - 3)
}

/// θ-average of `w + 2ṽ` along row `j` of chart `ci`.
fn row_mean(model: &SurfaceModel, ci: usize, j: usize, w: &[f64]) -> f64 {
    let c = &model.charts()[ci];
    let v = model.background_log_factor();
    let n = c.resolution[0];
    (0..n)
        .map(|i| {
            let g = c.offset + c.local(i, j);
            w[g] + 2.0 * v[g]
        })
        .sum::<f64>()
        / n as f64
}

pub fn uniformize_oracle_with(model: &SurfaceModel, opts: &OracleOptions) -> Result<OracleSolution> {
    if model.euler_char() >= 0 {
        return Err(Error::InvalidModel(
            "the uniformizer with cusp ends needs negative Euler characteristic".into(),
        ));
    }
    let ends = model.ends();
    let mut shifts = vec![opts.initial_shift; ends.len()];
    let mut w = initial_guess(model, &shifts);
    let mut history = Vec::new();
    let mut residual = f64::NAN;
    let mut updates = 0;
    for round in 0..=opts.max_shift_updates {
        let problem = Liouville {
            model,
            bc: boundary_values(model, &shifts),
        };
        // keep the boundary rows consistent with the new data before solving
        for (g, b) in problem.bc.iter().enumerate() {
            if model.tag(g) == NodeTag::Truncation {
                w[g] = *b;
            }
        }
        residual = problem.solve(&mut w, opts, &mut history)?;
        let mut change: f64 = 0.0;
        let mut next = shifts.clone();
        for (j, e) in ends.iter().enumerate() {
            let ci = model.end_chart(j);
            // fit where the cusp has formed but well inside the truncation
            let rho_m = e.rho_min + 0.5 * (e.rho_max - e.rho_min);
            let row = row_near(model, ci, rho_m);
            let c = &model.charts()[ci];
            let rho = c.origin[1] + row as f64 * c.spacing[1];
            let l = row_mean(model, ci, row, &w);
            next[j] = (2.0 * (-l).exp()).sqrt() - rho;
            change = change.max((next[j] - shifts[j]).abs());
        }
        if change <= opts.shift_tol || round == opts.max_shift_updates {
            break;
        }
        shifts = next;
        updates += 1;
    }
    Ok(OracleSolution {
        u: exp_field(model, &w),
        shifts,
        residual,
        history,
        shift_updates: updates,
    })
}

fn boundary_values(model: &SurfaceModel, shifts: &[f64]) -> Vec<f64> {
    let v = model.background_log_factor();
    let mut bc = vec![0.0; model.num_nodes()];
    for c in model.charts() {
        let ChartKind::CylinderEnd { end } = c.kind else { continue };
        for g in c.offset..c.offset + c.len() {
            if model.tag(g) == NodeTag::Truncation {
                let rho = model.coord(g)[1];
                bc[g] = cusp_log(rho + shifts[end]) - 2.0 * v[g];
            }
        }
    }
    bc
}

/// Cusp profile on the ends and out to `r_out` in the core, matched to a
/// constant flat density beyond.
fn initial_guess(model: &SurfaceModel, shifts: &[f64]) -> Vec<f64> {
    let v = model.background_log_factor();
    let r_out = model.ends().iter().map(|e| (-e.rho_min).exp()).fold(0.0, f64::max);
    let mut w = vec![0.0; model.num_nodes()];
    for g in 0..w.len() {
        if !model.is_active(g) {
            continue;
        }
        let (j, rho) = model.end_coordinate(g);
        let s = shifts[j];
        w[g] = match model.charts()[model.chart_of(g)].kind {
            ChartKind::CylinderEnd { .. } => cusp_log(rho + s) - 2.0 * v[g],
            ChartKind::CartesianTorusCore => {
                // flat density 2/((ρ+s)² r²), frozen at r_out
                let rho = rho.max(-r_out.ln());
                cusp_log(rho + s) + 2.0 * rho - 2.0 * v[g]
            }
        };
    }
    w
}
