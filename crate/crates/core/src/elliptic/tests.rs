use std::f64::consts::PI;
use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;
use crate::flow::{step_raw, BoundaryMode, step_rescaled, ConformalState, FlowConfig, FlowMode};
use crate::surface::ops::scalar_curvature;
use crate::surface::{build_model, torus_delta, ChartKind, ModelSpec, NodeTag};

fn model48() -> &'static SurfaceModel {
    static M: OnceLock<SurfaceModel> = OnceLock::new();
    M.get_or_init(|| build_model(&ModelSpec::punctured_torus(1, 0.5, 48)).unwrap())
}

fn oracle48() -> &'static OracleSolution {
    static O: OnceLock<OracleSolution> = OnceLock::new();
    O.get_or_init(|| uniformize_oracle(model48()).unwrap())
}

fn max_abs(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, |m, x| m.max(x.abs()))
}

/// Compact bump `(1 − s²)⁴`, `s = |z − c|/r`, and its flat Laplacian.
fn bump(c: [f64; 2], r: f64) -> (impl Fn([f64; 2]) -> f64, impl Fn([f64; 2]) -> f64) {
    let s2 = move |z: [f64; 2]| {
        let d = torus_delta(z, c);
        (d[0] * d[0] + d[1] * d[1]) / (r * r)
    };
    let value = move |z| {
        let s = s2(z);
        if s < 1.0 { (1.0 - s).powi(4) } else { 0.0 }
    };
    let lap = move |z| {
        let s = s2(z);
        if s < 1.0 {
            (-16.0 * (1.0 - s).powi(3) + 48.0 * s * (1.0 - s).powi(2)) / (r * r)
        } else {
            0.0
        }
    };
    (value, lap)
}

fn core_sample(model: &SurfaceModel, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    (0..model.num_nodes())
        .map(|g| {
            if model.is_active(g) && matches!(model.charts()[model.chart_of(g)].kind, ChartKind::CartesianTorusCore) {
                f(model.coord(g))
            } else {
                0.0
            }
        })
        .collect()
}

#[test]
fn zero_source_gives_zero_potential() {
    let m = model48();
    let (f, asym) = solve_potential(m, &vec![0.0; m.num_nodes()]).unwrap();
    assert_eq!(max_abs(f.iter().copied()), 0.0);
    assert!(asym.beta.iter().all(|&b| b == 0.0));
    assert_eq!(asym.compatibility_defect, 0.0);
}

#[test]
fn background_curvature_slope_on_the_end() {
    let m = build_model(&ModelSpec::punctured_torus(1, 0.5, 96)).unwrap();
    let (_, asym) = solve_potential(&m, m.background_curvature()).unwrap();
    let total = m.weighted_sum(m.background_curvature());
    assert!((asym.beta[0] - total / (2.0 * PI * 0.5)).abs() < 1e-12);
    println!("beta {:?} defect {} residual {}", asym.beta, asym.compatibility_defect, asym.residual);
    assert!((asym.beta[0] + 6.0).abs() < 0.03, "{:?}", asym.beta);
}

#[test]
fn fluxes_carry_the_total_source() {
    let m = build_model(&ModelSpec::with_angles(&[0.25, 0.75], 48)).unwrap();
    let q = end_fluxes(&m, -3.0);
    assert!((2.0 * PI * q.iter().sum::<f64>() + 3.0).abs() < 1e-12);
    assert!((q[1] / q[0] - 1.75 / 1.25).abs() < 1e-12);
    let (_, asym) = solve_potential(&m, m.background_curvature()).unwrap();
    let total = m.weighted_sum(m.background_curvature());
    println!("two ends: defect {} total {} residual {}", asym.compatibility_defect, total, asym.residual);
    assert!(asym.compatibility_defect.abs() < 1e-2 * total.abs());
    assert!(asym.residual < 1e-7);
}

fn manufactured_error(n: usize) -> f64 {
    let m = build_model(&ModelSpec::punctured_torus(1, 0.5, n)).unwrap();
    let (value, lap) = bump([0.05, 0.9], 0.15);
    let g = core_sample(&m, value);
    let src = core_sample(&m, lap);
    let (f, _) = solve_potential(&m, &src).unwrap();
    let flat = m.flat_core_mask();
    let nodes: Vec<usize> = (0..m.num_nodes()).filter(|&k| flat[k]).collect();
    let mean = nodes.iter().map(|&k| f[k] - g[k]).sum::<f64>() / nodes.len() as f64;
    max_abs(nodes.iter().map(|&k| f[k] - g[k] - mean))
}

#[test]
fn manufactured_solution_is_second_order() {
    let e = [manufactured_error(48), manufactured_error(96)];
    println!("manufactured {e:?}");
    assert!(e[0] / e[1] > 3.0, "{e:?}");
    assert!(e[1] < 1e-2);
}

#[test]
fn gauge_metric_is_nonpositively_curved() {
    let m = model48();
    let q = gauge_source(m).unwrap();
    assert!(m.weighted_sum(&q).abs() < 1e-10);
    let psi = gauge_nonpositive(m).unwrap();
    let u: Vec<f64> = psi.iter().map(|p| (2.0 * p).exp()).collect();
    let r = scalar_curvature(m, &u).unwrap();
    let rmax = (0..m.num_nodes()).filter(|&g| m.is_solved(g)).map(|g| r[g]).fold(f64::NEG_INFINITY, f64::max);
    println!("gauge max R {rmax}");
    assert!(rmax <= 1e-6, "{rmax}");
    let row = m.truncation_row(m.end_chart(0));
    assert!(row.map(|g| psi[g]).sum::<f64>().abs() < 1e-9);
}

#[test]
fn gauge_is_trivial_without_positive_curvature() {
    let m = model48().with_background_curvature(vec![-1.0; model48().num_nodes()]).unwrap();
    assert!(gauge_nonpositive(&m).unwrap().iter().all(|&p| p == 0.0));
    let flat = model48().with_background_curvature(vec![0.0; model48().num_nodes()]).unwrap();
    let mut r = vec![0.0; flat.num_nodes()];
    r[discrete::anchor_node(&flat)] = 1.0;
    let pos = flat.with_background_curvature(r).unwrap();
    assert!(gauge_source(&pos).is_err());
}

#[test]
fn oracle_solves_the_uniformization_equation() {
    let m = model48();
    let o = oracle48();
    assert!(o.residual <= 1e-8, "{}", o.residual);
    assert!(o.history.len() >= 1);
    let r = scalar_curvature(m, &o.u).unwrap();
    let core = m.core_mask(None);
    let dev = max_abs((0..m.num_nodes()).filter(|&g| core[g]).map(|g| r[g] + 1.0));
    println!("oracle |R+1| {dev} shifts {:?} updates {}", o.shifts, o.shift_updates);
    assert!(dev < 1e-6, "{dev}");
}

#[test]
fn oracle_is_stationary_under_the_rescaled_flow() {
    let m = model48();
    let o = oracle48();
    // the oracle carries its own cusp values on the truncation rows
    let cfg = FlowConfig {
        mode: FlowMode::Rescaled,
        boundary_mode: BoundaryMode::Frozen,
        ..FlowConfig::default()
    };
    let s0 = ConformalState::from_field(m, FlowMode::Rescaled, 0.0, o.u.clone()).unwrap();
    let s1 = step_rescaled(m, &s0, 0.05, &cfg).unwrap().state;
    let drift = max_abs((0..m.num_nodes()).filter(|&g| m.is_solved(g)).map(|g| (s1.u[g] - s0.u[g]) / s0.u[g]));
    println!("oracle step drift {drift} tol {}", cfg.newton_tol);
    assert!(drift <= 10.0 * cfg.newton_tol.max(1e-8), "{drift}");
}

#[test]
fn oracle_area_grows_with_truncation() {
    let areas: Vec<f64> = [6.0, 8.0]
        .iter()
        .map(|&rm| {
            let m = build_model(&ModelSpec::punctured_torus(1, 0.5, 48).rho_max(rm)).unwrap();
            let o = uniformize_oracle(&m).unwrap();
            m.weighted_sum(&o.u)
        })
        .collect();
    println!("oracle areas {areas:?} vs {}", 4.0 * PI);
    assert!(areas[0] < areas[1]);
    assert!(areas[1] <= 4.0 * PI);
}

#[test]
fn constant_potential_does_not_move() {
    let m = model48();
    let st0 = ConformalState::initial(m, FlowMode::Raw);
    let mut pot = PotentialState::new(m, &st0).unwrap();
    pot.f = (0..m.num_nodes()).map(|g| if m.is_active(g) { 2.5 } else { 0.0 }).collect();
    pot.flux = vec![0.0; m.ends().len()];
    let mut st1 = st0.clone();
    st1.time = 0.1;
    let next = evolve_potential(m, &pot, &st0, &st1).unwrap();
    let dev = max_abs((0..m.num_nodes()).filter(|&g| m.is_active(g)).map(|g| next.f[g] - 2.5));
    assert!(dev < 1e-9, "{dev}");
}

#[test]
fn exact_cone_potential_vanishes() {
    let m = SurfaceModel::exact_cone_fixture(0.5, 32, 0.0, 8.0).unwrap();
    let st0 = ConformalState::initial(&m, FlowMode::Raw);
    let pot = PotentialState::new(&m, &st0).unwrap();
    assert!(max_abs(pot.f0.iter().copied()) < 1e-12);
    let st1 = step_raw(&m, &st0, 0.1, &FlowConfig::default()).unwrap().state;
    let next = evolve_potential(&m, &pot, &st0, &st1).unwrap();
    assert!(max_abs(next.f.iter().copied()) < 1e-12);
    assert!(evolve_potential(&m, &pot, &st1, &st0).is_err());
}

fn one_step_identity_defect(m: &SurfaceModel, dt: f64) -> f64 {
    let st0 = ConformalState::initial(m, FlowMode::Raw);
    let pot0 = PotentialState::new(m, &st0).unwrap();
    let st1 = step_raw(m, &st0, dt, &FlowConfig::default()).unwrap().state;
    let pot1 = evolve_potential(m, &pot0, &st0, &st1).unwrap();
    let core = m.core_mask(None);
    max_abs((0..m.num_nodes()).filter(|&g| core[g]).map(|g| st1.u[g].ln() + pot1.f[g] - pot1.f0[g]))
}

#[test]
fn potential_identity_local_error_is_second_order_in_dt() {
    // one backward-Euler step leaves a defect of about (Δ log u)²/2
    let m = model48();
    let e = [one_step_identity_defect(m, 1e-5), one_step_identity_defect(m, 5e-6)];
    println!("identity defects {e:?}");
    assert!(e[0] < 1e-3, "{e:?}");
    let ratio = e[1] / e[0];
    assert!((0.2..=0.32).contains(&ratio), "{e:?}");
}

#[test]
fn tagged_nodes_never_enter_the_source() {
    let m = model48();
    let mut src = vec![0.0; m.num_nodes()];
    for g in 0..m.num_nodes() {
        if m.tag(g) == NodeTag::Hole {
            src[g] = 1.0;
        }
    }
    let (f, _) = solve_potential(m, &src).unwrap();
    assert!(max_abs(f.iter().copied()) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn potential_is_linear_in_the_source(a in -2.0f64..2.0, c in 0.1f64..0.9) {
        let m = model48();
        let (_, lap) = bump([c, 0.9], 0.12);
        let s = core_sample(m, lap);
        let (f1, _) = solve_potential(m, &s).unwrap();
        let scaled: Vec<f64> = s.iter().map(|x| a * x).collect();
        let (fa, _) = solve_potential(m, &scaled).unwrap();
        let scale = max_abs(f1.iter().copied()).max(1.0);
        let dev = max_abs(f1.iter().zip(&fa).map(|(x, y)| a * x - y));
        prop_assert!(dev <= 1e-5 * scale * a.abs().max(1.0), "{}", dev);
    }
}

#[test]
fn source_length_is_checked() {
    let m = model48();
    assert!(solve_potential(m, &[0.0; 3]).is_err());
}
