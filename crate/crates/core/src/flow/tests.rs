use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;
use crate::surface::{build_model, total_curvature, ModelSpec};

fn small_model() -> &'static SurfaceModel {
    static M: OnceLock<SurfaceModel> = OnceLock::new();
    M.get_or_init(|| build_model(&ModelSpec::punctured_torus(1, 0.5, 32)).unwrap())
}

fn cone() -> SurfaceModel {
    SurfaceModel::exact_cone_fixture(0.5, 32, 0.0, 8.0).unwrap()
}

fn sup_dev(model: &SurfaceModel, u: &[f64], value: f64) -> f64 {
    (0..u.len())
        .filter(|&g| model.is_active(g))
        .map(|g| (u[g] - value).abs())
        .fold(0.0, f64::max)
}

#[test]
fn exact_cone_is_stationary() {
    let m = cone();
    let cfg = FlowConfig::default();
    let s = ConformalState::initial(&m, FlowMode::Raw);
    for dt in [1e-3, 0.1, 5.0] {
        let out = step_raw(&m, &s, dt, &cfg).unwrap();
        assert!(sup_dev(&m, &out.state.u, 1.0) < 1e-12);
    }
    let traj = run(&m, &FlowConfig { t_end: 1.0, snapshot_schedule: vec![0.25, 0.5], ..cfg }, &s).unwrap();
    assert_eq!(traj.times(), vec![0.0, 0.25, 0.5, 1.0]);
    for snap in &traj.snapshots {
        assert!(sup_dev(&m, &snap.state.u, 1.0) < 1e-12);
    }
}

#[test]
fn constant_curvature_raw_step() {
    // R₀ ≡ −1 with a closure that keeps constants: u(t) = 1 + t
    let m = small_model().with_background_curvature(vec![-1.0; small_model().num_nodes()]).unwrap();
    let cfg = FlowConfig {
        boundary_mode: BoundaryMode::ZeroFlux,
        newton_tol: 1e-10,
        ..Default::default()
    };
    let s = ConformalState::initial(&m, FlowMode::Raw);
    let out = step_raw(&m, &s, 0.1, &cfg).unwrap();
    assert!(sup_dev(&m, &out.state.u, 1.1) < 1e-9);
    assert_eq!(out.state.step_count, 1);
    assert_eq!(out.state.last_dt, 0.1);
    assert!((out.state.time - 0.1).abs() < 1e-15);
}

#[test]
fn constant_curvature_rescaled_step() {
    let m = small_model().with_background_curvature(vec![-1.0; small_model().num_nodes()]).unwrap();
    let cfg = FlowConfig {
        mode: FlowMode::Rescaled,
        boundary_mode: BoundaryMode::ZeroFlux,
        newton_tol: 1e-10,
        ..Default::default()
    };
    let c = 3.0;
    let s = ConformalState {
        mode: FlowMode::Rescaled,
        time: 0.0,
        u: vec![c; m.num_nodes()],
        step_count: 0,
        last_dt: 0.0,
        next_dt: 0.0,
    };
    let dtau = 0.05;
    let out = step_rescaled(&m, &s, dtau, &cfg).unwrap();
    // backward Euler of ũ' = 1 − ũ
    assert!(sup_dev(&m, &out.state.u, (c + dtau) / (1.0 + dtau)) < 1e-9);
    let exact = 1.0 + (c - 1.0) * (-dtau).exp();
    assert!(sup_dev(&m, &out.state.u, exact) < (c - 1.0) * dtau * dtau);
}

#[test]
fn step_checks_mode_and_arguments() {
    let m = cone();
    let cfg = FlowConfig::default();
    let raw = ConformalState::initial(&m, FlowMode::Raw);
    assert!(matches!(step_rescaled(&m, &raw, 0.1, &cfg), Err(Error::WrongMode { .. })));
    assert!(matches!(step_raw(&m, &raw, 0.0, &cfg), Err(Error::InvalidArgument(_))));
    let mut bad = raw.clone();
    bad.u[40] = -1.0;
    assert!(matches!(step_raw(&m, &bad, 0.1, &cfg), Err(Error::NonPositive { node: 40, .. })));
    assert!(ConformalState::from_field(&m, FlowMode::Raw, -1.0, vec![1.0; m.num_nodes()]).is_err());
    assert!(raw.to_rescaled().is_err());
}

#[test]
fn adaptive_dt_rule() {
    let cfg = FlowConfig {
        dt_max: 1.0,
        ..Default::default()
    };
    let mut s = ConformalState::initial(small_model(), FlowMode::Raw);
    s.last_dt = 0.1;
    assert!((adaptive_dt(&s, 3, &cfg) - 0.125).abs() < 1e-15);
    assert!((adaptive_dt(&s, 12, &cfg) - 0.05).abs() < 1e-15);
    assert!((adaptive_dt(&s, 7, &cfg) - 0.1).abs() < 1e-15);
    s.last_dt = 0.9;
    assert_eq!(adaptive_dt(&s, 3, &cfg), 1.0);
    s.last_dt = 1e-9;
    assert_eq!(adaptive_dt(&s, 12, &cfg), cfg.dt_floor());
}

#[test]
fn schedule_outside_the_run_is_rejected() {
    let m = cone();
    let cfg = FlowConfig {
        t_end: 1.0,
        snapshot_schedule: vec![2.0],
        ..Default::default()
    };
    let err = run(&m, &cfg, &ConformalState::initial(&m, FlowMode::Raw)).unwrap_err();
    assert!(matches!(err.source, Error::InvalidArgument(_)));
    assert!(err.partial.snapshots.is_empty());
}

#[test]
fn config_validation() {
    let ok = FlowConfig::default();
    assert!(ok.validate().is_ok());
    assert!(FlowConfig { dt_initial: 0.0, ..ok.clone() }.validate().is_err());
    assert!(FlowConfig { safety_factor: 1.0, ..ok.clone() }.validate().is_err());
    assert!(FlowConfig { t_end: f64::INFINITY, ..ok.clone() }.validate().is_err());
    assert!(FlowConfig { dt_relative: Some(-1.0), ..ok.clone() }.validate().is_err());
    assert!(FlowConfig { dt_max: 1e-4, ..ok }.validate().is_err());
}

#[test]
fn snapshots_land_on_schedule_and_series_is_per_step() {
    let m = small_model();
    let cfg = FlowConfig {
        t_end: 1.0,
        snapshot_schedule: vec![0.3, 0.7],
        ..Default::default()
    };
    let traj = run(m, &cfg, &ConformalState::initial(m, FlowMode::Raw)).unwrap();
    assert_eq!(traj.times(), vec![0.0, 0.3, 0.7, 1.0]);
    let last = &traj.snapshots.last().unwrap().state;
    assert_eq!(traj.series.len() as u64, last.step_count + 1);
    assert!(traj.series.windows(2).all(|w| w[1].time > w[0].time));
    assert!(traj.snapshots.iter().all(|s| s.state.u.iter().all(|&u| u > 0.0)));
    assert!(traj.max_dt <= cfg.dt_max);
}

#[test]
fn total_curvature_drift_is_second_order() {
    let drift = |n: usize| {
        let m = build_model(&ModelSpec::punctured_torus(1, 0.5, n)).unwrap();
        let cfg = FlowConfig {
            t_end: 0.5,
            ..Default::default()
        };
        let traj = run(&m, &cfg, &ConformalState::initial(&m, FlowMode::Raw)).unwrap();
        let t0 = total_curvature(&m, &traj.snapshots[0].state.u).unwrap();
        let t1 = total_curvature(&m, &traj.snapshots.last().unwrap().state.u).unwrap();
        ((t1 - t0) / t0).abs()
    };
    let (coarse, fine) = (drift(48), drift(96));
    assert!(coarse / fine >= 4.0, "{coarse} -> {fine}");
    let h = 1.0 / 96.0;
    assert!(fine <= 20.0 * h * h, "{fine}");
}

#[test]
fn relative_cap_limits_every_step() {
    let m = small_model();
    let cfg = FlowConfig {
        t_end: 2.0,
        dt_relative: Some(0.05),
        ..Default::default()
    };
    let traj = run(m, &cfg, &ConformalState::initial(m, FlowMode::Raw)).unwrap();
    for w in traj.series.windows(2) {
        let dt = w[1].time - w[0].time;
        assert!(dt <= (0.05 * w[0].time).max(cfg.dt_initial) * (1.0 + 1e-12), "dt {dt} at t {}", w[0].time);
    }
}

#[test]
fn backward_euler_is_first_order() {
    let m = small_model();
    let end = |dt: f64| {
        let cfg = FlowConfig {
            t_end: 0.4,
            dt_initial: dt,
            dt_max: dt,
            fixed_dt: true,
            newton_tol: 1e-11,
            ..Default::default()
        };
        run(m, &cfg, &ConformalState::initial(m, FlowMode::Raw)).unwrap().snapshots.pop().unwrap().state.u
    };
    let (a, b, c) = (end(0.04), end(0.02), end(0.01));
    let ratio = sup_dev_pair(m, &a, &b) / sup_dev_pair(m, &b, &c);
    assert!((ratio - 2.0).abs() < 0.3, "ratio {ratio}");
}

fn sup_dev_pair(model: &SurfaceModel, a: &[f64], b: &[f64]) -> f64 {
    (0..a.len())
        .filter(|&g| model.is_active(g))
        .map(|g| (a[g] - b[g]).abs())
        .fold(0.0, f64::max)
}

#[test]
fn rescaled_steps_do_not_increase() {
    let m = small_model();
    let cfg = FlowConfig {
        mode: FlowMode::Rescaled,
        ..Default::default()
    };
    let mut s = rescaled_start(m, &cfg).unwrap();
    assert_eq!(s.time, 0.0);
    for dtau in [0.05, 0.2, 0.5] {
        let out = step_rescaled(m, &s, dtau, &cfg).unwrap();
        for g in (0..m.num_nodes()).filter(|&g| m.is_active(g)) {
            assert!(out.state.u[g] <= s.u[g] * (1.0 + 1e-7), "node {g}");
        }
        s = out.state;
    }
}

#[test]
fn resumed_run_matches_unbroken() {
    let m = small_model();
    let cfg = FlowConfig {
        t_end: 3.0,
        snapshot_schedule: vec![1.0, 2.0],
        track_potential: true,
        ..Default::default()
    };
    let init = ConformalState::initial(m, FlowMode::Raw);
    let full = run(m, &cfg, &init).unwrap();
    let first = run(m, &FlowConfig { t_end: 1.0, snapshot_schedule: vec![1.0], ..cfg.clone() }, &init).unwrap();
    let rest = run_from(m, &cfg, first.snapshots.last().unwrap().clone()).unwrap();
    let mut series = first.series.clone();
    series.extend(rest.series.into_iter().skip(1));
    assert_eq!(series, full.series);
    assert_eq!(rest.snapshots.last(), full.snapshots.last());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn prop_adaptive_dt_clamped(dt in 1e-9f64..10.0, iters in 0usize..30, dt_max in 0.01f64..5.0) {
        let cfg = FlowConfig { dt_initial: 1e-3, dt_max, ..Default::default() };
        let mut s = ConformalState::initial(small_model(), FlowMode::Raw);
        s.last_dt = dt;
        let next = adaptive_dt(&s, iters, &cfg);
        prop_assert!(next >= cfg.dt_floor() && next <= cfg.dt_max);
        prop_assert_eq!(next, adaptive_dt(&s, iters, &cfg));
    }

    #[test]
    fn prop_constant_decay_matches_backward_euler(c in 0.2f64..5.0, dtau in 0.01f64..1.0) {
        let base = small_model();
        let m = base.with_background_curvature(vec![-1.0; base.num_nodes()]).unwrap();
        let cfg = FlowConfig { mode: FlowMode::Rescaled, boundary_mode: BoundaryMode::ZeroFlux, newton_tol: 1e-10, ..Default::default() };
        let s = ConformalState { mode: FlowMode::Rescaled, time: 1.0, u: vec![c; m.num_nodes()], step_count: 0, last_dt: 0.0, next_dt: 0.0 };
        let out = step_rescaled(&m, &s, dtau, &cfg).unwrap();
        prop_assert!(sup_dev(&m, &out.state.u, (c + dtau) / (1.0 + dtau)) < 1e-8 * c.max(1.0));
    }
}
