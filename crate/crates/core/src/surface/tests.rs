use std::f64::consts::{PI, TAU};
use std::sync::OnceLock;

use proptest::prelude::*;

use super::*;

fn default_model() -> &'static SurfaceModel {
    static M: OnceLock<SurfaceModel> = OnceLock::new();
    M.get_or_init(|| build_model(&ModelSpec::punctured_torus(1, 0.5, 48)).unwrap())
}

/// Global point of a node: torus coordinates for the core, the preimage
/// `p + e^{-ρ}(cos θ, sin θ)` for end charts.
fn torus_point(model: &SurfaceModel, g: usize) -> [f64; 2] {
    let x = model.coord(g);
    match model.charts()[model.chart_of(g)].kind {
        ChartKind::CartesianTorusCore => x,
        ChartKind::CylinderEnd { end } => {
            let p = model.ends()[end].puncture;
            let r = (-x[1]).exp();
            [p[0] + r * x[0].cos(), p[1] + r * x[0].sin()]
        }
    }
}

fn sample(model: &SurfaceModel, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    (0..model.num_nodes())
        .map(|g| if model.is_active(g) { f(torus_point(model, g)) } else { 0.0 })
        .collect()
}

fn relative_defect(model: &SurfaceModel) -> f64 {
    (model.gauss_bonnet_defect() / model.gauss_bonnet_target().unwrap()).abs()
}

#[test]
fn gauss_bonnet_one_puncture() {
    let m = build_model(&ModelSpec::punctured_torus(1, 0.5, 96)).unwrap();
    assert_eq!(m.euler_char(), -1);
    let target = m.gauss_bonnet_target().unwrap();
    assert!((target + 6.0 * PI).abs() < 1e-12);
    let total = m.weighted_sum(m.background_curvature());
    assert!((total - target).abs() <= 5e-3 * target.abs(), "{total} vs {target}");
    assert!(relative_defect(&m) < 1.5e-3);
}

#[test]
fn gauss_bonnet_euclidean_end() {
    let m = build_model(&ModelSpec::punctured_torus(1, 1.0, 96)).unwrap();
    let total = m.weighted_sum(m.background_curvature());
    assert!((total + 8.0 * PI).abs() <= 5e-3 * 8.0 * PI, "{total}");
}

#[test]
fn gauss_bonnet_two_punctures_second_order() {
    let defects: Vec<f64> = [96, 192]
        .iter()
        .map(|&n| {
            let m = build_model(&ModelSpec::punctured_torus(2, 0.25, n)).unwrap();
            assert_eq!(m.euler_char(), -2);
            assert!((m.gauss_bonnet_target().unwrap() + 10.0 * PI).abs() < 1e-12);
            m.gauss_bonnet_defect().abs()
        })
        .collect();
    let slope = (defects[0] / defects[1]).log2();
    assert!((slope - 2.0).abs() < 0.3, "defects {defects:?}, slope {slope}");
}

#[test]
fn build_rejects_bad_specs() {
    let ok = ModelSpec::punctured_torus(1, 0.5, 32);
    let mut none = ok.clone();
    none.punctures.clear();
    assert!(matches!(build_model(&none), Err(Error::InvalidModel(_))));
    let mut neg = ok.clone();
    neg.punctures[0].alpha = -1.0;
    assert!(build_model(&neg).is_err());
    let mut coarse = ok.clone();
    coarse.resolution = 8;
    assert!(build_model(&coarse).is_err());
    let mut close = ModelSpec::punctured_torus(2, 0.5, 32);
    close.punctures[1].position = [0.55, 0.55];
    close.punctures[0].position = [0.45, 0.45];
    assert!(build_model(&close).is_err());
    assert!(build_model(&ok.clone().rho_max(2.0)).is_err());
    assert!(SurfaceModel::exact_cone_fixture(0.5, 32, 1.0, 0.5).is_err());
}

#[test]
fn background_curvature_vanishes_on_exact_ends() {
    let m = default_model();
    let r_in = m.spec().unwrap().r_in;
    for g in 0..m.num_nodes() {
        if !m.is_solved(g) || m.chart_of(g) == 0 {
            continue;
        }
        // one stencil width past the cutoff radius
        let h_rho = m.charts()[m.chart_of(g)].spacing[1];
        if m.coord(g)[1] > -r_in.ln() + h_rho + 1e-9 {
            assert!(m.background_curvature()[g].abs() < 1e-12, "node {g}");
        }
    }
}

#[test]
fn laplacian_of_constant_is_zero() {
    let m = default_model();
    let lap = laplacian_apply(m, &vec![3.5; m.num_nodes()]).unwrap();
    assert!(lap.iter().all(|v| v.abs() < 1e-12));
}

#[test]
fn laplacian_of_flat_coordinate() {
    let m = default_model();
    let mut f = sample(m, |z| z[0]);
    // the chart coordinate jumps where the torus wraps; interpolation across
    // the puncture never sees the seam
    chart_sync(m, &mut f).unwrap();
    let lap = laplacian_apply(m, &f).unwrap();
    let n = m.charts()[0].resolution[0];
    let flat = m.flat_core_mask();
    for g in (0..n * n).filter(|&g| flat[g]) {
        let (i, _) = m.charts()[0].ij(g);
        if i > 1 && i < n - 2 {
            assert!(lap[g].abs() < 1e-9, "node {g}: {}", lap[g]);
        }
    }
}

#[test]
fn laplacian_of_rho_on_exact_end() {
    let m = default_model();
    let e = &m.ends()[0];
    let mut f = sample(m, |z| {
        let d = torus_delta(z, e.puncture);
        -(d[0].hypot(d[1])).ln()
    });
    chart_sync(m, &mut f).unwrap();
    let lap = laplacian_apply(m, &f).unwrap();
    let ci = m.end_chart(0);
    let c = &m.charts()[ci];
    // rows next to the overlap see interpolated values, which carry the
    // O(h²) interpolation error of -log r rather than the stencil's
    for local in 0..c.len() {
        let g = c.offset + local;
        let touches_overlap = m.stencil()[g]
            .iter()
            .any(|&nb| nb != NO_NEIGHBOR && m.tag(nb) == NodeTag::Overlap);
        if m.is_solved(g) && !touches_overlap {
            assert!(lap[g].abs() < 1e-9, "node {g}: {}", lap[g]);
        }
    }
}

#[test]
fn laplacian_rejects_bad_fields() {
    let m = default_model();
    let mut f = vec![0.0; m.num_nodes()];
    f[m.fringe()[0].node] = 1.0;
    assert!(matches!(laplacian_apply(m, &f), Err(Error::Unsynchronized { .. })));
    let mut f = vec![0.0; m.num_nodes()];
    f[5] = f64::NAN;
    assert!(matches!(laplacian_apply(m, &f), Err(Error::NonFinite { node: 5 })));
    assert!(matches!(laplacian_apply(m, &[0.0; 3]), Err(Error::FieldLength { .. })));
}

/// Bump supported well inside the flat part of the core.
fn flat_bump(center: [f64; 2], radius: f64) -> impl Fn([f64; 2]) -> f64 {
    move |z| {
        let d = torus_delta(z, center);
        let s = d[0].hypot(d[1]) / radius;
        if s < 1.0 {
            (1.0 - s * s).powi(4)
        } else {
            0.0
        }
    }
}

#[test]
fn laplacian_is_symmetric_on_the_flat_core() {
    let m = default_model();
    let f = sample(m, flat_bump([0.05, 0.9], 0.15));
    let g = sample(m, flat_bump([0.1, 0.95], 0.12));
    let lf = laplacian_apply(m, &f).unwrap();
    let lg = laplacian_apply(m, &g).unwrap();
    let a: f64 = (0..f.len()).map(|i| lf[i] * g[i] * m.area_weights()[i]).sum();
    let b: f64 = (0..f.len()).map(|i| f[i] * lg[i] * m.area_weights()[i]).sum();
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0), "{a} vs {b}");
    let total = m.weighted_sum(&lf);
    assert!(total.abs() < 1e-12, "{total}");
}

#[test]
fn curvature_of_constant_factors() {
    let m = default_model();
    let r1 = scalar_curvature(m, &vec![1.0; m.num_nodes()]).unwrap();
    for g in (0..m.num_nodes()).filter(|&g| m.is_solved(g)) {
        assert_eq!(r1[g], m.background_curvature()[g]);
    }
    let r = scalar_curvature(m, &vec![4.0; m.num_nodes()]).unwrap();
    for g in (0..m.num_nodes()).filter(|&g| m.is_solved(g)) {
        assert!((r[g] - m.background_curvature()[g] / 4.0).abs() < 1e-12);
    }
    let t1 = total_curvature(m, &vec![1.0; m.num_nodes()]).unwrap();
    let t4 = total_curvature(m, &vec![4.0; m.num_nodes()]).unwrap();
    assert!((t1 - t4).abs() < 1e-12 * t1.abs());
    assert!((t1 - m.weighted_sum(m.background_curvature())).abs() < 1e-12 * t1.abs());
}

#[test]
fn curvature_agrees_with_composed_operators() {
    let m = default_model();
    let mut s = sample(m, |z| 0.3 * (TAU * z[0]).sin() * (TAU * z[1]).cos());
    chart_sync(m, &mut s).unwrap();
    let u: Vec<f64> = s.iter().map(|x| x.exp()).collect();
    let direct = scalar_curvature(m, &u).unwrap();
    let lap = laplacian_apply(m, &s).unwrap();
    for g in (0..m.num_nodes()).filter(|&g| m.is_solved(g)) {
        let composed = (m.background_curvature()[g] - lap[g]) / u[g];
        assert!((direct[g] - composed).abs() <= 1e-12 * (1.0 + composed.abs()), "node {g}");
    }
}

#[test]
fn curvature_rejects_nonpositive_factor() {
    let m = default_model();
    let mut u = vec![1.0; m.num_nodes()];
    let g = (0..m.num_nodes()).find(|&g| m.is_solved(g)).unwrap();
    u[g] = 0.0;
    assert!(matches!(scalar_curvature(m, &u), Err(Error::NonPositive { node, .. }) if node == g));
}

#[test]
fn chart_sync_preserves_constants() {
    let m = default_model();
    let mut f = vec![2.25; m.num_nodes()];
    chart_sync(m, &mut f).unwrap();
    assert!(f.iter().enumerate().all(|(g, v)| !m.is_active(g) || (v - 2.25).abs() < 1e-14));
}

#[test]
fn chart_sync_needs_both_charts() {
    let m = default_model();
    let core_len = m.charts()[0].len();
    let mut f: Vec<f64> = (0..m.num_nodes()).map(|g| if g < core_len { 1.0 } else { f64::NAN }).collect();
    assert!(matches!(chart_sync(m, &mut f), Err(Error::MissingDonor { .. })));
}

#[test]
fn chart_sync_mismatch_is_second_order() {
    let smooth = |z: [f64; 2]| (TAU * z[0]).sin() * (TAU * z[1]).sin();
    let mismatch: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let m = build_model(&ModelSpec::punctured_torus(1, 0.5, n).rho_max(8.0)).unwrap();
            let exact = sample(&m, smooth);
            let mut f = exact.clone();
            chart_sync(&m, &mut f).unwrap();
            m.fringe()
                .iter()
                .map(|l| (f[l.node] - exact[l.node]).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let slope = (mismatch[0] / mismatch[2]).log2() / 2.0;
    assert!((slope - 2.0).abs() < 0.3, "mismatch {mismatch:?}, slope {slope}");
}

#[test]
fn overlap_donors_are_interior() {
    let m = default_model();
    for l in m.fringe() {
        assert_eq!(m.tag(l.node), NodeTag::Overlap);
        for &(d, w) in &l.donors {
            assert!(w >= -1e-14);
            if w > 0.0 {
                assert!(m.is_solved(d), "donor {d} of {} is not solved", l.node);
                assert_ne!(m.chart_of(d), m.chart_of(l.node));
            }
        }
    }
}

#[test]
fn distance_to_self_is_zero() {
    let m = default_model();
    let u = vec![1.0; m.num_nodes()];
    assert_eq!(geodesic_distance(m, &u, 7, 7).unwrap(), 0.0);
}

#[test]
fn radial_distance_on_exact_cone() {
    let alpha = 0.5;
    let m = SurfaceModel::exact_cone_fixture(alpha, 64, 0.0, 8.0).unwrap();
    let c = &m.charts()[0];
    let (a, b) = (c.local(3, 5), c.local(3, c.resolution[1] - 4));
    let (ra, rb) = (c.coord(a)[1], c.coord(b)[1]);
    let u = vec![1.0; m.num_nodes()];
    let d = geodesic_distance(&m, &u, a, b).unwrap();
    let exact = ((alpha * rb).exp() - (alpha * ra).exp()) / alpha;
    assert!((d / exact - 1.0).abs() < 1e-3, "{d} vs {exact}");
}

/// Flat torus distance, minimised over deck translates.
fn torus_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    let mut best = f64::INFINITY;
    for i in -1..=1 {
        for j in -1..=1 {
            best = best.min((b[0] - a[0] + i as f64).hypot(b[1] - a[1] + j as f64));
        }
    }
    best
}

/// Whether the straight torus segment between `a` and `b` keeps clear of
/// every curved region.
fn segment_clear(m: &SurfaceModel, a: [f64; 2], b: [f64; 2]) -> bool {
    let d = torus_delta(b, a);
    (0..=200).all(|s| {
        let t = s as f64 / 200.0;
        let z = [a[0] + t * d[0], a[1] + t * d[1]];
        m.ends().iter().all(|e| {
            let q = torus_delta(z, e.puncture);
            q[0].hypot(q[1]) > m.spec().unwrap().r_out + 0.02
        })
    })
}

#[test]
fn flat_core_distances_match_the_torus() {
    use rand::{Rng, SeedableRng};
    let m = build_model(&ModelSpec::punctured_torus(1, 0.5, 128).rho_max(8.0)).unwrap();
    let u = vec![1.0; m.num_nodes()];
    let graph = DistanceGraph::new(&m, &u).unwrap();
    let flat: Vec<usize> = m.flat_core_mask().iter().enumerate().filter(|(_, &f)| f).map(|(g, _)| g).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let mut tested = 0;
    while tested < 20 {
        let (a, b) = (flat[rng.gen_range(0..flat.len())], flat[rng.gen_range(0..flat.len())]);
        let (za, zb) = (m.coord(a), m.coord(b));
        if a == b || !segment_clear(&m, za, zb) {
            continue;
        }
        let d = graph.distance(a, b).unwrap();
        let exact = torus_distance(za, zb);
        assert!((d / exact - 1.0).abs() <= 0.05, "{a}->{b}: {d} vs {exact}");
        tested += 1;
    }
}

#[test]
fn distance_is_monotone_in_the_factor() {
    let m = default_model();
    let big: Vec<f64> = sample(m, |z| 1.5 + 0.5 * (TAU * z[0]).cos());
    let small: Vec<f64> = big.iter().map(|u| 0.7 * u).collect();
    let (a, b) = (10, m.charts()[0].len() / 2 + 3);
    let db = geodesic_distance(m, &big, a, b).unwrap();
    let ds = geodesic_distance(m, &small, a, b).unwrap();
    assert!(ds <= db);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_constant_scaling(c in 0.01f64..100.0) {
        let m = default_model();
        let r = scalar_curvature(m, &vec![c; m.num_nodes()]).unwrap();
        for g in (0..m.num_nodes()).filter(|&g| m.is_solved(g)) {
            prop_assert!((r[g] * c - m.background_curvature()[g]).abs() <= 1e-10 * (1.0 + m.background_curvature()[g].abs()));
        }
    }

    #[test]
    fn prop_distance_symmetric_and_triangle(a in 0usize..2304, b in 0usize..2304, c in 0usize..2304) {
        let m = default_model();
        prop_assume!(m.is_active(a) && m.is_active(b) && m.is_active(c));
        let u = vec![1.0; m.num_nodes()];
        let graph = DistanceGraph::new(m, &u).unwrap();
        let ab = graph.distance(a, b).unwrap();
        let ba = graph.distance(b, a).unwrap();
        let bc = graph.distance(b, c).unwrap();
        let ac = graph.distance(a, c).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(ac <= ab + bc + 1e-12);
    }
}
