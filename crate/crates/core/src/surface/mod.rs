//! Discretized asymptotically conical surfaces.
//!
//! The surface family is the flat unit torus with `k` punctures. Near each
//! puncture the background metric is blown up to an exact cone end, so the
//! Euler characteristic is `-k` and every end has a prescribed cone angle.
//!
//! The atlas has one doubly periodic Cartesian chart for the core (small disks
//! around the punctures removed) and one cylinder chart `(θ, ρ)` per end, with
//! `ρ = -log|z - p|`. In cylinder coordinates an exact cone of angle `2πα` is
//! `e^{2αρ}(dρ² + dθ²)`, so the end is resolved uniformly all the way out to
//! the truncation radius. The charts overlap in an annulus around each
//! puncture; overlap nodes take bilinear interpolants of the partner chart.

mod distance;
pub(crate) mod ops;

pub use distance::{geodesic_distance, DistanceGraph};
pub use ops::{
    chart_sync, check_synchronized, gradient_norm_sq, laplacian_apply, scalar_curvature,
    total_curvature,
};

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_R_IN: f64 = 0.1;
pub const DEFAULT_R_OUT: f64 = 0.2;
pub const DEFAULT_R_CUT: f64 = 0.05;
pub const MIN_RESOLUTION: usize = 16;

/// Marker for a missing stencil neighbour (beyond the truncation row).
pub const NO_NEIGHBOR: usize = usize::MAX;

/// One puncture of the torus together with the geometry of its end.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PunctureSpec {
    pub position: [f64; 2],
    pub alpha: f64,
    #[serde(default = "default_order_tau")]
    pub order_tau: f64,
    #[serde(default)]
    pub perturbation_amp: f64,
}

fn default_order_tau() -> f64 {
    1.0
}

/// Everything needed to build a [`SurfaceModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub punctures: Vec<PunctureSpec>,
    /// Core nodes per direction.
    pub resolution: usize,
    /// Angular nodes on every end chart; defaults to `resolution`.
    #[serde(default)]
    pub end_resolution: Option<usize>,
    /// Truncation in cylinder coordinates; defaults to `12/α` per end.
    #[serde(default)]
    pub rho_max: Option<f64>,
    #[serde(default = "default_r_in")]
    pub r_in: f64,
    #[serde(default = "default_r_out")]
    pub r_out: f64,
    #[serde(default = "default_r_cut")]
    pub r_cut: f64,
}

fn default_r_in() -> f64 {
    DEFAULT_R_IN
}
fn default_r_out() -> f64 {
    DEFAULT_R_OUT
}
fn default_r_cut() -> f64 {
    DEFAULT_R_CUT
}

impl ModelSpec {
    /// `k` punctures spread along the diagonal, all with the same angle.
    pub fn punctured_torus(k: usize, alpha: f64, resolution: usize) -> Self {
        Self::with_angles(&vec![alpha; k], resolution)
    }

    pub fn with_angles(alphas: &[f64], resolution: usize) -> Self {
        let k = alphas.len().max(1) as f64;
        let punctures = alphas
            .iter()
            .enumerate()
            .map(|(j, &alpha)| {
                let c = (j as f64 + 0.5) / k;
                PunctureSpec {
                    position: [c, c],
                    alpha,
                    order_tau: 1.0,
                    perturbation_amp: 0.0,
                }
            })
            .collect();
        Self {
            punctures,
            resolution,
            end_resolution: None,
            rho_max: None,
            r_in: DEFAULT_R_IN,
            r_out: DEFAULT_R_OUT,
            r_cut: DEFAULT_R_CUT,
        }
    }

    pub fn rho_max(mut self, rho_max: f64) -> Self {
        self.rho_max = Some(rho_max);
        self
    }

    pub fn end_resolution(mut self, n: usize) -> Self {
        self.end_resolution = Some(n);
        self
    }

    pub fn perturbation(mut self, amp: f64, order_tau: f64) -> Self {
        for p in &mut self.punctures {
            p.perturbation_amp = amp;
            p.order_tau = order_tau;
        }
        self
    }
}

/// A cone end: angle `2πα`, decay order `τ`, optional test perturbation
/// `A·e^{-ατρ}·cos θ` added to the log factor, and the extent of its chart.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeEnd {
    pub angle_alpha: f64,
    pub order_tau: f64,
    pub perturbation_amp: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub puncture: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeTag {
    Interior,
    Overlap,
    Truncation,
    /// Inside a removed disk; carries no data.
    Hole,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChartKind {
    CartesianTorusCore,
    CylinderEnd { end: usize },
}

/// A uniform grid in one conformal chart. Local index is `j * n0 + i` with `i`
/// along the first coordinate (`x` on the core, `θ` on an end) and `j` along
/// the second (`y`, resp. `ρ`). The first coordinate is always periodic.
#[derive(Clone, Debug)]
pub struct ChartGrid {
    pub kind: ChartKind,
    pub resolution: [usize; 2],
    pub spacing: [f64; 2],
    pub origin: [f64; 2],
    pub offset: usize,
    pub boundary_tags: Vec<NodeTag>,
}

impl ChartGrid {
    pub fn len(&self) -> usize {
        self.resolution[0] * self.resolution[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn periodic_second(&self) -> bool {
        matches!(self.kind, ChartKind::CartesianTorusCore)
    }

    pub fn local(&self, i: usize, j: usize) -> usize {
        j * self.resolution[0] + i
    }

    pub fn ij(&self, local: usize) -> (usize, usize) {
        (local % self.resolution[0], local / self.resolution[0])
    }

    pub fn coord(&self, local: usize) -> [f64; 2] {
        let (i, j) = self.ij(local);
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
        ]
    }

    pub fn node_coordinates(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|l| self.coord(l))
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing[0] * self.spacing[1]
    }

    /// Conductances of the five-point stencil scaled by the cell area:
    /// `cell·Δ_h f = Σ κ_k (f_k − f)`.
    pub fn kappa(&self) -> [f64; 2] {
        [
            self.spacing[1] / self.spacing[0],
            self.spacing[0] / self.spacing[1],
        ]
    }

    /// Global node index of local `(i, j)`, wrapping periodic directions.
    pub(crate) fn global_wrapped(&self, i: isize, j: isize) -> Option<usize> {
        let n0 = self.resolution[0] as isize;
        let n1 = self.resolution[1] as isize;
        let i = i.rem_euclid(n0) as usize;
        let j = if self.periodic_second() {
            j.rem_euclid(n1) as usize
        } else if j < 0 || j >= n1 {
            return None;
        } else {
            j as usize
        };
        Some(self.offset + self.local(i, j))
    }
}

/// Bilinear interpolation data for one overlap node.
#[derive(Clone, Copy, Debug)]
pub struct FringeLink {
    pub node: usize,
    pub donors: [(usize, f64); 4],
    /// Chart holding the donors, and the node's coordinates in that chart.
    pub partner: usize,
    pub at: [f64; 2],
}

/// Analytic background log factor, shared by the model and the distance graph.
#[derive(Clone, Debug)]
pub struct Background {
    ends: Vec<ConeEnd>,
    r_in: f64,
    r_out: f64,
    r_cut: f64,
}

/// Quintic smoothstep cutoff: 1 for `r ≤ r_in`, 0 for `r ≥ r_out`.
pub fn cutoff(r: f64, r_in: f64, r_out: f64) -> f64 {
    let s = ((r - r_in) / (r_out - r_in)).clamp(0.0, 1.0);
    1.0 - s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// C^∞ monotone transition from 0 (s ≤ 0) to 1 (s ≥ 1).
pub fn smooth_transition(s: f64) -> f64 {
    fn bump(x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            (-1.0 / x).exp()
        }
    }
    let a = bump(s);
    let b = bump(1.0 - s);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

/// Minimum-image displacement on the unit torus.
pub fn torus_delta(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let mut d = [a[0] - b[0], a[1] - b[1]];
    for c in &mut d {
        *c -= c.round();
    }
    d
}

impl Background {
    /// Log factor `v` of `g₀ = e^{2v}|dz|²` at a core point.
    pub fn core(&self, z: [f64; 2]) -> f64 {
        self.ends
            .iter()
            .map(|e| {
                let d = torus_delta(z, e.puncture);
                let r = d[0].hypot(d[1]);
                if r >= self.r_out {
                    0.0
                } else {
                    (e.angle_alpha + 1.0) * cutoff(r, self.r_in, self.r_out) * -r.ln()
                }
            })
            .sum()
    }

    /// Log factor `ṽ` of `g₀ = e^{2ṽ}(dρ² + dθ²)` on end `j`.
    pub fn end(&self, j: usize, rho: f64, theta: f64) -> f64 {
        let e = &self.ends[j];
        let r = (-rho).exp();
        let own = if r <= self.r_in {
            e.angle_alpha * rho
        } else {
            (e.angle_alpha + 1.0) * cutoff(r, self.r_in, self.r_out) * rho - rho
        };
        let z = [
            e.puncture[0] + r * theta.cos(),
            e.puncture[1] + r * theta.sin(),
        ];
        let others: f64 = self
            .ends
            .iter()
            .enumerate()
            .filter(|&(k, _)| k != j)
            .map(|(_, o)| {
                let d = torus_delta(z, o.puncture);
                let rr = d[0].hypot(d[1]);
                if rr >= self.r_out {
                    0.0
                } else {
                    (o.angle_alpha + 1.0) * cutoff(rr, self.r_in, self.r_out) * -rr.ln()
                }
            })
            .sum();
        own + others + self.perturbation(j, rho, theta)
    }

    /// The order-τ test perturbation, ramped in beyond the core's removed disk
    /// so both charts see a consistent background.
    pub fn perturbation(&self, j: usize, rho: f64, theta: f64) -> f64 {
        let e = &self.ends[j];
        if e.perturbation_amp == 0.0 {
            return 0.0;
        }
        let start = -self.r_cut.ln();
        let ramp = smooth_transition(rho - start);
        ramp * e.perturbation_amp * (-e.angle_alpha * e.order_tau * rho).exp() * theta.cos()
    }

    /// Whether the end is an exact cone at `rho` (zero background curvature).
    fn exactly_conic(&self, j: usize, rho: f64) -> bool {
        (-rho).exp() <= self.r_in && self.ends[j].perturbation_amp == 0.0
    }

    fn single_cone(alpha: f64) -> Self {
        Self {
            ends: vec![ConeEnd {
                angle_alpha: alpha,
                order_tau: 1.0,
                perturbation_amp: 0.0,
                rho_min: 0.0,
                rho_max: 0.0,
                puncture: [0.5, 0.5],
            }],
            r_in: f64::INFINITY,
            r_out: f64::INFINITY,
            r_cut: 0.0,
        }
    }
}

/// Immutable discretization of `(M, g₀)`.
#[derive(Clone, Debug)]
pub struct SurfaceModel {
    spec: Option<ModelSpec>,
    euler_char: i64,
    ends: Vec<ConeEnd>,
    charts: Vec<ChartGrid>,
    background: Background,
    background_log_factor: Vec<f64>,
    background_curvature: Vec<f64>,
    area_weights: Vec<f64>,
    cell_weights: Vec<f64>,
    partition: Vec<f64>,
    tags: Vec<NodeTag>,
    chart_of: Vec<u32>,
    stencil: Vec<[usize; 4]>,
    fringe: Vec<FringeLink>,
    fringe_of: Vec<u32>,
    blend: [f64; 2],
    gauss_bonnet_target: Option<f64>,
    gauss_bonnet_defect: f64,
}

/// Builds the punctured-torus model. See the module docs for the geometry.
pub fn build_model(spec: &ModelSpec) -> Result<SurfaceModel> {
    let k = spec.punctures.len();
    if k == 0 {
        return Err(Error::InvalidModel(
            "Euler characteristic must be negative: need at least one puncture".into(),
        ));
    }
    if spec.resolution < MIN_RESOLUTION {
        return Err(Error::InvalidModel(format!(
            "resolution {} below minimum {MIN_RESOLUTION}",
            spec.resolution
        )));
    }
    let n_theta = spec.end_resolution.unwrap_or(spec.resolution);
    if n_theta < MIN_RESOLUTION {
        return Err(Error::InvalidModel(format!(
            "end resolution {n_theta} below minimum {MIN_RESOLUTION}"
        )));
    }
    if !(0.0 < spec.r_cut && spec.r_cut < spec.r_in && spec.r_in < spec.r_out && spec.r_out < 0.5)
    {
        return Err(Error::InvalidModel(
            "need 0 < r_cut < r_in < r_out < 1/2".into(),
        ));
    }
    for (j, p) in spec.punctures.iter().enumerate() {
        if !(p.alpha > 0.0 && p.alpha.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "puncture {j}: alpha must be positive, got {}",
                p.alpha
            )));
        }
        if !(p.order_tau > 0.0 && p.order_tau.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "puncture {j}: order_tau must be positive, got {}",
                p.order_tau
            )));
        }
        if !p.perturbation_amp.is_finite() {
            return Err(Error::InvalidModel(format!(
                "puncture {j}: perturbation amplitude must be finite"
            )));
        }
        if !p.position.iter().all(|c| (0.0..1.0).contains(c)) {
            return Err(Error::InvalidModel(format!(
                "puncture {j}: position must lie in [0,1)^2"
            )));
        }
        for (i, q) in spec.punctures.iter().enumerate().take(j) {
            let d = torus_delta(p.position, q.position);
            if d[0].hypot(d[1]) < 2.0 * spec.r_out {
                return Err(Error::InvalidModel(format!(
                    "punctures {i} and {j} are closer than 2·r_out; cutoff annuli overlap"
                )));
            }
        }
    }

    let rho_min = -spec.r_out.ln();
    let rho_cut = -spec.r_cut.ln();
    let ends: Vec<ConeEnd> = spec
        .punctures
        .iter()
        .map(|p| ConeEnd {
            angle_alpha: p.alpha,
            order_tau: p.order_tau,
            perturbation_amp: p.perturbation_amp,
            rho_min,
            rho_max: spec.rho_max.unwrap_or(12.0 / p.alpha),
            puncture: p.position,
        })
        .collect();
    for (j, e) in ends.iter().enumerate() {
        if !(e.rho_max > rho_cut) || !e.rho_max.is_finite() {
            return Err(Error::InvalidModel(format!(
                "end {j}: truncation rho_max = {} must exceed the cutoff coordinate {rho_cut:.4}",
                e.rho_max
            )));
        }
    }
    let background = Background {
        ends: ends.clone(),
        r_in: spec.r_in,
        r_out: spec.r_out,
        r_cut: spec.r_cut,
    };

    let n = spec.resolution;
    let h = 1.0 / n as f64;
    let mut charts = Vec::with_capacity(k + 1);
    let mut core_tags = vec![NodeTag::Interior; n * n];
    for jj in 0..n {
        for ii in 0..n {
            let z = [ii as f64 * h, jj as f64 * h];
            let hole = ends.iter().any(|e| {
                let d = torus_delta(z, e.puncture);
                d[0].hypot(d[1]) < spec.r_cut
            });
            if hole {
                core_tags[jj * n + ii] = NodeTag::Hole;
            }
        }
    }
    let mut fringe_core = core_tags.clone();
    for jj in 0..n {
        for ii in 0..n {
            if core_tags[jj * n + ii] != NodeTag::Interior {
                continue;
            }
            let nb = [
                ((ii + n - 1) % n, jj),
                ((ii + 1) % n, jj),
                (ii, (jj + n - 1) % n),
                (ii, (jj + 1) % n),
            ];
            if nb
                .iter()
                .any(|&(a, b)| core_tags[b * n + a] == NodeTag::Hole)
            {
                fringe_core[jj * n + ii] = NodeTag::Overlap;
            }
        }
    }
    charts.push(ChartGrid {
        kind: ChartKind::CartesianTorusCore,
        resolution: [n, n],
        spacing: [h, h],
        origin: [0.0, 0.0],
        offset: 0,
        boundary_tags: fringe_core,
    });
    let mut offset = n * n;
    let h_theta = TAU / n_theta as f64;
    for (j, e) in ends.iter().enumerate() {
        let n_rho = ((e.rho_max - rho_min) / h_theta).round() as usize + 1;
        let n_rho = n_rho.max(MIN_RESOLUTION);
        let h_rho = (e.rho_max - rho_min) / (n_rho - 1) as f64;
        let mut tags = vec![NodeTag::Interior; n_theta * n_rho];
        for i in 0..n_theta {
            tags[i] = NodeTag::Overlap;
            tags[(n_rho - 1) * n_theta + i] = NodeTag::Truncation;
        }
        charts.push(ChartGrid {
            kind: ChartKind::CylinderEnd { end: j },
            resolution: [n_theta, n_rho],
            spacing: [h_theta, h_rho],
            origin: [0.0, rho_min],
            offset,
            boundary_tags: tags,
        });
        offset += n_theta * n_rho;
    }

    // Partition-of-unity transition inside the overlap annulus, clear of the
    // overlap rows of both charts.
    let blend = [1.3 * spec.r_cut, 0.9 * spec.r_out];
    let mut model = SurfaceModel::assemble(
        Some(spec.clone()),
        -(k as i64),
        ends,
        charts,
        background,
        blend,
    )?;
    let target = 4.0 * PI * (model.euler_char as f64 - model.ends.iter().map(|e| e.angle_alpha).sum::<f64>());
    model.gauss_bonnet_target = Some(target);
    model.gauss_bonnet_defect = model.weighted_sum(&model.background_curvature) - target;
    Ok(model)
}

impl SurfaceModel {
    /// Single cylinder chart over `[rho_min, rho_max]` carrying the exact cone
    /// `e^{2αρ}(dρ²+dθ²)`, both boundary rows tagged as truncation. It has zero
    /// curvature and zero Euler characteristic, and exists only to smoke-test
    /// the solvers.
    pub fn exact_cone_fixture(
        alpha: f64,
        n_theta: usize,
        rho_min: f64,
        rho_max: f64,
    ) -> Result<Self> {
        if !(alpha > 0.0) || n_theta < MIN_RESOLUTION || !(rho_max > rho_min) {
            return Err(Error::InvalidModel("bad exact-cone fixture parameters".into()));
        }
        let h_theta = TAU / n_theta as f64;
        let n_rho = (((rho_max - rho_min) / h_theta).round() as usize + 1).max(MIN_RESOLUTION);
        let h_rho = (rho_max - rho_min) / (n_rho - 1) as f64;
        let mut tags = vec![NodeTag::Interior; n_theta * n_rho];
        for i in 0..n_theta {
            tags[i] = NodeTag::Truncation;
            tags[(n_rho - 1) * n_theta + i] = NodeTag::Truncation;
        }
        let chart = ChartGrid {
            kind: ChartKind::CylinderEnd { end: 0 },
            resolution: [n_theta, n_rho],
            spacing: [h_theta, h_rho],
            origin: [0.0, rho_min],
            offset: 0,
            boundary_tags: tags,
        };
        let mut bg = Background::single_cone(alpha);
        bg.ends[0].rho_min = rho_min;
        bg.ends[0].rho_max = rho_max;
        let ends = bg.ends.clone();
        let mut model = Self::assemble(None, 0, ends, vec![chart], bg, [0.0, 0.0])?;
        model.background_curvature.iter_mut().for_each(|r| *r = 0.0);
        Ok(model)
    }

    /// Copy of the model with the background curvature replaced, for
    /// manufactured-solution tests that ignore the geometry.
    pub fn with_background_curvature(&self, r0: Vec<f64>) -> Result<Self> {
        self.check_len(&r0)?;
        let mut m = self.clone();
        m.background_curvature = r0;
        Ok(m)
    }

    fn assemble(
        spec: Option<ModelSpec>,
        euler_char: i64,
        ends: Vec<ConeEnd>,
        charts: Vec<ChartGrid>,
        background: Background,
        blend: [f64; 2],
    ) -> Result<Self> {
        let total: usize = charts.iter().map(|c| c.len()).sum();
        let mut tags = Vec::with_capacity(total);
        let mut chart_of = Vec::with_capacity(total);
        for (ci, c) in charts.iter().enumerate() {
            tags.extend_from_slice(&c.boundary_tags);
            chart_of.extend(std::iter::repeat(ci as u32).take(c.len()));
        }

        let mut stencil = vec![[NO_NEIGHBOR; 4]; total];
        for c in &charts {
            for l in 0..c.len() {
                let (i, j) = c.ij(l);
                let (i, j) = (i as isize, j as isize);
                stencil[c.offset + l] = [
                    c.global_wrapped(i - 1, j).unwrap_or(NO_NEIGHBOR),
                    c.global_wrapped(i + 1, j).unwrap_or(NO_NEIGHBOR),
                    c.global_wrapped(i, j - 1).unwrap_or(NO_NEIGHBOR),
                    c.global_wrapped(i, j + 1).unwrap_or(NO_NEIGHBOR),
                ];
            }
        }

        let mut model = Self {
            spec,
            euler_char,
            ends,
            charts,
            background,
            background_log_factor: vec![0.0; total],
            background_curvature: vec![0.0; total],
            area_weights: vec![0.0; total],
            cell_weights: vec![0.0; total],
            partition: vec![0.0; total],
            tags,
            chart_of,
            stencil,
            fringe: Vec::new(),
            fringe_of: vec![u32::MAX; total],
            blend,
            gauss_bonnet_target: None,
            gauss_bonnet_defect: 0.0,
        };

        // background log factor
        for ci in 0..model.charts.len() {
            let c = &model.charts[ci];
            for l in 0..c.len() {
                let g = c.offset + l;
                if model.tags[g] == NodeTag::Hole {
                    continue;
                }
                let x = c.coord(l);
                model.background_log_factor[g] = model.log_factor_at(ci, x);
            }
        }

        model.build_fringe()?;

        // partition of unity, area weights, curvature
        for ci in 0..model.charts.len() {
            let c = model.charts[ci].clone();
            let cell = c.cell_area();
            for l in 0..c.len() {
                let g = c.offset + l;
                let tag = model.tags[g];
                if matches!(tag, NodeTag::Hole | NodeTag::Overlap) {
                    continue;
                }
                let x = c.coord(l);
                let part = model.partition_at(ci, x);
                let half = if tag == NodeTag::Truncation { 0.5 } else { 1.0 };
                let e2v = (2.0 * model.background_log_factor[g]).exp();
                model.partition[g] = part;
                model.cell_weights[g] = e2v * cell * half;
                model.area_weights[g] = e2v * cell * half * part;
            }
        }
        let mut r0 = vec![0.0; total];
        for ci in 0..model.charts.len() {
            let c = model.charts[ci].clone();
            let kap = c.kappa();
            let cell = c.cell_area();
            for l in 0..c.len() {
                let g = c.offset + l;
                if matches!(model.tags[g], NodeTag::Hole | NodeTag::Overlap) {
                    continue;
                }
                let x = c.coord(l);
                if let ChartKind::CylinderEnd { end } = c.kind {
                    if model.spec.is_some()
                        && model.background.exactly_conic(end, x[1] - c.spacing[1])
                    {
                        continue;
                    }
                }
                let v = model.background_log_factor[g];
                let nb = |k: usize, dx: [f64; 2]| -> f64 {
                    let s = model.stencil[g][k];
                    if s != NO_NEIGHBOR {
                        model.background_log_factor[s]
                    } else {
                        model.log_factor_at(ci, [x[0] + dx[0], x[1] + dx[1]])
                    }
                };
                let hx = c.spacing[0];
                let hy = c.spacing[1];
                let flat = kap[0] * (nb(0, [-hx, 0.0]) + nb(1, [hx, 0.0]) - 2.0 * v)
                    + kap[1] * (nb(2, [0.0, -hy]) + nb(3, [0.0, hy]) - 2.0 * v);
                r0[g] = -2.0 * (-2.0 * v).exp() * flat / cell;
            }
        }
        model.background_curvature = r0;
        let mut r0 = std::mem::take(&mut model.background_curvature);
        ops::sync_in_place(&model, &mut r0);
        model.background_curvature = r0;
        Ok(model)
    }

    fn build_fringe(&mut self) -> Result<()> {
        let mut links = Vec::new();
        for ci in 0..self.charts.len() {
            let c = &self.charts[ci];
            for l in 0..c.len() {
                let g = c.offset + l;
                if self.tags[g] != NodeTag::Overlap {
                    continue;
                }
                let x = c.coord(l);
                let (partner, px) = match c.kind {
                    ChartKind::CartesianTorusCore => {
                        let (end, d) = self
                            .ends
                            .iter()
                            .enumerate()
                            .map(|(j, e)| (j, torus_delta(x, e.puncture)))
                            .min_by(|a, b| {
                                a.1[0].hypot(a.1[1]).total_cmp(&b.1[0].hypot(b.1[1]))
                            })
                            .expect("at least one end");
                        let r = d[0].hypot(d[1]);
                        let theta = d[1].atan2(d[0]).rem_euclid(TAU);
                        (end + 1, [theta, -r.ln()])
                    }
                    ChartKind::CylinderEnd { end } => {
                        let e = &self.ends[end];
                        let r = (-x[1]).exp();
                        let z = [
                            (e.puncture[0] + r * x[0].cos()).rem_euclid(1.0),
                            (e.puncture[1] + r * x[0].sin()).rem_euclid(1.0),
                        ];
                        (0, z)
                    }
                };
                let donors = self.bilinear_donors(partner, px).ok_or_else(|| {
                    Error::InvalidModel(format!(
                        "overlap node {g} falls outside the interior of chart {partner}; resolution too coarse"
                    ))
                })?;
                links.push(FringeLink {
                    node: g,
                    donors,
                    partner,
                    at: px,
                });
            }
        }
        for (idx, link) in links.iter().enumerate() {
            self.fringe_of[link.node] = idx as u32;
        }
        self.fringe = links;
        Ok(())
    }

    /// Bilinear donors of a point given in chart `ci` coordinates; `None` if
    /// any donor is not an interior node.
    pub(crate) fn bilinear_donors(&self, ci: usize, x: [f64; 2]) -> Option<[(usize, f64); 4]> {
        let c = &self.charts[ci];
        let fi = (x[0] - c.origin[0]) / c.spacing[0];
        let fj = (x[1] - c.origin[1]) / c.spacing[1];
        let i0 = fi.floor();
        let j0 = fj.floor();
        let (a, b) = (fi - i0, fj - j0);
        let (i0, j0) = (i0 as isize, j0 as isize);
        let corners = [
            (i0, j0, (1.0 - a) * (1.0 - b)),
            (i0 + 1, j0, a * (1.0 - b)),
            (i0, j0 + 1, (1.0 - a) * b),
            (i0 + 1, j0 + 1, a * b),
        ];
        let mut out = [(0usize, 0.0); 4];
        for (k, &(i, j, w)) in corners.iter().enumerate() {
            let g = c.global_wrapped(i, j)?;
            if self.tags[g] != NodeTag::Interior {
                return None;
            }
            out[k] = (g, w);
        }
        Some(out)
    }

    fn partition_at(&self, ci: usize, x: [f64; 2]) -> f64 {
        let [ra, rb] = self.blend;
        if self.spec.is_none() {
            return 1.0;
        }
        let w = |r: f64| smooth_transition((r.ln() - ra.ln()) / (rb.ln() - ra.ln()));
        match self.charts[ci].kind {
            ChartKind::CartesianTorusCore => self
                .ends
                .iter()
                .map(|e| {
                    let d = torus_delta(x, e.puncture);
                    w(d[0].hypot(d[1]))
                })
                .product(),
            ChartKind::CylinderEnd { .. } => 1.0 - w((-x[1]).exp()),
        }
    }

    /// Analytic background log factor at chart coordinates `x` of chart `ci`.
    pub fn log_factor_at(&self, ci: usize, x: [f64; 2]) -> f64 {
        match self.charts[ci].kind {
            ChartKind::CartesianTorusCore => self.background.core(x),
            ChartKind::CylinderEnd { end } => self.background.end(end, x[1], x[0]),
        }
    }

    pub fn background(&self) -> &Background {
        &self.background
    }

    pub fn spec(&self) -> Option<&ModelSpec> {
        self.spec.as_ref()
    }

    pub fn euler_char(&self) -> i64 {
        self.euler_char
    }

    pub fn ends(&self) -> &[ConeEnd] {
        &self.ends
    }

    pub fn charts(&self) -> &[ChartGrid] {
        &self.charts
    }

    pub fn num_nodes(&self) -> usize {
        self.tags.len()
    }

    pub fn tags(&self) -> &[NodeTag] {
        &self.tags
    }

    pub fn tag(&self, node: usize) -> NodeTag {
        self.tags[node]
    }

    pub fn chart_of(&self, node: usize) -> usize {
        self.chart_of[node] as usize
    }

    /// Chart coordinates of a node.
    pub fn coord(&self, node: usize) -> [f64; 2] {
        let c = &self.charts[self.chart_of(node)];
        c.coord(node - c.offset)
    }

    pub fn background_log_factor(&self) -> &[f64] {
        &self.background_log_factor
    }

    pub fn background_curvature(&self) -> &[f64] {
        &self.background_curvature
    }

    /// Quadrature weights for `dA₀`: zero on overlap and hole nodes, blended by
    /// a smooth partition of unity where the charts overlap.
    pub fn area_weights(&self) -> &[f64] {
        &self.area_weights
    }

    /// Full (unblended) `dA₀` of each solved node; used to scale equations.
    pub fn cell_weights(&self) -> &[f64] {
        &self.cell_weights
    }

    pub fn partition(&self) -> &[f64] {
        &self.partition
    }

    pub fn stencil(&self) -> &[[usize; 4]] {
        &self.stencil
    }

    pub fn fringe(&self) -> &[FringeLink] {
        &self.fringe
    }

    pub fn fringe_link(&self, node: usize) -> Option<&FringeLink> {
        let i = self.fringe_of[node];
        (i != u32::MAX).then(|| &self.fringe[i as usize])
    }

    pub fn gauss_bonnet_target(&self) -> Option<f64> {
        self.gauss_bonnet_target
    }

    /// `Σ R₀ dA₀ − 4π(χ − Σα)` recorded at construction.
    pub fn gauss_bonnet_defect(&self) -> f64 {
        self.gauss_bonnet_defect
    }

    pub fn blend_radii(&self) -> [f64; 2] {
        self.blend
    }

    /// Nodes that carry an equation of their own (interior or truncation).
    pub fn is_solved(&self, node: usize) -> bool {
        matches!(self.tags[node], NodeTag::Interior | NodeTag::Truncation)
    }

    pub fn is_active(&self, node: usize) -> bool {
        self.tags[node] != NodeTag::Hole
    }

    /// `Σ f dA₀` with the model's quadrature weights.
    pub fn weighted_sum(&self, f: &[f64]) -> f64 {
        f.iter()
            .zip(&self.area_weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|(a, w)| a * w)
            .sum()
    }

    /// Cylinder coordinate `ρ` of a node relative to its nearest end, and that
    /// end. Core nodes use `-log` of the distance to the closest puncture.
    pub fn end_coordinate(&self, node: usize) -> (usize, f64) {
        let x = self.coord(node);
        match self.charts[self.chart_of(node)].kind {
            ChartKind::CylinderEnd { end } => (end, x[1]),
            ChartKind::CartesianTorusCore => self
                .ends
                .iter()
                .enumerate()
                .map(|(j, e)| {
                    let d = torus_delta(x, e.puncture);
                    (j, -(d[0].hypot(d[1])).ln())
                })
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap_or((0, f64::NEG_INFINITY)),
        }
    }

    /// Mask of the region used for the pointwise checks: the core chart plus every
    /// end chart up to `rho_core` (solved nodes only).
    pub fn core_mask(&self, rho_core: Option<f64>) -> Vec<bool> {
        (0..self.num_nodes())
            .map(|g| {
                if self.tags[g] != NodeTag::Interior {
                    return false;
                }
                match self.charts[self.chart_of(g)].kind {
                    ChartKind::CartesianTorusCore => true,
                    ChartKind::CylinderEnd { end } => {
                        let lim = rho_core.unwrap_or(0.5 * self.ends[end].rho_max);
                        self.coord(g)[1] <= lim
                    }
                }
            })
            .collect()
    }

    /// Interior nodes of the flat core chart whose blend weight is one, i.e.
    /// outside every overlap annulus. Used as the fixed compact set `K`.
    pub fn flat_core_mask(&self) -> Vec<bool> {
        (0..self.num_nodes())
            .map(|g| {
                self.tags[g] == NodeTag::Interior
                    && self.chart_of(g) == 0
                    && matches!(self.charts[0].kind, ChartKind::CartesianTorusCore)
                    && self.partition[g] >= 1.0
            })
            .collect()
    }

    pub(crate) fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.num_nodes() {
            return Err(Error::FieldLength {
                expected: self.num_nodes(),
                got: f.len(),
            });
        }
        Ok(())
    }

    /// Truncation ρ of an end chart, if the chart is an end.
    pub fn chart_end(&self, ci: usize) -> Option<usize> {
        match self.charts[ci].kind {
            ChartKind::CylinderEnd { end } => Some(end),
            ChartKind::CartesianTorusCore => None,
        }
    }

    /// Global indices of the truncation row of end chart `ci` (outer row).
    pub fn truncation_row(&self, ci: usize) -> std::ops::Range<usize> {
        let c = &self.charts[ci];
        let n0 = c.resolution[0];
        let start = c.offset + (c.resolution[1] - 1) * n0;
        start..start + n0
    }

    /// Which end chart index belongs to end `j`.
    pub fn end_chart(&self, j: usize) -> usize {
        self.charts
            .iter()
            .position(|c| c.kind == ChartKind::CylinderEnd { end: j })
            .expect("every end has a chart")
    }
}

#[cfg(test)]
mod tests;
