//! Graph distances in the metric `u·g₀`.
//!
//! Each chart contributes a 16-neighbour graph (axis, diagonal and knight
//! moves); overlap nodes are joined to their interpolation donors. Edge
//! lengths are chart-coordinate lengths scaled by the metric factor at the
//! edge midpoint, with the background factor evaluated analytically there.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::{PI, TAU};

use super::{torus_delta, ChartKind, SurfaceModel};
use crate::error::{Error, Result};

const OFFSETS: [(isize, isize); 16] = [
    (1, 0),
    (-1, 0),
    (0, 1),
    (0, -1),
    (1, 1),
    (1, -1),
    (-1, 1),
    (-1, -1),
    (1, 2),
    (2, 1),
    (-1, 2),
    (-2, 1),
    (1, -2),
    (2, -1),
    (-1, -2),
    (-2, -1),
];

/// Weighted adjacency built once for a given conformal factor.
pub struct DistanceGraph {
    adj_ptr: Vec<usize>,
    adj: Vec<(u32, f64)>,
    active: Vec<bool>,
}

#[derive(Clone, Copy, PartialEq)]
struct Item(f64, u32);

impl Eq for Item {}
impl Ord for Item {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then(other.1.cmp(&self.1))
    }
}
impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Displacement between two points of chart `ci`, unwrapped across periodic
/// directions.
fn chart_delta(model: &SurfaceModel, ci: usize, a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    match model.charts()[ci].kind {
        ChartKind::CartesianTorusCore => torus_delta(b, a),
        ChartKind::CylinderEnd { .. } => {
            let mut dt = b[0] - a[0];
            if dt > PI {
                dt -= TAU;
            } else if dt < -PI {
                dt += TAU;
            }
            [dt, b[1] - a[1]]
        }
    }
}

impl DistanceGraph {
    pub fn new(model: &SurfaceModel, u: &[f64]) -> Result<Self> {
        model.check_len(u)?;
        let n = model.num_nodes();
        let active: Vec<bool> = (0..n).map(|g| model.is_active(g)).collect();
        for g in 0..n {
            if active[g] && !(u[g] > 0.0) {
                return Err(Error::NonPositive {
                    node: g,
                    value: u[g],
                });
            }
        }
        let mut lists: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let edge_len = |ci: usize, a: [f64; 2], d: [f64; 2], ua: f64, ub: f64| -> f64 {
            let mid = [a[0] + 0.5 * d[0], a[1] + 0.5 * d[1]];
            let v = model.log_factor_at(ci, mid);
            let um = 0.5 * (ua + ub);
            d[0].hypot(d[1]) * v.exp() * um.sqrt()
        };
        for (ci, c) in model.charts().iter().enumerate() {
            for l in 0..c.len() {
                let g = c.offset + l;
                if !active[g] {
                    continue;
                }
                let (i, j) = c.ij(l);
                let (i, j) = (i as isize, j as isize);
                let a = c.coord(l);
                for &(di, dj) in &OFFSETS {
                    let Some(h) = c.global_wrapped(i + di, j + dj) else {
                        continue;
                    };
                    if !active[h] {
                        continue;
                    }
                    // the straight segment must not cross a removed disk
                    let corridor_ok = match (di.abs(), dj.abs()) {
                        (1, 1) => [(di, 0), (0, dj)].iter().all(|&(x, y)| {
                            c.global_wrapped(i + x, j + y).is_some_and(|k| active[k])
                        }),
                        (1, 2) => [(0, dj / 2), (di, dj / 2)].iter().all(|&(x, y)| {
                            c.global_wrapped(i + x, j + y).is_some_and(|k| active[k])
                        }),
                        (2, 1) => [(di / 2, 0), (di / 2, dj)].iter().all(|&(x, y)| {
                            c.global_wrapped(i + x, j + y).is_some_and(|k| active[k])
                        }),
                        _ => true,
                    };
                    if !corridor_ok {
                        continue;
                    }
                    let d = [di as f64 * c.spacing[0], dj as f64 * c.spacing[1]];
                    let w = edge_len(ci, a, d, u[g], u[h]);
                    lists[g].push((h as u32, w));
                }
            }
        }
        for link in model.fringe() {
            let g = link.node;
            for &(donor, _) in &link.donors {
                let b = model.coord(donor);
                let d = chart_delta(model, link.partner, link.at, b);
                let w = edge_len(link.partner, link.at, d, u[g], u[donor]);
                lists[g].push((donor as u32, w));
                lists[donor].push((g as u32, w));
            }
        }
        let mut adj_ptr = Vec::with_capacity(n + 1);
        adj_ptr.push(0);
        let mut adj = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for l in lists {
            adj.extend(l);
            adj_ptr.push(adj.len());
        }
        Ok(Self {
            adj_ptr,
            adj,
            active,
        })
    }

    fn check_node(&self, x: usize) -> Result<()> {
        if x >= self.active.len() || !self.active[x] {
            return Err(Error::InvalidArgument(format!(
                "node {x} is not an active node of the model"
            )));
        }
        Ok(())
    }

    fn dijkstra(&self, source: usize, target: Option<usize>) -> Vec<f64> {
        let n = self.active.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut heap = BinaryHeap::new();
        dist[source] = 0.0;
        heap.push(Item(0.0, source as u32));
        while let Some(Item(d, v)) = heap.pop() {
            let v = v as usize;
            if d > dist[v] {
                continue;
            }
            if Some(v) == target {
                break;
            }
            for &(w, len) in &self.adj[self.adj_ptr[v]..self.adj_ptr[v + 1]] {
                let nd = d + len;
                if nd < dist[w as usize] {
                    dist[w as usize] = nd;
                    heap.push(Item(nd, w));
                }
            }
        }
        dist
    }

    pub fn distance(&self, x1: usize, x2: usize) -> Result<f64> {
        self.check_node(x1)?;
        self.check_node(x2)?;
        let d = self.dijkstra(x1, Some(x2))[x2];
        if !d.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "nodes {x1} and {x2} are disconnected in the distance graph"
            )));
        }
        Ok(d)
    }

    /// Single-source distances to every node (infinite for holes).
    pub fn distances_from(&self, x1: usize) -> Result<Vec<f64>> {
        self.check_node(x1)?;
        Ok(self.dijkstra(x1, None))
    }
}

/// Shortest-path distance between two nodes in the metric `u·g₀`.
pub fn geodesic_distance(model: &SurfaceModel, u: &[f64], x1: usize, x2: usize) -> Result<f64> {
    DistanceGraph::new(model, u)?.distance(x1, x2)
}
