//! Geodesic distances in an evolving metric and the empirical Harnack
//! constant along a short normalized run.

use conic_ricci::diagnostics::{check_harnack, sample_harnack_pairs};
use conic_ricci::flow::{rescaled_start, run, FlowConfig, FlowMode};
use conic_ricci::surface::{build_model, DistanceGraph, ModelSpec};

fn main() -> conic_ricci::Result<()> {
    let model = build_model(&ModelSpec::punctured_torus(1, 0.5, 48))?;
    let config = FlowConfig {
        mode: FlowMode::Rescaled,
        t_end: 3.0,
        dt_max: 0.25,
        snapshot_schedule: vec![1.0, 2.0],
        ..FlowConfig::default()
    };
    let start = rescaled_start(&model, &config)?;
    let traj = run(&model, &config, &start).map_err(|f| f.source)?;

    let flat: Vec<usize> = (0..model.num_nodes()).filter(|&g| model.flat_core_mask()[g]).collect();
    let (a, b) = (flat[0], flat[flat.len() / 2]);
    for snap in &traj.snapshots {
        let graph = DistanceGraph::new(&model, &snap.state.u)?;
        println!("tau = {:.0}: d(a, b) = {:.4}", snap.state.time, graph.distance(a, b)?);
    }

    let pairs = sample_harnack_pairs(&model, &traj, 16, 11);
    let report = check_harnack(&model, &traj, &pairs)?;
    print!("{}", report.to_text());
    Ok(())
}
