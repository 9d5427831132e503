//! Unnormalized flow from the background metric: the conformal factor grows
//! roughly linearly while the total curvature stays put.

use conic_ricci::flow::{run, ConformalState, FlowConfig, FlowMode};
use conic_ricci::surface::{build_model, total_curvature, ModelSpec};

fn main() -> conic_ricci::Result<()> {
    let model = build_model(&ModelSpec::punctured_torus(1, 0.5, 48))?;
    let config = FlowConfig {
        t_end: 10.0,
        snapshot_schedule: vec![1.0, 2.0, 5.0],
        ..FlowConfig::default()
    };
    let start = ConformalState::initial(&model, FlowMode::Raw);
    let traj = run(&model, &config, &start).map_err(|f| f.source)?;
    println!("{} steps, largest dt {:.3}", traj.series.len() - 1, traj.max_dt);
    println!("{:>6} {:>10} {:>10} {:>14}", "t", "min u", "max u", "sum R dA");
    for snap in &traj.snapshots {
        let u = &snap.state.u;
        let core = model.core_mask(None);
        let (lo, hi) = (0..u.len())
            .filter(|&g| core[g])
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), g| (lo.min(u[g]), hi.max(u[g])));
        let total = total_curvature(&model, u)?;
        println!("{:>6.2} {lo:>10.4} {hi:>10.4} {total:>14.6}", snap.state.time);
    }
    Ok(())
}
