//! Builds the punctured-torus background and compares its total curvature
//! with the Gauss-Bonnet value for the cone angles.

use conic_ricci::surface::{build_model, ModelSpec};

fn main() -> conic_ricci::Result<()> {
    for n in [48, 96] {
        let model = build_model(&ModelSpec::punctured_torus(1, 0.5, n))?;
        let target = model.gauss_bonnet_target().expect("torus models carry a target");
        let total = model.weighted_sum(model.background_curvature());
        println!(
            "N = {n:>3}: {} nodes, sum R0 dA0 = {total:.6}, target = {target:.6}, relative defect = {:.2e}",
            model.num_nodes(),
            (model.gauss_bonnet_defect() / target).abs()
        );
    }
    let two = build_model(&ModelSpec::with_angles(&[0.25, 0.75], 64))?;
    println!(
        "two ends (alpha 0.25, 0.75): euler characteristic {}, target {:.6}",
        two.euler_char(),
        two.gauss_bonnet_target().unwrap_or(f64::NAN)
    );
    Ok(())
}
