//! Quantified checks of the flow's a-priori estimates and limits.
//!
//! Every check is a pure function of stored snapshots. Sup/inf checks run on
//! the core region (flat chart plus ends up to half the truncation radius)
//! unless noted; the slack for pointwise inequalities is ten Newton
//! tolerances plus a step-size term recorded with each check.

mod checks;
mod report;
mod rescaled;

pub use checks::{
    check_aronson_benilan, check_bounds, check_curvature_decay, check_sign_and_conservation, lower_bound_slope,
    CurvatureDecayOptions,
};
pub use report::{CheckEntry, DiagnosticsReport, Series, Status};
pub use rescaled::{
    check_convergence, check_harnack, check_rescaled, harnack_constant, sample_harnack_pairs, ConvergenceOptions,
    HarnackPair,
};

use crate::flow::Trajectory;

/// `10·newton_tol`, the solver part of every pointwise slack.
pub fn solver_slack(traj: &Trajectory) -> f64 {
    10.0 * traj.newton_tol
}
