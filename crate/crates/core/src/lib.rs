//! Conformal Ricci flow on complete surfaces with asymptotically conical ends
//! and negative Euler characteristic.

pub(crate) mod discrete;
pub mod cli;
pub mod diagnostics;
pub mod elliptic;
pub mod error;
pub mod flow;
pub mod linalg;
pub mod surface;

pub use error::{Error, Result};
