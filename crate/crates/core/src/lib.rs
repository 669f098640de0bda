//! Fused extended two-way fixed effects estimation for staggered adoption panels.

pub mod design;
pub mod effects;
pub mod estimator;
pub mod fusion;
pub mod gls;
pub mod inference;
pub mod panel;
pub mod simulate;
pub mod solver;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
