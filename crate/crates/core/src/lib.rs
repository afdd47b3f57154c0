//! Chance-constrained trajectory optimization under Gaussian obstacle uncertainty
//! and Gaussian tracking error.
//!
//! The crate is layered bottom-up:
//!
//! * [`geometry`]: support-mapped convex shapes, GJK/EPA signed distance.
//! * [`shadow`]: χ² quantiles, ε-shadows, and the per-obstacle risk bound with its gradient.
//! * [`kinematics`] and [`dynamics`]: robot models and discrete-time transition models.
//! * [`risk`]: trajectory-level aggregation of risk bounds and the linearized chance constraint.
//! * [`qp`] and [`scp`]: the convex subproblem solver and the trust-region SCP driver.
//! * [`monte_carlo`]: sampling-based ground truth.
//! * [`scenario`] and [`pipeline`]: scenario files and the solve/validate/report pipeline.

pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod monte_carlo;
pub mod pipeline;
pub mod qp;
pub mod risk;
pub mod scenario;
pub mod scp;
pub mod shadow;
pub mod stats;

pub use error::{Error, Result};
