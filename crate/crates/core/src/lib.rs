//! PMU-driven state-matrix estimation and wide-area damping control for
//! classical multi-machine swing models.
//!
//! The crate follows the measurement-to-control chain: [`case`] loads a
//! network and its operating point, [`sim`] and [`pmu`] produce ambient
//! measurements, [`estimator`] recovers the state matrix from their
//! covariance, [`modal`] analyses it, [`control`] designs rank-2 damping
//! feedback, and [`pipeline`] wires the steps into seeded experiments.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod case;
pub mod control;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod linalg;
pub mod modal;
pub mod pipeline;
pub mod pmu;
pub mod ringdown;
pub mod sim;

pub use error::{Error, Result};
pub use nalgebra;
