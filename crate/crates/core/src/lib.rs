//! Robust nonlinear MPC with logarithmic-depth solves.
//!
//! The stack, bottom-up:
//!
//! * [`scan`]: associative scans over a fixed binary tree, sequential or on a
//!   thread pool.
//! * [`lqr`]: equality-constrained LQR by a reverse value-function scan and a
//!   forward trajectory scan, with a cached linear-only replay.
//! * [`admm`]: inequality-constrained LTV-QPs by operator splitting around
//!   [`lqr`].
//! * [`sqp`]: Gauss-Newton SQP and real-time iteration for nonlinear models.
//! * [`sls`]: disturbance-feedback synthesis and constraint tightening for
//!   robust NMPC.
//! * [`models`], [`rollout`], [`reference`], [`cli`]: dynamics, closed-loop
//!   simulation, sequential oracles and the command-line driver.

// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod cli;
pub mod error;
pub mod fixtures;
pub(crate) mod linalg;
pub mod lqr;
pub mod models;
pub mod reference;
pub mod rollout;
pub mod scan;
pub mod sls;
pub mod sqp;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use scan::{Direction, Executor};
