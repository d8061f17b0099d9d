//! Gaussian process hyperparameter learning with iterative solvers.
//!
//! Training maximises the log marginal likelihood of a Matérn-3/2 ARD model
//! with Adam. Each gradient is a stochastic estimate built from one batched
//! solve `H [v_y, v_1..v_s] = [y, z_1..z_s]` with CG, alternating projections
//! or SGD. With fixed probes the solver can warm start from the previous
//! step's solutions. The [`exact`] module is the dense Cholesky reference.
//!
//! The guide in `book/` walks through every module with runnable examples.

pub mod bounds;
pub mod error;
pub mod estimator;
pub mod exact;
pub mod harness;
pub mod kernel;
pub mod optimizer;
pub mod rng;
pub mod solvers;

pub use error::{GpError, Result};
