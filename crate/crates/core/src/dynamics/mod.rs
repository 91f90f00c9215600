//! Trajectory generators for the benchmark systems.

mod fhn;
mod lhs;
mod lorenz;

use thiserror::Error;

pub use fhn::{fhn_generate, fhn_reaction, input_current, FhnConfig, FhnSolver};
pub use lhs::lhs_sample;
pub use lorenz::{lorenz_generate, lorenz_rhs, lorenz_trajectory, rk4_step, Lorenz63Config};

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("{0}")]
    Config(String),
    #[error("solution diverged at t={time} for parameters (eps={eps}, c={c})")]
    Diverged { eps: f64, c: f64, time: f64 },
}
