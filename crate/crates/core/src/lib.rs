//! Multi-output temporal fusion transformer for parametric dynamical systems.
//!
//! The network reshapes `n_o` outputs into a single spatial-temporal
//! sequence and attends over it with a block-wise causal mask, so one
//! forward pass predicts every output over the forecast horizon and the
//! averaged attention matrix exposes cross-output correlations.

pub mod autodiff;
pub mod layers;
pub mod attention;
pub mod data;
pub mod dynamics;
pub mod model;
pub mod training;
pub mod evaluation;
pub mod cli;
