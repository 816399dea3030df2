//! Lifted particle simulation of controlled mean-field stochastic delay
//! equations, with first- and second-order adjoints, variational processes
//! and numerical checks of the stochastic maximum principle.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod control;
pub mod error;
pub mod forward;
pub mod harness;
pub mod model;
pub mod noise;
pub mod par;
pub mod regression;
pub mod segment;
pub mod smp;
pub mod stats;
pub mod tensor;
pub mod variation;

pub use error::{Error, Result};
