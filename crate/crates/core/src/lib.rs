//! Density steering for single-input feedback linearizable systems.
//!
//! A nonlinear system is mapped to a Brunovsky chain of integrators by
//! `z = τ(x)`, `u = α(x) + β(x)v`. Steering between two densities then reduces
//! to a problem with a linear prior, solved either deterministically by
//! optimal transport or with ε-regularization as a Schrödinger bridge.

// `!(x > 0.0)` guards reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops that address several parallel arrays at once.
#![allow(clippy::needless_range_loop)]

pub mod bridge;
pub mod brunovsky;
pub mod density;
pub mod error;
pub mod hjb;
pub mod lie;
pub mod par;
pub mod scenario;
pub mod steering;
pub mod systems;
pub mod transport;

pub use error::{Result, SteerError};
