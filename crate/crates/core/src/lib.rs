//! N:M structured sparsity learned under Adam with a two-phase schedule:
//! dense preconditioning, then mask learning against a frozen variance.

// `!(x > 0.0)` is used on purpose so NaN is rejected along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoswitch;
pub mod error;
pub mod exec;
pub mod harness;
pub mod masks;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod theory;
pub mod trajectory;

pub use error::{Error, Result};
pub use exec::Exec;
