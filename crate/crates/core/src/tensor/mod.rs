//! Minimal differentiable array engine: a recording tape, the handful of
//! primitives the networks need, parameter storage and Adam.

mod adam;
mod array;
pub mod checkpoint;
mod params;
mod scalar;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::Array;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use scalar::{log_add_exp, log_sigmoid, log_sum_exp, sigmoid, Scalar};
pub use tape::{Gradients, Tape, UnaryOp, Var};
