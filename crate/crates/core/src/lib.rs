//! Dual ASR/TTS learning for streaming transducer recognisers.
//!
//! The numeric core ([`tensor`], [`frontend`], the transducer lattice) is
//! generic over [`tensor::Scalar`]; the networks and training loop run in
//! [`Real`] (`f64`).

pub mod corpus;
pub mod decode;
pub mod duallearn;
pub mod error;
pub mod evalkit;
pub mod frontend;
pub mod hat;
pub mod models;
pub mod tensor;

pub use error::{Error, Result};

/// Scalar type of the networks, training and decoding.
pub type Real = f64;

pub type Array64 = tensor::Array<f64>;
pub type Array32 = tensor::Array<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Params = tensor::ParamStore<Real>;
pub type Features = frontend::FeatureSequence<Real>;
