//! Long-term action anticipation: a selective state-space (Mamba) encoder
//! over observed clip features, a query-based transformer decoder producing
//! one embedding per future slot, verb/noun classifiers, and an inference
//! step that reweights joint verb-noun probabilities by dataset
//! co-occurrence statistics.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod action;
pub mod dataio;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod interaction;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod ssm;

pub use action::{Action, ActionSequence};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Tape64 = numerics::Tape<f64>;
pub type Tape32 = numerics::Tape<f32>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type ParamStore32 = nn::ParamStore<f32>;
pub type QueryMamba64 = pipeline::QueryMamba<f64>;
pub type QueryMamba32 = pipeline::QueryMamba<f32>;
pub type Checkpoint64 = pipeline::Checkpoint<f64>;
pub type Checkpoint32 = pipeline::Checkpoint<f32>;
