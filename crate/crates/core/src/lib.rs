//! Knowledge tracing for right/wrong and multi-level scored answers.
//!
//! The numeric core is generic over [`numerics::Scalar`]; the aliases below
//! fix it to `f64` or `f32`.

pub mod checkpoint;
pub mod data;
pub mod encoding;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use error::{KtError, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type ParamSet64 = numerics::ParamSet<f64>;
pub type Tape64 = numerics::Tape<f64>;
pub type Dkt64 = models::Dkt<f64>;
pub type Dkt32 = models::Dkt<f32>;
pub type Dkvmn64 = models::Dkvmn<f64>;
pub type Dkvmn32 = models::Dkvmn<f32>;
pub type Gkt64 = models::Gkt<f64>;
pub type Gkt32 = models::Gkt<f32>;
pub type Model64 = models::AnyModel<f64>;
pub type Model32 = models::AnyModel<f32>;
