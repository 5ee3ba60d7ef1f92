//! Ultra-low-bit weight quantization of small decoder transformers, improved
//! by a discrete hill-climbing search over function-preserving transforms
//! (permutation, scaling, pairwise rotation) of the feed-forward blocks.
//!
//! The pipeline: load a checkpoint ([`checkpoint`]), fake-quantize it with
//! asymmetric group quantization ([`quant`]), then let [`search`] explore
//! [`invariance`] transforms that lower the calibration objective of the
//! quantized model while leaving the full-precision model unchanged.

pub mod calib;
pub mod checkpoint;
pub mod cli;
pub mod curves;
pub mod error;
pub mod invariance;
pub mod model;
pub mod numerics;
pub mod quant;
pub mod search;

pub use error::{Error, Result};
pub use invariance::LayerTransform;
pub use model::{ModelConfig, ModelParams};
pub use numerics::{Matrix, RandomSource};
pub use quant::QuantSpec;
pub use search::{SearchConfig, SearchOutcome};
