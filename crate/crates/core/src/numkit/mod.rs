//! Deterministic dense numeric kernel: matrices, a reverse-mode tape, layer
//! primitives, optimizers, and gradient checking.
//!
//! All training math runs at 64-bit precision so finite-difference checks can
//! use tight tolerances; 32-bit appears only at the checkpoint boundary.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{
    spectral_normalize, LayerParams, MlpNet, MlpOptions, NetTrace, NormState, Phase, SpectralState,
};
pub use matrix::Matrix;
pub use optim::{adam_step, sgd_step, OptKind, OptimizerState};
pub use rng::{derive_seed, stream};
pub use tape::{BnForward, BufId, Tape};

/// Errors raised by kernel operations.
#[derive(Debug, thiserror::Error)]
pub enum NumError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch normalization needs batch >= 2 in train mode, got {0}")]
    DegenerateBatch(usize),
    #[error("non-finite loss ({0}) during gradient check")]
    NonFiniteLoss(f64),
}
