//! Fine-grained recognition by attending to a discriminative region and
//! reading its parts as a sequence.
//!
//! Built on a small define-by-run autodiff core ([`tape`]) generic over
//! `f32` and `f64`. With the default `parallel` feature, batch-level work
//! runs on rayon; without it everything is sequential and results are
//! identical.

pub mod checkpoint;
pub mod checks;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod pnm;
pub mod psn;
pub mod ran;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{Ablation, FinalHeadMode, ModelConfig, RunConfig, TrainConfig};
pub use model::ReapsModel;
pub use scalar::Scalar;
pub use tape::{PoolMode, Tape, Var};
pub use tensor::{Tensor, TensorError};
