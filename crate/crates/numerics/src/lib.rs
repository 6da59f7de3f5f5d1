//! Dense-tensor reverse-mode autodiff with the handful of primitives needed to train small
//! convolutional encoders, a conditional U-Net and a convolutional autoencoder on CPU.
//!
//! Everything is deterministic: the tape is walked in a fixed order, parameters live in an
//! insertion-ordered [`ParamSet`], and all randomness comes from caller-supplied seeded RNGs.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::{load_checkpoint, load_into, read_manifest, save_checkpoint, Manifest};
pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use optim::{adam_step, ema_update, AdamState};
pub use params::{fan_in_uniform, ParamEntry, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tensor::Tensor;
