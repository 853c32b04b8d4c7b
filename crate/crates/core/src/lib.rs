//! Macro-action reinforcement learning in a 2D continuous world.
//!
//! The pipeline has five stages, each its own module:
//!
//! 1. [`scripts`] — scripted experts generate demonstrations in the Base task.
//! 2. [`segmentation`] — a sliding-window autoencoder cuts the demonstration
//!    action sequences into variable-length macro-action candidates.
//! 3. [`favae`] — a ladder sequence-VAE with capacity annealing learns a
//!    disentangled latent code over padded segments.
//! 4. [`policy`] — PPO acts in the learned latent space (plus primitive-action
//!    and action-repetition baselines) on the Maze task.
//! 5. [`pipeline`] — file-based orchestration used by the CLI.
//!
//! Everything runs on the small deterministic f64 network substrate in [`nn`].

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod favae;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod scripts;
pub mod segmentation;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::Tensor;
