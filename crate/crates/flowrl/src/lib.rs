//! Desk-scale RL fine-tuning of rectified-flow generative models with
//! per-step gain-based credit assignment, on 2-D Gaussian-mixture toys.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`net`] / [`optim`]: a small velocity network with hand-written
//!   reverse-mode gradients and AdamW.
//! - [`flow`]: rectified-flow math (interpolation, flow-matching loss, ODE
//!   integration, clean/noise predictions, multi-substep denoising).
//! - [`sde`]: stochastic samplers (Euler-Maruyama and DDIM-style), their
//!   Gaussian transition laws, rollouts, and marginal-matching checks.
//! - [`reward`]: toy reward functions and stepwise reward evaluation.
//! - [`credit`]: gains, normalizations, and the other advantage transforms.
//! - [`grpo`]: the clipped-surrogate objective with KL anchoring, its
//!   variants, and the training iteration.
//! - [`task`], [`pretrain`], [`checkpoint`], [`rng`], [`stats`], [`exec`]:
//!   the supporting cast.

pub mod checkpoint;
pub mod credit;
pub mod error;
pub mod exec;
pub mod flow;
pub mod grpo;
pub mod net;
pub mod optim;
pub mod pretrain;
pub mod reward;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod task;

pub use error::{Error, Result};
