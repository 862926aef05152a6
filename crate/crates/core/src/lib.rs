//! Learning to open revolute-joint cabinet doors.
//!
//! The pipeline, bottom-up:
//!
//! * [`kinematics`]: frames and the two-parameter `(r, θ)` action that
//!   replaces a full six-dimensional gripper twist.
//! * [`envdomain`]: the sixteen randomized door parameters.
//! * [`doorsim`]: a door on a revolute joint dragged by a velocity-commanded
//!   gripper through a compliant coupling.
//! * [`neural`]: dense and 1-D convolution layers with hand-written
//!   gradients, Gaussian heads and Adam.
//! * [`vae`]: compresses door parameters into an eight-dimensional latent.
//! * [`policy`] and [`ppo`]: the base policy and its PPO training.
//! * [`rollout`]: closed-loop episodes against a door that exposes only
//!   observations.
//! * [`adaptation`]: estimates the latent from action/state history and
//!   fine-tunes that estimator against the base policy's actions.
//! * [`harness`]: evaluation, statistics and paired ablation runs.

pub mod adaptation;
pub mod config;
pub mod doorsim;
pub mod envdomain;
pub mod error;
pub mod harness;
pub mod kinematics;
pub mod neural;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod vae;

pub use error::{Error, Result};
