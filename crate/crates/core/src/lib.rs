//! Expert-guided conditional diffusion planning for constrained auto-bidding.
//!
//! The crate contains a seeded second-price auction simulator, a dual-form
//! expert bidder, a small reverse-mode autodiff engine, and the planner built
//! on it: a VAE over expert trajectories mixed in by blended forcing, a
//! cross-attention denoiser, a DDPM with skip-step guided sampling, and an
//! inverse-dynamics action head. Training, rollout evaluation, baselines and
//! persistence live alongside.

pub mod auction;
pub mod diffusion;
pub mod egcd;
pub mod autodiff;
pub mod baseline;
pub mod config;
pub mod data;
pub mod error;
pub mod expert;
pub mod gradsuite;
pub mod inverse;
pub mod io;
pub mod par;
pub mod rollout;
pub mod train;
pub mod vae;

pub use error::{Error, Result};
