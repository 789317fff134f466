//! LiDAR point-cloud imaging toolkit.
//!
//! Turns raw LiDAR scans into dense range-view images, trains a denoising
//! diffusion model on those images, and scores generated sets against real
//! ones. The pipeline stages are independent modules wired together by the
//! `lpci` binary:
//!
//! - [`pointcloud`]: scan loading, kNN density, depth smoothing
//! - [`projection`]: spherical / bird's-eye-view image formation
//! - [`schedule`]: forward-process noise schedules
//! - [`embedding`]: scalar time-step embeddings
//! - [`denoiser`]: trainable convolutional noise predictor
//! - [`diffusion`]: forward corruption, training loop, ancestral sampling
//! - [`metrics`]: distributional scores between image sets

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod embedding;
mod error;
mod kdtree;
pub mod metrics;
pub mod pointcloud;
pub mod projection;
pub mod schedule;
pub mod synth;
pub mod tensorfile;

pub use error::{Error, Result};
