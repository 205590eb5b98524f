//! Generates lesion segmentation masks for multi-modal medical slices with a
//! conditional denoising diffusion model. The conditioning signal comes from
//! two small autoencoder ensembles trained on different slices of the data
//! (one sees everything, one sees only healthy anatomy); where their
//! reconstructions disagree is exactly where lesions tend to live, and those
//! pixel-wise discrepancy maps are fed to the denoiser alongside the image.
//!
//! Crate layout:
//! - [`schedule`]: forward/reverse diffusion arithmetic and the noise schedule
//! - [`nn`]: minimal CPU tensor layers with hand-written backprop
//! - [`autoencoder`]: the reconstruction network used by ensemble members
//! - [`discrepancy`]: ensemble training plus inter/intra discrepancy features
//! - [`denoiser`]: conditioning variants and the U-Net noise predictor
//! - [`trainer`]: diffusion training loop
//! - [`sampler`]: reverse-process sampling, multi-sample mask averaging
//! - [`data`]: slice records, synthetic phantom generator, dataset files
//! - [`metrics`]: segmentation and separability metrics
//! - [`checkpoint`]: weight/descriptor serialization
//! - [`config`]: experiment configuration (TOML)
//! - [`pipeline`]: stage orchestration used by the CLI and the C ABI

pub mod autoencoder;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod discrepancy;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod schedule;
pub mod trainer;
