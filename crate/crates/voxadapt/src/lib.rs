//! Adversarial 2D-to-3D shape reconstruction.
//!
//! Two unpaired image domains (clean synthetic renders and stylized
//! "photo-like" views) are embedded into one latent space by an
//! adversarially trained 2D autoencoder, and a 3D decoder maps that
//! latent space to voxel occupancy grids. Everything runs on the CPU
//! in f64: tensors, reverse-mode autodiff, optimizers, the procedural
//! dataset, the training schedule, and the evaluation tools.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
