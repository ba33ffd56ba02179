//! Meta-learned neural-weight generation via local consistency diffusion.
//!
//! The pipeline has two stages. Weight preparation optimizes a small dense
//! network per task with SAM-perturbed Adam under data augmentation and
//! records the full trajectory; k local target weights are sampled from it
//! at uniform intervals. Meta-training fits a conditional noise predictor
//! to those targets with the local consistency loss inside a REPTILE
//! inner/outer loop, so that one reverse chain started from Gaussian noise
//! passes through every local target at evenly spaced T/k step intervals.
//! Inference is gradient-free: run the chain, read the final state as the
//! generated weights.
//!
//! Modules follow the pipeline: [`nn`] (dense nets, exact gradients, Adam,
//! SAM), [`tasks`] (synthetic task families, embeddings, augmentation),
//! [`schedule`] (noise-schedule algebra), [`weightprep`] (trajectory
//! collection), [`denoiser`] (the conditional noise predictor),
//! [`diffusion`] (losses and the reverse chain), [`meta`] (REPTILE loops),
//! [`theory`] (numeric verifiers for the convergence bounds), and
//! [`harness`] (config, orchestration, metrics, CSV output).

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod io;
pub mod meta;
pub mod nn;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod theory;
pub mod vector;
pub mod weightprep;

pub use error::{Error, Result};
pub use vector::WeightVector;
