//! Sound-guided semantic image manipulation at desk scale.
//!
//! The pipeline has two halves. First, three small encoders map audio,
//! text, and images into one shared embedding space, trained with
//! symmetric InfoNCE losses plus a self-supervised loss over augmented
//! audio views. Second, a layered-latent toy generator is steered by
//! gradient descent on its latent code so the generated image's embedding
//! approaches a target audio embedding, with an identity term, an
//! adaptive per-layer gate on the deviation penalty, and audio/text
//! style mixing.

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod manipulator;
pub mod ppm;
pub mod seeds;
pub mod text;
pub mod wav;

pub use autodiff::{grad_check, Tape, Tensor};
pub use config::Config;
pub use error::{Error, Result};
