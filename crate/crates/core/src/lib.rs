//! Instance-conditioned prompt learning for semantic segmentation at desk
//! scale: toy encoders, prompt assembly and refinement, dense and
//! multi-scale vision-text alignment, align-guided contrastive learning,
//! and a training and evaluation pipeline on synthetic shapes.

pub mod alignment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layout;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod plot;
pub mod prompting;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
