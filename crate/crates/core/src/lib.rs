//! Deep joint spectral-spatial classification of hyperspectral images with
//! stacked sparse autoencoders, batch-mode active learning and active
//! transfer learning across scenes.

pub mod active;
pub mod autoencoder;
pub mod data;
pub mod emap;
pub mod error;
pub mod network;
pub mod numcore;
pub mod pipeline;
pub mod transfer;

pub use error::{Error, ErrorKind, Result};
