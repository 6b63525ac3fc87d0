//! AE-OT-GAN at desk scale.
//!
//! The pipeline embeds data with an autoencoder, solves a semi-discrete
//! optimal transport map from the unit cube onto the latent codes, extends
//! that map piecewise-linearly over a Rips complex to get a continuous
//! latent sampler, and fine-tunes the decoder as a GAN generator fed by the
//! sampler.

pub mod aegan;
pub mod config;
pub mod data;
pub mod error;
pub mod extension;
pub mod geometry;
pub mod kdtree;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
mod power2d;
pub mod rng;
pub mod sdot;

pub use error::{Error, Result};
pub use geometry::{squared_distance, Point, PointCloud};
pub use rng::{uniform_cube_sample, RngStream};
