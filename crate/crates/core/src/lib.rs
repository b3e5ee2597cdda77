//! Joint graph-structure learning and multivariate time-series forecasting.
//!
//! A structure learner scores every ordered pair of variables and samples a
//! binary adjacency with a straight-through Gumbel estimator. A
//! diffusion-convolutional GRU forecasts over that graph, and an SEM graph
//! autoencoder `g₂(Aᵀ g₁(X))` regularizes the learned structure.

pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod registry;
pub mod sem;
pub mod structure;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{GaetsError, Result};
