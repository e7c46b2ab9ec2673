//! Data-driven 4D aircraft trajectory prediction.
//!
//! The pipeline clusters historical flights into behavioral modes with
//! normalized DTW and Ward linkage, predicts the mode of a future flight from
//! forecast arrival conditions with a random forest, and rolls out a
//! per-mode Gaussian policy trained by behavioral cloning followed by
//! generative adversarial imitation (TRPO policy steps, GAE advantages).

pub mod cluster;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod forest;
pub mod geo;
pub mod imitation;
pub mod io;
pub mod neural;
pub mod preprocess;
pub mod pipeline;
pub mod synthgen;

pub use error::{Error, Result};
