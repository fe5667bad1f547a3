//! Desk-scale simulator of semi-supervised federated learning for keyword
//! spotting.
//!
//! A labeled-data server and many unlabeled-data clients jointly train a
//! small temporal-convolution residual classifier over mel-spectrogram-like
//! feature matrices. Clients train on confidence-thresholded pseudo-labels
//! (weak view labels, strong view targets), the server fine-tunes on its
//! labeled subset, and models are combined by unweighted parameter
//! averaging under either a parallel or an alternate schedule.
//!
//! Everything is deterministic in the experiment seed: model init, data
//! synthesis, partitioning, augmentation, client sampling, and training all
//! draw from seed-derived ChaCha streams, so identical configurations
//! reproduce identical metrics byte for byte.

pub mod augment;
mod binio;
pub mod config;
pub mod csvlog;
pub mod data;
pub mod error;
pub mod fedsim;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod ssl;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
