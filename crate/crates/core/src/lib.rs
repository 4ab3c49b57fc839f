//! Self-supervised patch embeddings from unlabeled video.
//!
//! The pipeline has three stages:
//!
//! 1. [`motion`] and [`mining`] find moving regions in frame sequences,
//!    track them, and emit `(query, tracked)` patch pairs.
//! 2. [`encoder`] and [`trainer`] learn a convolutional embedding in which a
//!    query patch is closer (in cosine distance) to its tracked patch than to
//!    patches from other videos, using random and then hard negative mining.
//! 3. [`eval`] measures embedding quality with nearest-neighbour retrieval and
//!    a linear softmax probe.
//!
//! [`config`] ties the per-stage settings into one JSON document.

pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod mining;
pub mod motion;
pub mod rng;
pub mod synth;
pub mod trainer;
pub mod video_io;

pub use error::{Error, Result};
