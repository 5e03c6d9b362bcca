//! Temporal transductive inference for few-shot video object segmentation.
//!
//! Given normalized per-frame feature maps of a query video and a handful of
//! labelled support images, the crate learns one linear classifier per query
//! frame. Optimization combines the support cross entropy with entropy and
//! region-proportion regularizers on the query frames and a video-level
//! consistency term that ties every frame's foreground signature to the mean
//! classifier. A second stage refines all classifiers on pseudo-labels of the
//! frame most aligned with that mean.

pub mod classifier;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod optimizer;

pub use error::{Error, Result};
