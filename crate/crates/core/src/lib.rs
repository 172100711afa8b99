//! Concept-bottleneck debugging workbench.
//!
//! Trains a small concept bottleneck on synthetic data with a planted
//! shortcut, turns concept-level feedback into sample-level auxiliary labels,
//! reweights samples by permutation weighting, augments bias-aligned samples
//! with spurious-concept evidence, and fine-tunes. Baselines and group-robust
//! evaluation live alongside.

pub mod augment;
pub mod cbm;
pub mod error;
pub mod eval;
pub mod feedback;
pub mod io;
pub mod permweight;
pub mod retrain;
pub mod synthdata;

pub use error::{Error, Result};
pub use io::Artifact;
