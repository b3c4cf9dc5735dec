//! Whole-slide image survival prediction: stain normalization, tiling and
//! augmentation, information-density and phenotype patch clustering,
//! per-cluster patch classifiers and decision fusion.

pub mod chromanorm;
pub mod classify;
pub mod error;
pub mod fusion;
pub mod imagecore;
pub mod infodensity;
pub mod numerics;
pub mod phenotype;
pub mod pipeline;
pub mod synthdata;
pub mod tiling;
pub mod util;

pub use error::{Error, Result};
