//! Unsupervised pixel-wise crack detection by adversarial image restoration.
//!
//! Training corrupts undamaged road patches with binary masks and teaches a
//! U-Net generator, opposed by a patch discriminator, to restore them. At
//! test time cracks are whatever the model fails to restore: the squared
//! restoration residual is smoothed with a bilateral filter and binarized
//! with Otsu's method.
//!
//! Pipeline: [`maskgen`] corrupts, [`model`] restores, [`losses`] scores,
//! [`trainer`] fits, [`detector`] segments, [`evalkit`] measures, and
//! [`datapipe`] feeds everything from disk.

pub mod container;
pub mod datapipe;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod image;
pub mod losses;
pub mod maskgen;
pub mod model;
pub mod reference;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result, Stage};
