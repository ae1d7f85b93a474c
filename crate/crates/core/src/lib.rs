//! Fourier-filtered dataset variants and cross-variant generalization gaps.
//!
//! The crate builds low-pass (radial) and uniformly random Fourier-masked
//! copies of image datasets, trains small pre-activation residual networks
//! on each copy, and tabulates how far test error moves when a model trained
//! on one copy is evaluated on the others.
//!
//! Module map:
//!
//! - [`spectral`]: unitary centered 2D DFT and power spectra.
//! - [`masks`]: radial and random Fourier masks.
//! - [`filtering`]: masked filtering of images and datasets, variant sets.
//! - [`datasets`]: CIFAR-10 ingestion, synthetic data, preprocessing,
//!   augmentation and variant persistence.
//! - [`model`]: the convolutional classifier, its gradients and training.
//! - [`harness`]: experiment grid, gap reports, spectral fits and exports.

pub mod datasets;
pub mod error;
pub mod exec;
pub mod filtering;
pub mod harness;
pub mod masks;
pub mod model;
pub mod spectral;

mod seed_serde;

pub use error::{Error, ErrorClass, Result};
pub use exec::Execution;
