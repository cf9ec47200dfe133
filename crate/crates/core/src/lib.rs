//! Pixel-wise energy-biased abstention learning for anomaly segmentation.
//!
//! The crate covers the whole desk-scale pipeline: loss kernels with
//! analytic gradients ([`losses`]), cut-and-paste outlier synthesis
//! ([`anomalymix`]), procedural driving scenes ([`scenegen`]), a frozen
//! feature extractor with a trainable head ([`model`]), energy-based
//! inference ([`inference`]) and pixel-level OOD metrics ([`metrics`]).

pub mod anomalymix;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod grid;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod numeric;
pub mod parallel;
pub mod scenegen;

pub use error::{PebalError, Result};
pub use grid::{LabelMap, LabeledSample, Mask, PixelGrid, IGNORE};
