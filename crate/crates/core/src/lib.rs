//! Sparse-view CT workbench.
//!
//! The crate covers the full offline pipeline:
//!
//! + [`tomo`]: parallel-beam forward projection, view subsampling, filtered
//!   backprojection and display windowing
//! + [`phantom`]: synthetic thorax slices with a single lung nodule, raw slice
//!   loading and dataset manifests
//! + [`nn`]: a dual-frame U-Net with hand-written backpropagation and Adam,
//!   trained on residual (pure artifact) labels
//! + [`metrics`]: MSE, SSIM, Dice, diagnostic statistics and the clustered
//!   Wilcoxon signed-rank test
//! + [`study`]: blinded presentation sets, the append-only annotation store
//!   and the reader-study analysis

pub mod error;
pub mod image;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod study;
pub mod tomo;

pub use crate::error::{Error, Result};
pub use crate::image::{ImageGrid, UnitTag};
pub use crate::mask::BinaryMask;
