//! Image quality, segmentation overlap, diagnostic statistics and paired
//! tests.

mod image;
mod segmentation;
mod summary;
mod wilcoxon;

pub use image::{mse, ssim, SsimConfig};
pub use segmentation::{
    classify, classify_annotation, diagnostic_stats, dice, ConfusionCounts, DiagnosticStats,
    Outcome,
};
pub use summary::{mean_ci, MeanCi};
pub use wilcoxon::{clustered_wilcoxon, PairedSample, WilcoxonResult};
