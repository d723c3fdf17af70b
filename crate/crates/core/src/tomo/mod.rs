//! 2D parallel-beam tomography.
//!
//! Coordinates: the rotation axis sits at the image center. Pixel `(row, col)`
//! of an `n x n` grid has its center at
//! `x = (col - (n-1)/2) * pixel_size`, `y = ((n-1)/2 - row) * pixel_size`.
//! The ray for angle `theta` and detector offset `t` is the line
//! `x cos(theta) + y sin(theta) = t`; bin `k` sits at
//! `t = (k - (bins-1)/2) * spacing`.

mod fbp;
mod geometry;
mod project;
mod window;

pub use fbp::{fbp_reconstruct, RampFilter};
pub use geometry::{ProjectionGeometry, Sinogram, FULL_VIEW_COUNT};
pub use project::forward_project;
pub use window::{apply_window, denormalize, WindowSpec};

/// Full-view reconstruction followed by the sparse-view reconstructions.
///
/// Returns `(full, [(views, sparse)])` in HU; the full-view image is the
/// reference every sparse image is compared against.
pub fn simulate_levels(
    image: &crate::ImageGrid,
    full_views: usize,
    levels: &[usize],
    filter: RampFilter,
) -> crate::Result<(crate::ImageGrid, Vec<(usize, crate::ImageGrid)>)> {
    let geom = ProjectionGeometry::for_image(image, full_views)?;
    let sino = forward_project(image, &geom)?;
    let full = fbp_reconstruct(&sino, image.width(), filter)?;
    let mut out = Vec::with_capacity(levels.len());
    for &views in levels {
        let sub = sino.subsample(views)?;
        let rec = fbp_reconstruct(&sub, image.width(), filter)?;
        out.push((views, rec));
    }
    Ok((full, out))
}
