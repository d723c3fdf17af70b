use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;

/// View count of the full-view acquisition.
pub const FULL_VIEW_COUNT: usize = 2048;

/// Parallel-beam acquisition geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    angles: Vec<f64>,
    detector_bins: usize,
    detector_spacing: f64,
}

impl ProjectionGeometry {
    /// `n_views` angles evenly spaced over `[0, pi)`.
    pub fn parallel(n_views: usize, detector_bins: usize, detector_spacing: f64) -> Result<Self> {
        let angles = (0..n_views)
            .map(|k| k as f64 * PI / n_views as f64)
            .collect();
        Self::with_angles(angles, detector_bins, detector_spacing)
    }

    /// Geometry covering the image diagonal: the smallest odd bin count
    /// `>= ceil(sqrt(2) * width)` with spacing equal to the pixel size.
    pub fn for_image(image: &ImageGrid, n_views: usize) -> Result<Self> {
        Self::parallel(
            n_views,
            detector_bins_for(image.width()),
            image.pixel_size(),
        )
    }

    pub fn with_angles(
        angles: Vec<f64>,
        detector_bins: usize,
        detector_spacing: f64,
    ) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::InvalidGeometry("empty angle list".into()));
        }
        if detector_bins.is_multiple_of(2) {
            return Err(Error::InvalidGeometry(format!(
                "detector bin count must be odd, got {detector_bins}"
            )));
        }
        if !(detector_spacing.is_finite() && detector_spacing > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "detector spacing must be positive, got {detector_spacing}"
            )));
        }
        if angles
            .iter()
            .any(|a| !a.is_finite() || *a < 0.0 || *a >= PI)
        {
            return Err(Error::InvalidGeometry("angles must lie in [0, pi)".into()));
        }
        if angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGeometry(
                "angles must be strictly increasing".into(),
            ));
        }
        if angles.len() > 2 {
            let step = angles[1] - angles[0];
            let uneven = angles
                .windows(2)
                .any(|w| ((w[1] - w[0]) - step).abs() > 1e-9 * step.max(1.0));
            if uneven {
                return Err(Error::InvalidGeometry(
                    "angles must be evenly spaced".into(),
                ));
            }
        }
        Ok(ProjectionGeometry {
            angles,
            detector_bins,
            detector_spacing,
        })
    }

    pub fn n_views(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn detector_bins(&self) -> usize {
        self.detector_bins
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    /// Index of the bin on the rotation axis.
    pub fn center_bin(&self) -> f64 {
        (self.detector_bins - 1) as f64 / 2.0
    }

    /// Detector offset of bin `k`.
    pub fn bin_offset(&self, k: usize) -> f64 {
        (k as f64 - self.center_bin()) * self.detector_spacing
    }
}

pub(crate) fn detector_bins_for(width: usize) -> usize {
    let n = (std::f64::consts::SQRT_2 * width as f64).ceil() as usize;
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

/// Projection data, one row of detector bins per view (units HU*mm).
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    geometry: ProjectionGeometry,
    values: Vec<f32>,
}

impl Sinogram {
    pub fn new(geometry: ProjectionGeometry, values: Vec<f32>) -> Result<Self> {
        let expected = geometry.n_views() * geometry.detector_bins();
        if values.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "sinogram needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sinogram entry {i}")));
        }
        Ok(Sinogram { geometry, values })
    }

    pub fn geometry(&self) -> &ProjectionGeometry {
        &self.geometry
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, view: usize) -> &[f32] {
        let bins = self.geometry.detector_bins();
        &self.values[view * bins..(view + 1) * bins]
    }

    /// Keeps every `full/n_views`-th view starting from view 0.
    pub fn subsample(&self, n_views: usize) -> Result<Sinogram> {
        let full = self.geometry.n_views();
        if n_views == 0 || n_views > full {
            return Err(Error::InvalidArgument(format!(
                "cannot take {n_views} views from {full}"
            )));
        }
        if !full.is_multiple_of(n_views) {
            return Err(Error::InvalidArgument(format!(
                "{n_views} does not divide {full}"
            )));
        }
        let stride = full / n_views;
        let angles = (0..n_views)
            .map(|k| self.geometry.angles()[k * stride])
            .collect();
        let geometry = ProjectionGeometry::with_angles(
            angles,
            self.geometry.detector_bins(),
            self.geometry.detector_spacing(),
        )?;
        let mut values = Vec::with_capacity(n_views * geometry.detector_bins());
        for k in 0..n_views {
            values.extend_from_slice(self.row(k * stride));
        }
        Ok(Sinogram { geometry, values })
    }
}
