use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, UnitTag};

/// Display window in HU.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub level: f64,
    pub width: f64,
}

impl WindowSpec {
    /// Lung window: level -600 HU, width 1700 HU.
    pub const LUNG: WindowSpec = WindowSpec {
        level: -600.0,
        width: 1700.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0 && self.level.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "window width must be positive, got {}",
                self.width
            )));
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        self.level - self.width / 2.0
    }

    pub fn upper(&self) -> f64 {
        self.level + self.width / 2.0
    }

    /// Normalized intensity of a single HU value.
    pub fn normalize(&self, hu: f64) -> f64 {
        (hu.clamp(self.lower(), self.upper()) - self.lower()) / self.width
    }
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec::LUNG
    }
}

/// Clips a HU image to the window and maps it affinely onto `[0, 1]`.
pub fn apply_window(image: &ImageGrid, window: WindowSpec) -> Result<ImageGrid> {
    window.validate()?;
    if image.unit() != UnitTag::Hu {
        return Err(Error::InvalidArgument(
            "windowing expects a HU image".into(),
        ));
    }
    let values = image
        .values()
        .iter()
        .map(|&v| window.normalize(v as f64) as f32)
        .collect();
    ImageGrid::new(
        image.width(),
        image.height(),
        image.pixel_size(),
        values,
        UnitTag::Normalized,
    )
}

/// Inverse of the affine part of [`apply_window`]: normalized back to HU.
pub fn denormalize(image: &ImageGrid, window: WindowSpec) -> Result<ImageGrid> {
    window.validate()?;
    if image.unit() != UnitTag::Normalized {
        return Err(Error::InvalidArgument(
            "denormalization expects a normalized image".into(),
        ));
    }
    let values = image
        .values()
        .iter()
        .map(|&v| (v as f64 * window.width + window.lower()) as f32)
        .collect();
    ImageGrid::new(
        image.width(),
        image.height(),
        image.pixel_size(),
        values,
        UnitTag::Hu,
    )
}
