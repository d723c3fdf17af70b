use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical meaning of the values stored in an [`ImageGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnitTag {
    /// Hounsfield units.
    #[serde(rename = "HU")]
    Hu,
    /// Windowed intensities in `[0, 1]`.
    #[serde(rename = "normalized")]
    Normalized,
    /// Signed difference of two normalized images, inside `[-1, 1]`.
    #[serde(rename = "residual")]
    Residual,
}

/// Square 2D scalar field stored row-major.
///
/// The width is a positive even number, every value is finite and
/// normalized images stay inside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    size: usize,
    pixel_size: f64,
    values: Vec<f32>,
    unit: UnitTag,
}

impl ImageGrid {
    pub fn new(
        width: usize,
        height: usize,
        pixel_size: f64,
        values: Vec<f32>,
        unit: UnitTag,
    ) -> Result<Self> {
        if width != height {
            return Err(Error::InvalidImage(format!(
                "image must be square, got {width}x{height}"
            )));
        }
        if width == 0 || !width.is_multiple_of(2) {
            return Err(Error::InvalidImage(format!(
                "width must be a positive even number, got {width}"
            )));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::InvalidImage(format!(
                "pixel size must be positive, got {pixel_size}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values, got {}",
                width * height,
                values.len()
            )));
        }
        check_values(&values, unit)?;
        Ok(ImageGrid {
            size: width,
            pixel_size,
            values,
            unit,
        })
    }

    pub fn zeros(size: usize, pixel_size: f64, unit: UnitTag) -> Result<Self> {
        Self::new(size, size, pixel_size, vec![0.0; size * size], unit)
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(
        size: usize,
        pixel_size: f64,
        unit: UnitTag,
        mut f: impl FnMut(usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                values.push(f(r, c));
            }
        }
        Self::new(size, size, pixel_size, values, unit)
    }

    pub fn width(&self) -> usize {
        self.size
    }

    pub fn height(&self) -> usize {
        self.size
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn pixel_size(&self) -> f64 {
        self.pixel_size
    }

    pub fn unit(&self) -> UnitTag {
        self.unit
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.size + col]
    }

    /// Applies `f` to every value, re-validating the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let values = self.values.iter().map(|&v| f(v)).collect();
        Self::new(self.size, self.size, self.pixel_size, values, self.unit)
    }

    /// Same values under a different unit tag.
    pub fn retag(self, unit: UnitTag) -> Result<Self> {
        Self::new(self.size, self.size, self.pixel_size, self.values, unit)
    }

    pub fn same_shape(&self, other: &ImageGrid) -> bool {
        self.size == other.size
    }

    pub(crate) fn require_same_shape(&self, other: &ImageGrid) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "{0}x{0} vs {1}x{1}",
                self.size, other.size
            )));
        }
        Ok(())
    }
}

fn check_values(values: &[f32], unit: UnitTag) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("pixel {i} is {}", values[i])));
    }
    let range = match unit {
        UnitTag::Hu => return Ok(()),
        UnitTag::Normalized => 0.0..=1.0,
        UnitTag::Residual => -1.0..=1.0,
    };
    if let Some(i) = values.iter().position(|v| !range.contains(v)) {
        return Err(Error::InvalidImage(format!(
            "{unit:?} pixel {i} = {} outside [{}, {}]",
            values[i],
            range.start(),
            range.end()
        )));
    }
    Ok(())
}

/// Denominator of the grid that normalized images are snapped to.
///
/// Values `k / 2^16` with `0 <= k <= 2^16` subtract exactly in `f32`, which
/// keeps `sparse - (sparse - full) == full` bit-exact.
pub const NORMALIZED_QUANTUM: f32 = 65536.0;

/// Snaps a normalized image onto the `1/65536` grid.
pub fn quantize_normalized(image: &ImageGrid) -> Result<ImageGrid> {
    if image.unit() != UnitTag::Normalized {
        return Err(Error::InvalidArgument(
            "quantization applies to normalized images only".into(),
        ));
    }
    image.map(|v| (v * NORMALIZED_QUANTUM).round() / NORMALIZED_QUANTUM)
}
