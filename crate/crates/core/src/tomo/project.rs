use rayon::prelude::*;

use super::geometry::{ProjectionGeometry, Sinogram};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, UnitTag};

/// Ray-marching step in pixels.
const STEP_PIXELS: f64 = 0.5;

/// Line integrals of a HU image along every ray of `geom`.
///
/// Each ray is sampled at a step of at most half a pixel with bilinear
/// interpolation; the image is zero outside its grid.
pub fn forward_project(image: &ImageGrid, geom: &ProjectionGeometry) -> Result<Sinogram> {
    if image.unit() != UnitTag::Hu {
        return Err(Error::InvalidArgument(
            "forward projection expects a HU image".into(),
        ));
    }
    let n = image.width();
    let p = image.pixel_size();
    let c = (n as f64 - 1.0) / 2.0;
    // half-length of every ray, reaching past the bilinear support of the corner pixels
    let reach = (c + 1.0) * std::f64::consts::SQRT_2 + 1.0;
    let samples = (2.0 * reach / STEP_PIXELS).ceil() as usize + 1;
    let step = 2.0 * reach / (samples - 1) as f64;

    let pixels: Vec<f64> = image.values().iter().map(|&v| v as f64).collect();
    let bins = geom.detector_bins();
    let rows: Vec<Vec<f32>> = geom
        .angles()
        .par_iter()
        .map(|&theta| {
            let (sin, cos) = theta.sin_cos();
            (0..bins)
                .map(|k| {
                    // detector offset in pixel units
                    let t = geom.bin_offset(k) / p;
                    let mut acc = 0.0;
                    for m in 0..samples {
                        let s = -reach + m as f64 * step;
                        let x = t * cos - s * sin;
                        let y = t * sin + s * cos;
                        acc += bilinear(&pixels, n, c - y, x + c);
                    }
                    (acc * step * p) as f32
                })
                .collect()
        })
        .collect();
    Sinogram::new(geom.clone(), rows.concat())
}

/// Bilinear sample at fractional `(row, col)`, zero outside the grid.
#[inline]
fn bilinear(pixels: &[f64], n: usize, row: f64, col: f64) -> f64 {
    if row <= -1.0 || col <= -1.0 || row >= n as f64 || col >= n as f64 {
        return 0.0;
    }
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
            0.0
        } else {
            pixels[r as usize * n + c as usize]
        }
    };
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c0 + 1))
        + fr * ((1.0 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1))
}
