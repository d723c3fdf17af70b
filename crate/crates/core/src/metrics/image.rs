use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, UnitTag};

/// Mean squared difference.
pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    a.require_same_shape(b)?;
    if a.unit() != b.unit() {
        return Err(Error::InvalidArgument("unit tags differ".into()));
    }
    let sum: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    /// Side of the square Gaussian window.
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    /// Normalized separable Gaussian taps.
    fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

/// Mean SSIM over the valid region (no padding) of the Gaussian-windowed
/// local statistics.
pub fn ssim(a: &ImageGrid, b: &ImageGrid, cfg: &SsimConfig) -> Result<f64> {
    a.require_same_shape(b)?;
    if a.unit() != UnitTag::Normalized || b.unit() != UnitTag::Normalized {
        return Err(Error::InvalidArgument(
            "SSIM expects normalized images".into(),
        ));
    }
    if cfg.window == 0 || cfg.k1 <= 0.0 || cfg.k2 <= 0.0 || cfg.sigma <= 0.0 {
        return Err(Error::InvalidArgument("bad SSIM configuration".into()));
    }
    let n = a.width();
    if n < cfg.window {
        return Err(Error::InvalidArgument(format!(
            "image {n}x{n} smaller than the {0}x{0} window",
            cfg.window
        )));
    }
    let taps = cfg.taps();
    let x: Vec<f64> = a.values().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = b.values().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();

    let mu_x = filter_valid(&x, n, &taps);
    let mu_y = filter_valid(&y, n, &taps);
    let e_xx = filter_valid(&xx, n, &taps);
    let e_yy = filter_valid(&yy, n, &taps);
    let e_xy = filter_valid(&xy, n, &taps);

    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Separable valid-region correlation of an `n x n` field.
fn filter_valid(data: &[f64], n: usize, taps: &[f64]) -> Vec<f64> {
    let w = taps.len();
    let m = n - w + 1;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * data[r * n + c + k])
                .sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(r + k) * m + c])
                .sum();
        }
    }
    out
}
