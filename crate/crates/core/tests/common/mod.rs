#![allow(dead_code)]

use sparse_ct_core::{ImageGrid, UnitTag};

/// Line integral of the bilinear image along `(theta, t)` by dense sampling.
///
/// Independent of the library projector: it walks the ray in `0.1` pixel
/// steps over a generous range and interpolates the pixel lattice directly.
pub fn brute_force_ray(image: &ImageGrid, theta: f64, t_mm: f64) -> f64 {
    let n = image.width() as isize;
    let p = image.pixel_size();
    let half = (n as f64 - 1.0) / 2.0;
    let step = 0.1;
    let span = n as f64 * 1.5;
    let count = (2.0 * span / step) as isize;
    let pix = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= n || c >= n {
            0.0
        } else {
            image.get(r as usize, c as usize) as f64
        }
    };
    let mut sum = 0.0;
    for m in 0..=count {
        let s = -span + m as f64 * step;
        let x = t_mm / p * theta.cos() - s * theta.sin();
        let y = t_mm / p * theta.sin() + s * theta.cos();
        let col = x + half;
        let row = half - y;
        let (r0, c0) = (row.floor() as isize, col.floor() as isize);
        let (fr, fc) = (row - r0 as f64, col - c0 as f64);
        let v = pix(r0, c0) * (1.0 - fr) * (1.0 - fc)
            + pix(r0, c0 + 1) * (1.0 - fr) * fc
            + pix(r0 + 1, c0) * fr * (1.0 - fc)
            + pix(r0 + 1, c0 + 1) * fr * fc;
        sum += v;
    }
    sum * step * p
}

pub fn disk(size: usize, radius: f64, value: f32) -> ImageGrid {
    let c = (size as f64 - 1.0) / 2.0;
    ImageGrid::from_fn(size, 1.0, UnitTag::Hu, |r, col| {
        let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
        if d <= radius {
            value
        } else {
            0.0
        }
    })
    .unwrap()
}

/// Sum of Gaussian blobs, smooth enough for the FBP round trip.
pub fn smooth_phantom(size: usize) -> ImageGrid {
    let h = size as f64 / 2.0;
    let c = (size as f64 - 1.0) / 2.0;
    let blobs = [
        (0.0, 0.0, 0.45, 400.0),
        (-0.3, 0.1, 0.15, -250.0),
        (0.28, -0.05, 0.12, 300.0),
        (0.05, 0.35, 0.08, 200.0),
    ];
    ImageGrid::from_fn(size, 1.0, UnitTag::Hu, |r, col| {
        let x = (col as f64 - c) / h;
        let y = (c - r as f64) / h;
        blobs
            .iter()
            .map(|&(bx, by, s, a)| {
                a * (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * s * s)).exp()
            })
            .sum::<f64>() as f32
    })
    .unwrap()
}

pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Relative RMSE of `rec` against `truth` over the inscribed circle.
pub fn inscribed_relative_rmse(rec: &ImageGrid, truth: &ImageGrid) -> f64 {
    let n = truth.width();
    let c = (n as f64 - 1.0) / 2.0;
    let (mut err, mut norm) = (0.0, 0.0);
    for r in 0..n {
        for col in 0..n {
            if ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt() <= n as f64 / 2.0 {
                let t = truth.get(r, col) as f64;
                err += (rec.get(r, col) as f64 - t).powi(2);
                norm += t * t;
            }
        }
    }
    (err / norm).sqrt()
}

pub fn mse(a: &ImageGrid, b: &ImageGrid) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / a.len() as f64
}
