use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use super::geometry::Sinogram;
use crate::error::{Error, Result};
use crate::image::{ImageGrid, UnitTag};

/// Frequency response applied to each projection before backprojection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RampFilter {
    /// Pure ramp.
    #[default]
    RamLak,
    /// Ramp apodized by a Hann window.
    Hann,
}

/// Filtered backprojection onto an `out_size x out_size` grid whose pixel
/// size equals the detector spacing.
///
/// Each view is ramp-filtered in the frequency domain (zero-padded to the
/// next power of two `>= 2 * bins`), then backprojected pixel by pixel with
/// linear interpolation between detector bins and scaled by `pi / n_views`.
pub fn fbp_reconstruct(sino: &Sinogram, out_size: usize, filter: RampFilter) -> Result<ImageGrid> {
    let geom = sino.geometry();
    let n_views = geom.n_views();
    if n_views < 2 {
        return Err(Error::InvalidArgument(format!(
            "reconstruction needs at least 2 views, got {n_views}"
        )));
    }
    if sino.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sinogram".into()));
    }
    let bins = geom.detector_bins();
    let tau = geom.detector_spacing();
    let filtered = filter_views(sino, filter);

    let c = (out_size as f64 - 1.0) / 2.0;
    let center_bin = geom.center_bin();
    let trig: Vec<(f64, f64)> = geom.angles().iter().map(|a| a.sin_cos()).collect();
    let scale = PI / n_views as f64;

    let mut values = vec![0f32; out_size * out_size];
    values
        .par_chunks_mut(out_size)
        .enumerate()
        .for_each(|(row, out)| {
            // coordinates in detector-bin units
            let y = c - row as f64;
            for (col, px) in out.iter_mut().enumerate() {
                let x = col as f64 - c;
                let mut acc = 0.0;
                for (view, &(sin, cos)) in trig.iter().enumerate() {
                    let u = x * cos + y * sin + center_bin;
                    if u < 0.0 || u > (bins - 1) as f64 {
                        continue;
                    }
                    let k = u.floor() as usize;
                    let f = u - k as f64;
                    let q = &filtered[view * bins..(view + 1) * bins];
                    acc += if k + 1 < bins {
                        (1.0 - f) * q[k] + f * q[k + 1]
                    } else {
                        q[k]
                    };
                }
                *px = (acc * scale) as f32;
            }
        });
    ImageGrid::new(out_size, out_size, tau, values, UnitTag::Hu)
}

/// Filtered projections, row-major like the sinogram.
fn filter_views(sino: &Sinogram, filter: RampFilter) -> Vec<f64> {
    let geom = sino.geometry();
    let bins = geom.detector_bins();
    let tau = geom.detector_spacing();
    let len = (2 * bins).next_power_of_two();
    let response = filter_response(len, tau, filter);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(len);
    let ifft = planner.plan_fft_inverse(len);

    let rows: Vec<Vec<f64>> = (0..geom.n_views())
        .into_par_iter()
        .map(|view| {
            let mut buf: Vec<Complex<f64>> = sino
                .row(view)
                .iter()
                .map(|&v| Complex::new(v as f64, 0.0))
                .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
                .take(len)
                .collect();
            fft.process(&mut buf);
            for (b, h) in buf.iter_mut().zip(&response) {
                *b *= *h;
            }
            ifft.process(&mut buf);
            // 1/len undoes the unnormalized inverse, tau is the convolution measure
            buf[..bins]
                .iter()
                .map(|z| z.re * tau / len as f64)
                .collect()
        })
        .collect();
    rows.concat()
}

/// DFT of the band-limited discrete ramp kernel
/// `h[0] = 1/(4 tau^2)`, `h[odd n] = -1/(n pi tau)^2`, `h[even n] = 0`,
/// optionally multiplied by a Hann window.
fn filter_response(len: usize, tau: f64, filter: RampFilter) -> Vec<f64> {
    let mut kernel = vec![Complex::new(0.0, 0.0); len];
    kernel[0].re = 1.0 / (4.0 * tau * tau);
    for n in (1..len / 2).step_by(2) {
        let v = -1.0 / (n as f64 * PI * tau).powi(2);
        kernel[n].re = v;
        kernel[len - n].re = v;
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(len).process(&mut kernel);
    kernel
        .iter()
        .enumerate()
        .map(|(k, z)| {
            let freq = k.min(len - k) as f64 / len as f64;
            match filter {
                RampFilter::RamLak => z.re,
                RampFilter::Hann => z.re * 0.5 * (1.0 + (2.0 * PI * freq).cos()),
            }
        })
        .collect()
}
