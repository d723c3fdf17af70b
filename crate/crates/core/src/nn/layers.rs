//! Layer primitives with explicit backward passes.
//!
//! Work is split over disjoint output planes so every value is produced by
//! one thread in a fixed summation order; results do not depend on the
//! thread count.

use rayon::prelude::*;

use super::tensor::{gemm, Scalar, Tensor4};

pub(crate) const BN_EPS: f64 = 1e-5;

/// Valid `[lo, hi)` output range along one axis for a kernel offset.
#[inline]
fn span(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

/// Unfolds one sample `[in_ch, h, w]` into `[in_ch * k * k, h * w]` with
/// zero padding.
fn im2col<T: Scalar>(src: &[T], in_ch: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..in_ch {
        let s = &src[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = span(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = span(w, dx);
                let row = &mut cols[((i * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    row[y * w + x0..y * w + x1]
                        .copy_from_slice(&s[sy * w + sx0..sy * w + sx0 + x1 - x0]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the sample.
fn col2im<T: Scalar>(cols: &[T], in_ch: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    dst.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..in_ch {
        let d = &mut dst[i * plane..(i + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - pad;
            let (y0, y1) = span(h, dy);
            for kx in 0..k {
                let dx = kx as isize - pad;
                let (x0, x1) = span(w, dx);
                let row = &cols[((i * k + ky) * k + kx) * plane..][..plane];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    for (a, &b) in d[sy * w + sx0..sy * w + sx0 + x1 - x0]
                        .iter_mut()
                        .zip(&row[y * w + x0..y * w + x1])
                    {
                        *a += b;
                    }
                }
            }
        }
    }
}

/// Same-padded convolution (cross-correlation), odd square kernel.
/// `weight` is laid out `[out][in][ky][kx]`.
pub fn conv_forward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    k: usize,
) -> Tensor4<T> {
    let [n, in_ch, h, w] = input.shape();
    let plane = h * w;
    let sample_in = in_ch * plane;
    let rows = in_ch * k * k;
    let mut out = Tensor4::zeros([n, out_ch, h, w]);
    out.data_mut()
        .par_chunks_mut(out_ch * plane)
        .enumerate()
        .for_each(|(b, dst)| {
            let src = &input.data()[b * sample_in..(b + 1) * sample_in];
            for (o, chunk) in dst.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias[o]);
            }
            if k == 1 {
                gemm(
                    out_ch,
                    rows,
                    plane,
                    weight,
                    false,
                    src,
                    false,
                    T::one(),
                    dst,
                );
            } else {
                let mut cols = vec![T::zero(); rows * plane];
                im2col(src, in_ch, h, w, k, &mut cols);
                gemm(
                    out_ch,
                    rows,
                    plane,
                    weight,
                    false,
                    &cols,
                    false,
                    T::one(),
                    dst,
                );
            }
        });
    out
}

pub struct ConvGrads<T> {
    pub input: Tensor4<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub fn conv_backward<T: Scalar>(
    input: &Tensor4<T>,
    weight: &[T],
    out_ch: usize,
    k: usize,
    grad_out: &Tensor4<T>,
) -> ConvGrads<T> {
    let [n, in_ch, h, w] = input.shape();
    let plane = h * w;
    let sample_in = in_ch * plane;
    let sample_out = out_ch * plane;
    let rows = in_ch * k * k;

    let mut grad_in = Tensor4::zeros(input.shape());
    let partial_w: Vec<Vec<T>> = grad_in
        .data_mut()
        .par_chunks_mut(sample_in)
        .enumerate()
        .map(|(b, dst)| {
            let src = &input.data()[b * sample_in..(b + 1) * sample_in];
            let g = &grad_out.data()[b * sample_out..(b + 1) * sample_out];
            let mut gw = vec![T::zero(); out_ch * rows];
            if k == 1 {
                gemm(out_ch, plane, rows, g, false, src, true, T::zero(), &mut gw);
                gemm(rows, out_ch, plane, weight, true, g, false, T::zero(), dst);
            } else {
                let mut cols = vec![T::zero(); rows * plane];
                im2col(src, in_ch, h, w, k, &mut cols);
                gemm(
                    out_ch,
                    plane,
                    rows,
                    g,
                    false,
                    &cols,
                    true,
                    T::zero(),
                    &mut gw,
                );
                gemm(
                    rows,
                    out_ch,
                    plane,
                    weight,
                    true,
                    g,
                    false,
                    T::zero(),
                    &mut cols,
                );
                col2im(&cols, in_ch, h, w, k, dst);
            }
            gw
        })
        .collect();

    let mut grad_w = vec![T::zero(); out_ch * rows];
    for gw in &partial_w {
        for (a, &b) in grad_w.iter_mut().zip(gw) {
            *a += b;
        }
    }
    let grad_b = (0..out_ch)
        .map(|o| {
            (0..n)
                .map(|b| grad_out.plane(b, o).iter().copied().sum::<T>())
                .sum::<T>()
        })
        .collect();

    ConvGrads {
        input: grad_in,
        weight: grad_w,
        bias: grad_b,
    }
}

/// Per-channel statistics over `(batch, height, width)`.
fn channel_stats<T: Scalar>(x: &Tensor4<T>) -> (Vec<f64>, Vec<f64>) {
    let [n, c, _, _] = x.shape();
    let count = (n * x.plane_len()) as f64;
    (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut sum = 0.0;
            for b in 0..n {
                sum += x.plane(b, ch).iter().map(|v| v.f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                sq += x
                    .plane(b, ch)
                    .iter()
                    .map(|v| (v.f64() - mean).powi(2))
                    .sum::<f64>();
            }
            (mean, sq / count)
        })
        .unzip()
}

pub struct BnCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    /// Batch mean and biased variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

/// Batch normalization. With `running = None` the batch statistics are used.
pub fn bn_forward<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running: Option<(&[T], &[T])>,
) -> (Tensor4<T>, BnCache<T>) {
    let [_, c, _, _] = x.shape();
    let (mean, var) = match running {
        Some((rm, rv)) => (
            rm.iter().map(|v| v.f64()).collect(),
            rv.iter().map(|v| v.f64()).collect(),
        ),
        None => channel_stats(x),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|v| T::of(1.0 / (v + BN_EPS).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::of(m)).collect();
    let plane = x.plane_len();
    let mut xhat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    xhat.data_mut()
        .par_chunks_mut(plane)
        .zip(y.data_mut().par_chunks_mut(plane))
        .enumerate()
        .for_each(|(idx, (xh, yy))| {
            let (b, ch) = (idx / c, idx % c);
            let src = x.plane(b, ch);
            for ((h, o), &v) in xh.iter_mut().zip(yy.iter_mut()).zip(src) {
                *h = (v - mean_t[ch]) * inv_std[ch];
                *o = gamma[ch] * *h + beta[ch];
            }
        });
    let (batch_mean, batch_var) = if running.is_none() {
        (mean, var)
    } else {
        (Vec::new(), Vec::new())
    };
    (
        y,
        BnCache {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

pub struct BnGrads<T> {
    pub input: Tensor4<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward of train-mode batch normalization.
pub fn bn_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    grad_out: &Tensor4<T>,
) -> BnGrads<T> {
    let [n, c, _, _] = grad_out.shape();
    let plane = grad_out.plane_len();
    let count = T::of((n * plane) as f64);
    let (g_gamma, g_beta): (Vec<T>, Vec<T>) = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut gg = T::zero();
            let mut gb = T::zero();
            for b in 0..n {
                for (&dy, &xh) in grad_out.plane(b, ch).iter().zip(cache.xhat.plane(b, ch)) {
                    gg += dy * xh;
                    gb += dy;
                }
            }
            (gg, gb)
        })
        .unzip();
    let mut grad_in = Tensor4::zeros(grad_out.shape());
    grad_in
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, ch) = (idx / c, idx % c);
            let scale = gamma[ch] * cache.inv_std[ch] / count;
            for ((d, &dy), &xh) in dst
                .iter_mut()
                .zip(grad_out.plane(b, ch))
                .zip(cache.xhat.plane(b, ch))
            {
                *d = scale * (count * dy - g_beta[ch] - xh * g_gamma[ch]);
            }
        });
    BnGrads {
        input: grad_in,
        gamma: g_gamma,
        beta: g_beta,
    }
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through ReLU given its output.
pub fn relu_backward<T: Scalar>(out: &Tensor4<T>, grad_out: &Tensor4<T>) -> Tensor4<T> {
    let data = out
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor4::from_vec(out.shape(), data).expect("same shape")
}

/// 2x2 max pooling; the cache holds the winning offset (0..4) per output.
pub fn maxpool_forward<T: Scalar>(x: &Tensor4<T>) -> (Tensor4<T>, Vec<u8>) {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, oh, ow]);
    let mut arg = vec![0u8; n * c * oh * ow];
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(arg.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(idx, (dst, am))| {
            let src = x.plane(idx / c, idx % c);
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = src[2 * y * w + 2 * xx];
                    let mut which = 0u8;
                    for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].iter().enumerate() {
                        let v = src[(2 * y + dy) * w + 2 * xx + dx];
                        if v > best {
                            best = v;
                            which = k as u8 + 1;
                        }
                    }
                    dst[y * ow + xx] = best;
                    am[y * ow + xx] = which;
                }
            }
        });
    (out, arg)
}

pub fn maxpool_backward<T: Scalar>(
    arg: &[u8],
    input_shape: [usize; 4],
    grad_out: &Tensor4<T>,
) -> Tensor4<T> {
    let [_, c, _, w] = input_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let mut grad_in = Tensor4::zeros(input_shape);
    let plane = input_shape[2] * w;
    grad_in
        .data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(idx, dst)| {
            let g = grad_out.plane(idx / c, idx % c);
            let am = &arg[idx * oh * ow..(idx + 1) * oh * ow];
            for y in 0..oh {
                for x in 0..ow {
                    let (dy, dx) = match am[y * ow + x] {
                        0 => (0, 0),
                        1 => (0, 1),
                        2 => (1, 0),
                        _ => (1, 1),
                    };
                    dst[(2 * y + dy) * w + 2 * x + dx] = g[y * ow + x];
                }
            }
        });
    grad_in
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor4::zeros([n, c, 2 * h, 2 * w]);
    out.data_mut()
        .par_chunks_mut(4 * h * w)
        .enumerate()
        .for_each(|(idx, dst)| {
            let src = x.plane(idx / c, idx % c);
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        });
    out
}

pub fn upsample_backward<T: Scalar>(grad_out: &Tensor4<T>) -> Tensor4<T> {
    let [n, c, h2, w2] = grad_out.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut grad_in = Tensor4::zeros([n, c, h, w]);
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, dst)| {
            let g = grad_out.plane(idx / c, idx % c);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = g[2 * y * w2 + 2 * x]
                        + g[2 * y * w2 + 2 * x + 1]
                        + g[(2 * y + 1) * w2 + 2 * x]
                        + g[(2 * y + 1) * w2 + 2 * x + 1];
                }
            }
        });
    grad_in
}

/// Channel concatenation `[a, b]`.
pub fn concat<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    debug_assert_eq!([n, h, w], [b.batch(), b.height(), b.width()]);
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for s in 0..n {
        for c in 0..ca {
            data.extend_from_slice(a.plane(s, c));
        }
        for c in 0..cb {
            data.extend_from_slice(b.plane(s, c));
        }
    }
    Tensor4::from_vec([n, ca + cb, h, w], data).expect("concat shape")
}

/// Inverse of [`concat`]: the first `ca` channels and the rest.
pub fn split<T: Scalar>(x: &Tensor4<T>, ca: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = x.shape();
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * h * w);
    let mut b = Vec::with_capacity(n * cb * h * w);
    for s in 0..n {
        for ch in 0..ca {
            a.extend_from_slice(x.plane(s, ch));
        }
        for ch in ca..c {
            b.extend_from_slice(x.plane(s, ch));
        }
    }
    (
        Tensor4::from_vec([n, ca, h, w], a).expect("split shape"),
        Tensor4::from_vec([n, cb, h, w], b).expect("split shape"),
    )
}

pub fn add<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Tensor4<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor4::from_vec(a.shape(), data).expect("same shape")
}

pub fn add_assign<T: Scalar>(a: &mut Tensor4<T>, b: &Tensor4<T>) {
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}
