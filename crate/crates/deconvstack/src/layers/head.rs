//! Class-map head, channel softmax and global log-sum-exp pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

use super::conv::{conv_forward, ConvWeight};

/// Class-specific activation maps: a plain convolution with `K = w_m.out_c()`
/// filters and no nonlinearity. The task head applies channel softmax
/// (multi-label) or elementwise ReLU (binary) afterwards.
pub fn classmap_forward(f: &Tensor4, w_m: &ConvWeight) -> Result<Tensor4> {
    conv_forward(f, w_m)
}

/// Softmax across the channel dimension at every pixel, max-shifted for
/// stability. Requires at least two channels.
pub fn channel_softmax(x: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = x.dims();
    if c < 2 {
        return Err(Error::shape(format!("channel softmax needs >= 2 channels, got {c}")));
    }
    let cells = h * w;
    let mut out = vec![0.0; x.len()];
    for ni in 0..n {
        let base = ni * c * cells;
        for j in 0..cells {
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(x.data()[base + ci * cells + j]);
            }
            let mut sum = 0.0;
            for ci in 0..c {
                let e = (x.data()[base + ci * cells + j] - max).exp();
                out[base + ci * cells + j] = e;
                sum += e;
            }
            for ci in 0..c {
                out[base + ci * cells + j] /= sum;
            }
        }
    }
    Tensor4::new(x.dims(), out)
}

/// Gradient of [`channel_softmax`] given its *output* `y`:
/// `d_in_c = y_c * (d_c - sum_k d_k * y_k)` per pixel.
pub fn channel_softmax_backward(y: &Tensor4, d_out: &Tensor4) -> Result<Tensor4> {
    if y.dims() != d_out.dims() {
        return Err(Error::shape(format!(
            "softmax backward dims {:?} vs {:?}",
            y.dims(),
            d_out.dims()
        )));
    }
    let (n, c, h, w) = y.dims();
    let cells = h * w;
    let mut out = vec![0.0; y.len()];
    for ni in 0..n {
        let base = ni * c * cells;
        for j in 0..cells {
            let mut dot = 0.0;
            for ci in 0..c {
                dot += d_out.data()[base + ci * cells + j] * y.data()[base + ci * cells + j];
            }
            for ci in 0..c {
                let idx = base + ci * cells + j;
                out[idx] = y.data()[idx] * (d_out.data()[idx] - dot);
            }
        }
    }
    Tensor4::new(y.dims(), out)
}

/// Global per-map log-sum-exp pooling:
/// `y[n,c] = (1/s) * log( sum_ij exp(s * a[n,c,i,j]) / (H*W) )`,
/// evaluated max-shifted so `s * a` around 700 does not overflow.
/// Returns an `(n, c, 1, 1)` tensor.
pub fn lse_pool(a: &Tensor4, s: f64) -> Result<Tensor4> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::shape(format!("lse similarity s must be positive and finite, got {s}")));
    }
    let (n, c, h, w) = a.dims();
    let m = (h * w) as f64;
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let plane = a.plane(ni, ci);
            let max = plane.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
            let sum: f64 = plane.iter().map(|v| (s * (v - max)).exp()).sum();
            out.push(max + (sum / m).ln() / s);
        }
    }
    Tensor4::new((n, c, 1, 1), out)
}

/// Gradient of [`lse_pool`]: `d_a[n,c,i,j] = d_y[n,c] * softmax_ij(s * a)`,
/// the softmax-weighted responsibility of each activation.
pub fn lse_pool_backward(a: &Tensor4, s: f64, d_y: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = a.dims();
    if d_y.dims() != (n, c, 1, 1) {
        return Err(Error::shape(format!(
            "lse backward d_y dims {:?}, expected ({n}, {c}, 1, 1)",
            d_y.dims()
        )));
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::shape(format!("lse similarity s must be positive and finite, got {s}")));
    }
    let cells = h * w;
    let mut out = vec![0.0; a.len()];
    for p in 0..n * c {
        let plane = &a.data()[p * cells..(p + 1) * cells];
        let max = plane.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(*v));
        let mut sum = 0.0;
        let dst = &mut out[p * cells..(p + 1) * cells];
        for (d, v) in dst.iter_mut().zip(plane) {
            let e = (s * (v - max)).exp();
            *d = e;
            sum += e;
        }
        let g = d_y.data()[p] / sum;
        for d in dst.iter_mut() {
            *d *= g;
        }
    }
    Tensor4::new(a.dims(), out)
}
