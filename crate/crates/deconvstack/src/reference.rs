//! Slow, independent oracle implementations.
//!
//! Everything here is deliberately written as plain scalar loops with no
//! shared code paths with the optimized implementations it checks. Test
//! suites and the `gradient_check` example compare against these.

use crate::layers::ConvWeight;
use crate::tensor::Tensor4;

/// Naive six-loop stride-1 same-padding convolution.
pub fn naive_conv_forward(x: &Tensor4, w: &ConvWeight) -> Tensor4 {
    assert_eq!(x.c(), w.in_c(), "channel mismatch");
    let (n, _, h, w_) = x.dims();
    let (kh, kw) = (w.kh(), w.kw());
    let (ph, pw) = (kh as isize / 2, kw as isize / 2);
    let mut out = Tensor4::zeros((n, w.out_c(), h, w_)).unwrap();
    for ni in 0..n {
        for o in 0..w.out_c() {
            for y in 0..h {
                for xx in 0..w_ {
                    let mut acc = w.bias()[o];
                    for i in 0..w.in_c() {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - ph;
                                let sx = xx as isize + kx as isize - pw;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w_ as isize {
                                    acc += x.get(ni, i, sy as usize, sx as usize) * w.at(o, i, ky, kx);
                                }
                            }
                        }
                    }
                    out.set(ni, o, y, xx, acc).unwrap();
                }
            }
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`, one entry at a time.
pub fn fd_grad(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Relative error with an absolute floor so near-zero pairs do not blow up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error over two gradient vectors.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

/// Direct, shift-free evaluation of per-map log-sum-exp pooling. Valid as
/// long as `s * max(a)` stays below the f64 overflow threshold; used as the
/// second algebraic route for the stabilized implementation.
pub fn naive_lse_pool(a: &Tensor4, s: f64) -> Vec<f64> {
    let (n, c, h, w) = a.dims();
    let m = (h * w) as f64;
    let mut out = Vec::with_capacity(n * c);
    for ni in 0..n {
        for ci in 0..c {
            let sum: f64 = a.plane(ni, ci).iter().map(|v| (s * v).exp()).sum();
            out.push((sum / m).ln() / s);
        }
    }
    out
}
