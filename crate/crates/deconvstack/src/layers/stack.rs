//! Normalize-expand-concatenate: the feature stacking step.
//!
//! Each stacked source map is normalized to zero mean / unit variance per
//! `(sample, channel)` spatial plane, expanded to the stack resolution by
//! integer-ratio nearest-neighbor replication, and concatenated across the
//! channel dimension in source order. Normalization treats mean and
//! variance as functions of the input (full gradient, no stop-gradient).

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Per-plane zero-mean / unit-variance normalization: `(x - mean) / sqrt(var + eps)`.
///
/// A plane whose `var + eps` is exactly zero maps to zeros (the centered
/// numerator is identically zero there).
pub fn normalize_map(x: &Tensor4, eps: f64) -> Result<Tensor4> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::shape(format!("normalize eps {eps} must be finite and >= 0")));
    }
    let (means, vars) = x.reduce_mean_var_spatial();
    let (n, c, h, w) = x.dims();
    let cells = h * w;
    let mut out = vec![0.0; x.len()];
    for p in 0..n * c {
        let denom = (vars[p] + eps).sqrt();
        let scale = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        let mean = means[p];
        let src = &x.data()[p * cells..(p + 1) * cells];
        let dst = &mut out[p * cells..(p + 1) * cells];
        for (d, s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * scale;
        }
    }
    Tensor4::new(x.dims(), out)
}

/// Full gradient of [`normalize_map`] w.r.t. its input.
///
/// With `y = (x - mean)/sigma`, `sigma = sqrt(var + eps)` and `m` plane cells:
/// `dx = (dy - mean(dy) - y * mean(dy .* y)) / sigma`.
pub fn normalize_backward(x: &Tensor4, eps: f64, d_out: &Tensor4) -> Result<Tensor4> {
    if x.dims() != d_out.dims() {
        return Err(Error::shape(format!(
            "normalize backward dims {:?} vs {:?}",
            x.dims(),
            d_out.dims()
        )));
    }
    let y = normalize_map(x, eps)?;
    let (means, vars) = x.reduce_mean_var_spatial();
    let (n, c, h, w) = x.dims();
    let cells = h * w;
    let m = cells as f64;
    let mut out = vec![0.0; x.len()];
    for p in 0..n * c {
        let denom = (vars[p] + eps).sqrt();
        if denom == 0.0 {
            continue; // degenerate constant plane with eps == 0: gradient 0
        }
        let _ = means[p];
        let yp = &y.data()[p * cells..(p + 1) * cells];
        let dp = &d_out.data()[p * cells..(p + 1) * cells];
        let mean_d: f64 = dp.iter().sum::<f64>() / m;
        let mean_dy: f64 = dp.iter().zip(yp).map(|(d, y)| d * y).sum::<f64>() / m;
        let dst = &mut out[p * cells..(p + 1) * cells];
        for ((o, d), yv) in dst.iter_mut().zip(dp).zip(yp) {
            *o = (d - mean_d - yv * mean_dy) / denom;
        }
    }
    Tensor4::new(x.dims(), out)
}

fn expand_ratios(dims: Dims, target_h: usize, target_w: usize) -> Result<(usize, usize)> {
    let (_, _, h, w) = dims;
    if target_h % h != 0 || target_w % w != 0 {
        return Err(Error::shape(format!(
            "expand target {target_h}x{target_w} is not an integer multiple of {h}x{w}"
        )));
    }
    Ok((target_h / h, target_w / w))
}

/// Nearest-neighbor expansion: each cell becomes an `rh x rw` block.
pub fn expand_map(x: &Tensor4, target_h: usize, target_w: usize) -> Result<Tensor4> {
    let (rh, rw) = expand_ratios(x.dims(), target_h, target_w)?;
    if (rh, rw) == (1, 1) {
        return Ok(x.clone());
    }
    let (n, c, h, w) = x.dims();
    let mut out = vec![0.0; n * c * target_h * target_w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * target_h * target_w..(p + 1) * target_h * target_w];
        for ty in 0..target_h {
            let sy = ty / rh;
            let drow = &mut dst[ty * target_w..(ty + 1) * target_w];
            let srow = &src[sy * w..(sy + 1) * w];
            for (tx, d) in drow.iter_mut().enumerate() {
                *d = srow[tx / rw];
            }
        }
    }
    Tensor4::new((n, c, target_h, target_w), out)
}

/// Gradient of [`expand_map`]: sum `d_out` over each replicated block.
pub fn expand_backward(input_dims: Dims, d_out: &Tensor4) -> Result<Tensor4> {
    let (n, c, h, w) = input_dims;
    let (dn, dc, th, tw) = d_out.dims();
    if (dn, dc) != (n, c) {
        return Err(Error::shape(format!(
            "expand backward batch/channel mismatch: {:?} vs {:?}",
            (dn, dc),
            (n, c)
        )));
    }
    let (rh, rw) = expand_ratios(input_dims, th, tw)?;
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &d_out.data()[p * th * tw..(p + 1) * th * tw];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for ty in 0..th {
            let srow = &src[ty * tw..(ty + 1) * tw];
            let drow = &mut dst[(ty / rh) * w..(ty / rh + 1) * w];
            for (tx, s) in srow.iter().enumerate() {
                drow[tx / rw] += s;
            }
        }
    }
    Tensor4::new(input_dims, out)
}

/// Concatenate maps across the channel dimension in argument order.
pub fn concat_maps(maps: &[&Tensor4]) -> Result<Tensor4> {
    let first = maps.first().ok_or_else(|| Error::shape("concat of zero maps".to_string()))?;
    let (n, _, h, w) = first.dims();
    let mut total_c = 0;
    for m in maps {
        let (mn, mc, mh, mw) = m.dims();
        if (mn, mh, mw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat spatial/batch mismatch: {:?} vs (n={n}, h={h}, w={w})",
                m.dims()
            )));
        }
        total_c += mc;
    }
    let cells = h * w;
    let mut out = vec![0.0; n * total_c * cells];
    for ni in 0..n {
        let mut c_off = 0;
        for m in maps {
            let mc = m.c();
            let src = &m.data()[ni * mc * cells..(ni + 1) * mc * cells];
            let dst_start = (ni * total_c + c_off) * cells;
            out[dst_start..dst_start + mc * cells].copy_from_slice(src);
            c_off += mc;
        }
    }
    Tensor4::new((n, total_c, h, w), out)
}

/// Split a concatenated gradient back into per-source pieces.
pub fn split_channels(d: &Tensor4, channel_counts: &[usize]) -> Result<Vec<Tensor4>> {
    let (n, c, h, w) = d.dims();
    let total: usize = channel_counts.iter().sum();
    if total != c {
        return Err(Error::shape(format!(
            "split channel counts sum to {total} but tensor has {c}"
        )));
    }
    let cells = h * w;
    let mut pieces = Vec::with_capacity(channel_counts.len());
    let mut c_off = 0;
    for &mc in channel_counts {
        let mut out = vec![0.0; n * mc * cells];
        for ni in 0..n {
            let src_start = (ni * c + c_off) * cells;
            out[ni * mc * cells..(ni + 1) * mc * cells]
                .copy_from_slice(&d.data()[src_start..src_start + mc * cells]);
        }
        pieces.push(Tensor4::new((n, mc, h, w), out)?);
        c_off += mc;
    }
    Ok(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference;
    use crate::tensor::SeededRng;

    #[test]
    fn normalize_constant_plane_is_zero() {
        let x = Tensor4::fill((1, 2, 3, 3), 4.2).unwrap();
        let y = normalize_map(&x, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalize_hand_case() {
        let x = Tensor4::new((1, 1, 2, 2), vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        let y = normalize_map(&x, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn normalize_output_statistics() {
        let mut rng = SeededRng::new(30);
        let x = Tensor4::uniform(&mut rng, (2, 3, 8, 8), -4.0, 9.0).unwrap();
        let y = normalize_map(&x, 0.0).unwrap();
        let (means, vars) = y.reduce_mean_var_spatial();
        for p in 0..6 {
            assert!(means[p].abs() < 1e-12);
            assert!((vars[p] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_backward_matches_fd() {
        let mut rng = SeededRng::new(31);
        let x = Tensor4::uniform(&mut rng, (2, 2, 4, 4), -1.0, 1.0).unwrap();
        let proj = Tensor4::uniform(&mut rng, (2, 2, 4, 4), -1.0, 1.0).unwrap();
        let dx = normalize_backward(&x, 1e-5, &proj).unwrap();
        let fd = reference::fd_grad(x.data(), 1e-6, |vals| {
            normalize_map(&Tensor4::new(x.dims(), vals.to_vec()).unwrap(), 1e-5)
                .unwrap()
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(reference::max_rel_err(dx.data(), &fd) < 1e-5);
    }

    #[test]
    fn expand_replicates_blocks() {
        let x = Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = expand_map(&x, 4, 4).unwrap();
        assert_eq!(
            y.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn expand_ratio_one_is_identity() {
        let mut rng = SeededRng::new(32);
        let x = Tensor4::uniform(&mut rng, (1, 2, 3, 5), -1.0, 1.0).unwrap();
        assert_eq!(expand_map(&x, 3, 5).unwrap(), x);
    }

    #[test]
    fn expand_rejects_non_integer_ratio() {
        let x = Tensor4::zeros((1, 1, 3, 3)).unwrap();
        assert!(matches!(expand_map(&x, 4, 6), Err(Error::Shape(_))));
    }

    #[test]
    fn expand_ratio_eight_geometry() {
        // A 10x10 top-layer map expanded onto an 80x80 stack resolution uses
        // ratio 8 in both axes.
        let mut rng = SeededRng::new(33);
        let x = Tensor4::uniform(&mut rng, (1, 2, 10, 10), 0.0, 1.0).unwrap();
        let y = expand_map(&x, 80, 80).unwrap();
        assert_eq!(y.dims(), (1, 2, 80, 80));
        for ty in 0..80 {
            for tx in 0..80 {
                assert_eq!(y.get(0, 1, ty, tx), x.get(0, 1, ty / 8, tx / 8));
            }
        }
    }

    #[test]
    fn expand_backward_matches_fd() {
        let mut rng = SeededRng::new(34);
        let x = Tensor4::uniform(&mut rng, (1, 2, 3, 3), -1.0, 1.0).unwrap();
        let proj = Tensor4::uniform(&mut rng, (1, 2, 6, 9), -1.0, 1.0).unwrap();
        let dx = expand_backward(x.dims(), &proj).unwrap();
        let fd = reference::fd_grad(x.data(), 1e-6, |vals| {
            expand_map(&Tensor4::new(x.dims(), vals.to_vec()).unwrap(), 6, 9)
                .unwrap()
                .data()
                .iter()
                .zip(proj.data())
                .map(|(a, b)| a * b)
                .sum()
        });
        assert!(reference::max_rel_err(dx.data(), &fd) < 1e-6);
    }

    #[test]
    fn concat_sums_channels_in_order() {
        let a = Tensor4::fill((1, 2, 2, 2), 1.0).unwrap();
        let b = Tensor4::fill((1, 3, 2, 2), 2.0).unwrap();
        let y = concat_maps(&[&a, &b]).unwrap();
        assert_eq!(y.dims(), (1, 5, 2, 2));
        assert!(y.plane(0, 1).iter().all(|v| *v == 1.0));
        assert!(y.plane(0, 2).iter().all(|v| *v == 2.0));
        // every input value lands at a predictable channel offset
        assert_eq!(y.get(0, 2 + 1, 1, 1), b.get(0, 1, 1, 1));
    }

    #[test]
    fn concat_single_is_identity_and_mismatch_rejected() {
        let a = Tensor4::fill((1, 2, 2, 2), 3.0).unwrap();
        assert_eq!(concat_maps(&[&a]).unwrap(), a);
        let bad = Tensor4::zeros((1, 1, 3, 2)).unwrap();
        assert!(matches!(concat_maps(&[&a, &bad]), Err(Error::Shape(_))));
    }

    #[test]
    fn split_inverts_concat() {
        let mut rng = SeededRng::new(35);
        let a = Tensor4::uniform(&mut rng, (2, 2, 3, 3), -1.0, 1.0).unwrap();
        let b = Tensor4::uniform(&mut rng, (2, 4, 3, 3), -1.0, 1.0).unwrap();
        let c = Tensor4::uniform(&mut rng, (2, 1, 3, 3), -1.0, 1.0).unwrap();
        let y = concat_maps(&[&a, &b, &c]).unwrap();
        let parts = split_channels(&y, &[2, 4, 1]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert_eq!(parts[2], c);
    }
}
