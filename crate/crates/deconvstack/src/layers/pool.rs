//! Max-pooling with argmax switches, and the exact unpooling it enables.
//!
//! Windows must tile the plane exactly (window == stride, spatial dims
//! divisible by the stride); that is what makes "place every pooled value
//! back at its recorded argmax position, zeros elsewhere" well defined and
//! gives pool(unpool(p)) == p for non-negative p.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Per-output-cell argmax positions recorded by a pooling pass.
///
/// `argmax` holds, for each pooled cell in `(n, c, oh, ow)` order, the flat
/// row-major index of the maximum inside its window. Ties break to the first
/// occurrence so switches are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSwitches {
    input_dims: Dims,
    window: (usize, usize),
    stride: (usize, usize),
    argmax: Vec<u32>,
}

impl PoolSwitches {
    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }

    pub fn window(&self) -> (usize, usize) {
        self.window
    }

    pub fn stride(&self) -> (usize, usize) {
        self.stride
    }

    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }

    /// Dims of the pooled output these switches belong to.
    pub fn output_dims(&self) -> Dims {
        let (n, c, h, w) = self.input_dims;
        (n, c, h / self.stride.0, w / self.stride.1)
    }
}

fn check_pool_geometry(dims: Dims, window: (usize, usize), stride: (usize, usize)) -> Result<()> {
    let (_, _, h, w) = dims;
    let (kh, kw) = window;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(Error::shape("zero pooling window or stride".to_string()));
    }
    if (kh, kw) != (sh, sw) {
        return Err(Error::shape(format!(
            "pooling window {kh}x{kw} must equal stride {sh}x{sw} (non-overlapping tiling)"
        )));
    }
    if h % sh != 0 || w % sw != 0 {
        return Err(Error::shape(format!(
            "spatial dims {h}x{w} not divisible by pooling stride {sh}x{sw}"
        )));
    }
    Ok(())
}

/// Per-window max with switch recording.
pub fn maxpool_forward(
    x: &Tensor4,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor4, PoolSwitches)> {
    check_pool_geometry(x.dims(), window, stride)?;
    let (n, c, h, w) = x.dims();
    let (kh, kw) = window;
    let (oh, ow) = (h / stride.0, w / stride.1);
    let mut out = vec![0.0; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    let mut o = 0;
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.plane(ni, ci);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = 0u32;
                    for ky in 0..kh {
                        let row = (oy * stride.0 + ky) * w + ox * stride.1;
                        for kx in 0..kw {
                            let v = plane[row + kx];
                            if v > best {
                                best = v;
                                best_k = (ky * kw + kx) as u32;
                            }
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_k;
                    o += 1;
                }
            }
        }
    }
    let pooled = Tensor4::new((n, c, oh, ow), out)?;
    Ok((pooled, PoolSwitches { input_dims: x.dims(), window, stride, argmax }))
}

/// Place each pooled value at its recorded argmax position; everything else
/// is zero.
pub fn unpool_forward(p: &Tensor4, sw: &PoolSwitches) -> Result<Tensor4> {
    if p.dims() != sw.output_dims() {
        return Err(Error::shape(format!(
            "pooled dims {:?} do not match switches (expect {:?})",
            p.dims(),
            sw.output_dims()
        )));
    }
    let (n, c, h, w) = sw.input_dims;
    let (_, _, oh, ow) = p.dims();
    let (sh, swid) = sw.stride;
    let kw = sw.window.1;
    let mut out = vec![0.0; n * c * h * w];
    for (cell, (&v, &k)) in p.data().iter().zip(&sw.argmax).enumerate() {
        let ox = cell % ow;
        let oy = (cell / ow) % oh;
        let plane = cell / (oh * ow); // n*c + c index combined
        let ky = k as usize / kw;
        let kx = k as usize % kw;
        let y = oy * sh + ky;
        let x = ox * swid + kx;
        out[plane * h * w + y * w + x] = v;
    }
    Tensor4::new((n, c, h, w), out)
}

/// Gradient of max-pooling: route `d_out` back to the argmax positions.
/// This is exactly the unpooling placement.
pub fn maxpool_backward(sw: &PoolSwitches, d_out: &Tensor4) -> Result<Tensor4> {
    unpool_forward(d_out, sw)
}

/// Gradient of unpooling: gather `d_out` from the argmax positions.
pub fn unpool_backward(sw: &PoolSwitches, d_out: &Tensor4) -> Result<Tensor4> {
    if d_out.dims() != sw.input_dims {
        return Err(Error::shape(format!(
            "unpool d_out dims {:?} do not match switch input dims {:?}",
            d_out.dims(),
            sw.input_dims
        )));
    }
    let (_, _, h, w) = sw.input_dims;
    let (_, _, oh, ow) = sw.output_dims();
    let (sh, swid) = sw.stride;
    let kw = sw.window.1;
    let mut out = vec![0.0; sw.argmax.len()];
    for (cell, (dst, &k)) in out.iter_mut().zip(&sw.argmax).enumerate() {
        let ox = cell % ow;
        let oy = (cell / ow) % oh;
        let plane = cell / (oh * ow);
        let y = oy * sh + k as usize / kw;
        let x = ox * swid + k as usize % kw;
        *dst = d_out.data()[plane * h * w + y * w + x];
    }
    Tensor4::new(sw.output_dims(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    #[test]
    fn two_by_two_basics() {
        let x = Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(p.data(), &[4.0]);
        assert_eq!(sw.argmax(), &[3]);
    }

    #[test]
    fn ties_break_to_first_occurrence() {
        let x = Tensor4::fill((1, 1, 2, 2), 7.0).unwrap();
        let (p, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(p.data(), &[7.0]);
        assert_eq!(sw.argmax(), &[0]);
    }

    #[test]
    fn ramp_oracle() {
        let x = Tensor4::new((1, 1, 4, 4), (0..16).map(|v| v as f64).collect()).unwrap();
        let (p, _) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        assert_eq!(p.data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn geometry_errors() {
        let x = Tensor4::zeros((1, 1, 5, 4)).unwrap();
        assert!(maxpool_forward(&x, (2, 2), (2, 2)).is_err());
        let x = Tensor4::zeros((1, 1, 4, 4)).unwrap();
        assert!(maxpool_forward(&x, (3, 3), (2, 2)).is_err());
    }

    #[test]
    fn unpool_places_at_argmax() {
        let x = Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        let up = unpool_forward(&p, &sw).unwrap();
        assert_eq!(up.data(), &[0.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn unpool_of_zeros_is_zeros() {
        let x = Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        let z = Tensor4::zeros((1, 1, 1, 1)).unwrap();
        assert!(unpool_forward(&z, &sw).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pool_unpool_roundtrip_and_sparsity() {
        let mut rng = SeededRng::new(21);
        for _ in 0..50 {
            let x = Tensor4::uniform(&mut rng, (2, 3, 8, 6), -1.0, 1.0).unwrap();
            let (p0, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
            // Non-negative pooled values, as after a ReLU.
            let p = Tensor4::new(p0.dims(), p0.data().iter().map(|v| v.abs()).collect()).unwrap();
            let up = unpool_forward(&p, &sw).unwrap();
            let (p2, _) = maxpool_forward(&up, (2, 2), (2, 2)).unwrap();
            assert_eq!(p2.data(), p.data());
            // At most one nonzero per window.
            let (n, c, h, w) = up.dims();
            for ni in 0..n {
                for ci in 0..c {
                    for oy in 0..h / 2 {
                        for ox in 0..w / 2 {
                            let mut nz = 0;
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    if up.get(ni, ci, oy * 2 + ky, ox * 2 + kx) != 0.0 {
                                        nz += 1;
                                    }
                                }
                            }
                            assert!(nz <= 1);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn switch_shape_mismatch_rejected() {
        let x = Tensor4::zeros((1, 1, 4, 4)).unwrap();
        let (_, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        let bad = Tensor4::zeros((1, 1, 4, 4)).unwrap();
        assert!(matches!(unpool_forward(&bad, &sw), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_routes_through_switches() {
        let x = Tensor4::new((1, 1, 2, 2), vec![1.0, 9.0, 3.0, 4.0]).unwrap();
        let (_, sw) = maxpool_forward(&x, (2, 2), (2, 2)).unwrap();
        let d = Tensor4::new((1, 1, 1, 1), vec![5.0]).unwrap();
        let dx = maxpool_backward(&sw, &d).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0, 0.0, 0.0]);
        let d_up = Tensor4::new((1, 1, 2, 2), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let dp = unpool_backward(&sw, &d_up).unwrap();
        assert_eq!(dp.data(), &[0.2]);
    }
}
