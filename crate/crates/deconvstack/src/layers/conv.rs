//! Convolution and tied deconvolution, forward and backward.
//!
//! All convolutions here are stride-1 with symmetric "same" zero padding
//! of `(kh-1)/2, (kw-1)/2` (kernel sides are validated odd), so spatial
//! dimensions are preserved end to end. The forward path is im2col plus a
//! small hand-rolled matmul; the accumulation order matches the naive
//! six-loop oracle in [`crate::reference`] so the two routes agree to
//! floating-point noise.
//!
//! A deconvolution layer is the same correlation applied to a *tied view*
//! of its partner convolution kernel: channel axes swapped and, in the
//! adjoint reading, the spatial kernel rotated 180 degrees. With that view
//! the deconvolution is exactly the linear adjoint of the partner
//! convolution. The view transform is an involution, which is also what
//! maps view-frame weight gradients back onto the shared parameter.

use crate::error::{Error, Result};
use crate::tensor::{Dims, SeededRng, Tensor4};
use rayon::prelude::*;

/// Convolution kernel `(out_c, in_c, kh, kw)` with a per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeight {
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    data: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvWeight {
    pub fn new(
        out_c: usize,
        in_c: usize,
        kh: usize,
        kw: usize,
        data: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_c == 0 || in_c == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape(format!("zero-sized kernel dim ({out_c}, {in_c}, {kh}, {kw})")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!(
                "kernel sides must be odd for symmetric same-padding, got {kh}x{kw}"
            )));
        }
        if data.len() != out_c * in_c * kh * kw {
            return Err(Error::shape(format!(
                "kernel data length {} does not match ({out_c}, {in_c}, {kh}, {kw})",
                data.len()
            )));
        }
        if bias.len() != out_c {
            return Err(Error::shape(format!(
                "bias length {} does not match out_c {out_c}",
                bias.len()
            )));
        }
        if data.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::shape("non-finite value in kernel or bias".to_string()));
        }
        Ok(ConvWeight { out_c, in_c, kh, kw, data, bias })
    }

    pub fn zeros(out_c: usize, in_c: usize, kh: usize, kw: usize) -> Result<Self> {
        ConvWeight::new(out_c, in_c, kh, kw, vec![0.0; out_c * in_c * kh * kw], vec![0.0; out_c])
    }

    /// Uniform init in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`,
    /// bias zero.
    pub fn glorot(rng: &mut SeededRng, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Result<Self> {
        let fan_in = (in_c * kh * kw) as f64;
        let fan_out = (out_c * kh * kw) as f64;
        let a = (6.0 / (fan_in + fan_out)).sqrt();
        let data = (0..out_c * in_c * kh * kw).map(|_| rng.uniform(-a, a)).collect();
        ConvWeight::new(out_c, in_c, kh, kw, data, vec![0.0; out_c])
    }

    pub fn out_c(&self) -> usize {
        self.out_c
    }
    pub fn in_c(&self) -> usize {
        self.in_c
    }
    pub fn kh(&self) -> usize {
        self.kh
    }
    pub fn kw(&self) -> usize {
        self.kw
    }
    pub fn kernel_dims(&self) -> Dims {
        (self.out_c, self.in_c, self.kh, self.kw)
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn bias(&self) -> &[f64] {
        &self.bias
    }
    /// Mutable kernel buffer. Callers own the finiteness invariant; the
    /// optimizer re-validates after every update.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Mutable bias buffer; same contract as [`ConvWeight::data_mut`].
    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    #[inline]
    pub fn kernel_idx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_c + i) * self.kh + ky) * self.kw + kx
    }

    #[inline]
    pub fn at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[self.kernel_idx(o, i, ky, kx)]
    }

    /// Tied view of this kernel with the given bias: channel axes swapped,
    /// spatial kernel rotated 180 degrees when `flip` is set (the adjoint).
    /// The view is materialized on read, so partner mutations are always
    /// visible through a fresh view.
    pub fn tied_view(&self, flip: bool, bias: Vec<f64>) -> Result<ConvWeight> {
        let data = tie_transform_kernel(&self.data, self.out_c, self.in_c, self.kh, self.kw, flip);
        ConvWeight::new(self.in_c, self.out_c, self.kh, self.kw, data, bias)
    }
}

/// Map a `(out_c, in_c, kh, kw)` kernel buffer onto its `(in_c, out_c, kh, kw)`
/// tied-view buffer. The transform is an involution: applying it twice (with
/// the swapped dims in between) returns the original buffer, which is also how
/// view-frame gradients are routed back to the stored partner kernel.
pub fn tie_transform_kernel(
    data: &[f64],
    out_c: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    flip: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for o in 0..out_c {
        for i in 0..in_c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let (sy, sx) = if flip { (kh - 1 - ky, kw - 1 - kx) } else { (ky, kx) };
                    let src = ((o * in_c + i) * kh + sy) * kw + sx;
                    let dst = ((i * out_c + o) * kh + ky) * kw + kx;
                    out[dst] = data[src];
                }
            }
        }
    }
    out
}

/// Gradients of one layer: input gradient plus, for parameterized layers,
/// weight and bias gradients in the layer's own kernel frame.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_input: Tensor4,
    pub d_weight: Option<Vec<f64>>,
    pub d_bias: Option<Vec<f64>>,
}

fn check_conv_shapes(x: &Tensor4, w: &ConvWeight) -> Result<()> {
    if x.c() != w.in_c {
        return Err(Error::shape(format!(
            "input channels {} do not match kernel in_c {}",
            x.c(),
            w.in_c
        )));
    }
    Ok(())
}

/// Fill the im2col buffer for one sample: `col[k][j]` holds the padded
/// input value feeding output pixel `j = y*w + x` through kernel offset
/// `k = (c*kh + ky)*kw + kx`.
fn im2col_sample(x: &Tensor4, n: usize, kh: usize, kw: usize, col: &mut [f64]) {
    let (_, c, h, w) = x.dims();
    let (ph, pw) = (kh / 2, kw / 2);
    let cells = h * w;
    for ci in 0..c {
        let plane = x.plane(n, ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let k = (ci * kh + ky) * kw + kx;
                let row = &mut col[k * cells..(k + 1) * cells];
                // source x = dst x + kx - pw, valid for dst x in [x_lo, x_hi)
                let x_lo = pw.saturating_sub(kx);
                let x_hi = (w + pw).saturating_sub(kx).min(w);
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_base = sy as usize * w;
                    dst[..x_lo].fill(0.0);
                    let off = x_lo + kx - pw;
                    dst[x_lo..x_hi].copy_from_slice(&plane[src_base + off..src_base + off + (x_hi - x_lo)]);
                    dst[x_hi..].fill(0.0);
                }
            }
        }
    }
}

/// Stride-1 same-padding convolution: `out[n,o] = bias[o] + sum_i x[n,i] * w[o,i]`.
pub fn conv_forward(x: &Tensor4, w: &ConvWeight) -> Result<Tensor4> {
    check_conv_shapes(x, w)?;
    let (n, _, h, w_) = x.dims();
    let cells = h * w_;
    let k_len = w.in_c * w.kh * w.kw;
    let mut out = vec![0.0; n * w.out_c * cells];

    let run_sample = |ni: usize, out_n: &mut [f64], col: &mut Vec<f64>| {
        im2col_sample(x, ni, w.kh, w.kw, col);
        for o in 0..w.out_c {
            let out_row = &mut out_n[o * cells..(o + 1) * cells];
            out_row.fill(w.bias[o]);
            let w_row = &w.data[o * k_len..(o + 1) * k_len];
            for (k, &a) in w_row.iter().enumerate() {
                let col_row = &col[k * cells..(k + 1) * cells];
                for (dst, src) in out_row.iter_mut().zip(col_row) {
                    *dst += a * src;
                }
            }
        }
    };

    if n >= 2 {
        out.par_chunks_mut(w.out_c * cells).enumerate().for_each(|(ni, out_n)| {
            let mut col = vec![0.0; k_len * cells];
            run_sample(ni, out_n, &mut col);
        });
    } else {
        let mut col = vec![0.0; k_len * cells];
        run_sample(0, &mut out, &mut col);
    }

    Tensor4::new((n, w.out_c, h, w_), out)
}

fn check_dout(x: &Tensor4, w: &ConvWeight, d_out: &Tensor4) -> Result<()> {
    let want = (x.n(), w.out_c, x.h(), x.w());
    if d_out.dims() != want {
        return Err(Error::shape(format!(
            "d_out dims {:?} do not match conv output {:?}",
            d_out.dims(),
            want
        )));
    }
    Ok(())
}

/// Exact gradients of [`conv_forward`] w.r.t. input, kernel and bias.
pub fn conv_backward(x: &Tensor4, w: &ConvWeight, d_out: &Tensor4) -> Result<LayerGrad> {
    let (d_input, d_weight, d_bias) = conv_backward_parts(x, w, d_out, true, true)?;
    Ok(LayerGrad { d_input: d_input.expect("requested"), d_weight, d_bias })
}

/// Backward with selectable outputs so frozen layers can skip the weight
/// gradient and the bottom layer can skip the input gradient.
pub(crate) fn conv_backward_parts(
    x: &Tensor4,
    w: &ConvWeight,
    d_out: &Tensor4,
    need_input: bool,
    need_weight: bool,
) -> Result<(Option<Tensor4>, Option<Vec<f64>>, Option<Vec<f64>>)> {
    check_conv_shapes(x, w)?;
    check_dout(x, w, d_out)?;
    let (n, _, h, w_) = x.dims();
    let cells = h * w_;
    let k_len = w.in_c * w.kh * w.kw;

    let (d_weight, d_bias) = if need_weight {
        // Per-sample partials computed in parallel, reduced in batch order so
        // the result is identical to the sequential loop.
        let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|ni| {
                let mut col = vec![0.0; k_len * cells];
                im2col_sample(x, ni, w.kh, w.kw, &mut col);
                let mut dw = vec![0.0; w.out_c * k_len];
                let mut db = vec![0.0; w.out_c];
                for o in 0..w.out_c {
                    let d_row = &d_out.data()[(ni * w.out_c + o) * cells..(ni * w.out_c + o + 1) * cells];
                    db[o] = d_row.iter().sum();
                    for k in 0..k_len {
                        let col_row = &col[k * cells..(k + 1) * cells];
                        let mut acc = 0.0;
                        for (a, b) in d_row.iter().zip(col_row) {
                            acc += a * b;
                        }
                        dw[o * k_len + k] = acc;
                    }
                }
                (dw, db)
            })
            .collect();
        let mut dw = vec![0.0; w.out_c * k_len];
        let mut db = vec![0.0; w.out_c];
        for (pw, pb) in &partials {
            for (a, b) in dw.iter_mut().zip(pw) {
                *a += b;
            }
            for (a, b) in db.iter_mut().zip(pb) {
                *a += b;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };

    let d_input = if need_input {
        // The input gradient is the adjoint correlation: swapped channel
        // axes, 180-degree-rotated kernel, zero bias.
        let w_adj = w.tied_view(true, vec![0.0; w.in_c])?;
        Some(conv_forward(d_out, &w_adj)?)
    } else {
        None
    };

    Ok((d_input, d_weight, d_bias))
}

/// Deconvolution forward: a stride-1 same-padding correlation with a tied
/// kernel view (see [`ConvWeight::tied_view`]) carrying the deconvolution's
/// own bias.
pub fn deconv_forward(x: &Tensor4, w_view: &ConvWeight) -> Result<Tensor4> {
    conv_forward(x, w_view)
}

/// Deconvolution backward. `d_weight` comes back in the *view* frame; route
/// it to the shared parameter by applying the same tie transform again
/// (see [`tie_transform_kernel`]).
pub fn deconv_backward(x: &Tensor4, w_view: &ConvWeight, d_out: &Tensor4) -> Result<LayerGrad> {
    conv_backward(x, w_view, d_out)
}
