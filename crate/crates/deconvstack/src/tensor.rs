//! Dense rank-4 tensors and the seeded RNG.
//!
//! `Tensor4` stores `f64` values contiguously in row-major `(n, c, h, w)`
//! order. That layout is load-bearing: the checkpoint format and the
//! im2col loops in [`crate::layers`] assume it. Every constructor validates
//! that no NaN/Inf sneaks into a tensor, so non-finite values surface as
//! errors at the operation that produced them instead of corrupting a
//! training run silently.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// `(n, c, h, w)` dimensions of a [`Tensor4`].
pub type Dims = (usize, usize, usize, usize);

/// Deterministic seeded RNG.
///
/// The stream cipher core (ChaCha8) is platform-stable; the float and range
/// draws are derived here from raw `u64`s so the sequence never depends on
/// distribution internals of a downstream crate. Identical seeds give
/// identical draw sequences on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Fair coin.
    pub fn coin(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Dense rank-4 tensor `(batch, channel, rows, cols)`, row-major `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn check_dims(dims: Dims) -> Result<()> {
    let (n, c, h, w) = dims;
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!("zero-sized dim in ({n}, {c}, {h}, {w})")));
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<()> {
    for (i, v) in data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::shape(format!("non-finite value {v} at flat index {i}")));
        }
    }
    Ok(())
}

impl Tensor4 {
    /// Build a tensor from raw data, validating length and finiteness.
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        check_dims(dims)?;
        let (n, c, h, w) = dims;
        let want = n * c * h * w;
        if data.len() != want {
            return Err(Error::shape(format!(
                "data length {} does not match dims ({n}, {c}, {h}, {w}) = {want}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn zeros(dims: Dims) -> Result<Self> {
        check_dims(dims)?;
        let (n, c, h, w) = dims;
        Ok(Tensor4 { n, c, h, w, data: vec![0.0; n * c * h * w] })
    }

    pub fn fill(dims: Dims, v: f64) -> Result<Self> {
        check_dims(dims)?;
        if !v.is_finite() {
            return Err(Error::shape(format!("fill value {v} is not finite")));
        }
        let (n, c, h, w) = dims;
        Ok(Tensor4 { n, c, h, w, data: vec![v; n * c * h * w] })
    }

    /// I.i.d. uniform draws in `[lo, hi)`.
    pub fn uniform(rng: &mut SeededRng, dims: Dims, lo: f64, hi: f64) -> Result<Self> {
        check_dims(dims)?;
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::shape(format!("bad uniform range [{lo}, {hi})")));
        }
        let (n, c, h, w) = dims;
        let data = (0..n * c * h * w).map(|_| rng.uniform(lo, hi)).collect();
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn dims(&self) -> Dims {
        (self.n, self.c, self.h, self.w)
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) -> Result<()> {
        if !v.is_finite() {
            return Err(Error::shape(format!("set value {v} is not finite")));
        }
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
        Ok(())
    }

    /// Contiguous `h*w` slice of one `(n, c)` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let start = (n * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    /// Copy of one batch element as a `(1, c, h, w)` tensor.
    pub fn batch_slice(&self, n: usize) -> Tensor4 {
        let per = self.c * self.h * self.w;
        Tensor4 {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    fn check_same_dims(&self, other: &Tensor4, op: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "{op}: dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn ew_add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_dims(other, "ew_add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Tensor4::new(self.dims(), data)
    }

    pub fn ew_sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_dims(other, "ew_sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Tensor4::new(self.dims(), data)
    }

    pub fn ew_mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_dims(other, "ew_mul")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Tensor4::new(self.dims(), data)
    }

    pub fn scale(&self, k: f64) -> Result<Tensor4> {
        if !k.is_finite() {
            return Err(Error::shape(format!("scale factor {k} is not finite")));
        }
        let data = self.data.iter().map(|a| a * k).collect();
        Tensor4::new(self.dims(), data)
    }

    /// Per-`(n, c)` mean and biased variance over the spatial plane.
    ///
    /// Returns two `n*c`-long grids indexed `n * c_count + c`.
    pub fn reduce_mean_var_spatial(&self) -> (Vec<f64>, Vec<f64>) {
        let m = (self.h * self.w) as f64;
        let mut means = Vec::with_capacity(self.n * self.c);
        let mut vars = Vec::with_capacity(self.n * self.c);
        for n in 0..self.n {
            for c in 0..self.c {
                let plane = self.plane(n, c);
                let mean = plane.iter().sum::<f64>() / m;
                let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                means.push(mean);
                vars.push(var);
            }
        }
        (means, vars)
    }
}
