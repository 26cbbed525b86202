//! Tied parameter store and the binary checkpoint format.
//!
//! A deconvolution kernel has no storage of its own: reading it applies the
//! tie transform to the partner convolution's buffer, so partner mutations
//! are immediately visible. Deconvolution biases are independent entries.
//! After a backward pass the partner's kernel gradient is the sum of the
//! conv-path gradient and the tie-transformed deconv-path gradient.
//!
//! Checkpoint layout (all little-endian):
//! `"DSTK"` magic, `u16` format version, `u32` record count, then per record
//! `{u16 name length, utf-8 name, 4 x u32 dims, f64 payload}`. Tied views
//! are never serialized; they are recomputed from their partners.

use crate::error::{Error, Result};
use crate::layers::{tie_transform_kernel, ConvWeight};
use crate::tensor::Dims;
use indexmap::IndexMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSTK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Tie registration: a deconvolution kernel name mapped to its partner.
#[derive(Debug, Clone, PartialEq)]
pub struct Tie {
    pub partner: String,
    pub flip: bool,
}

/// Independent kernel+bias parameter with gradient accumulators.
#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub weight: ConvWeight,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

/// Independent bias-only parameter (deconvolution biases).
#[derive(Debug, Clone)]
pub struct BiasEntry {
    pub bias: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Registry of learnable parameters with tie bookkeeping.
#[derive(Debug, Clone, Default)]
pub struct TiedParamStore {
    params: IndexMap<String, ParamEntry>,
    deconv_biases: IndexMap<String, BiasEntry>,
    ties: IndexMap<String, Tie>,
    grads_ready: bool,
}

impl TiedParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: &str, weight: ConvWeight) {
        let grad_w = vec![0.0; weight.data().len()];
        let grad_b = vec![0.0; weight.bias().len()];
        self.params.insert(name.to_string(), ParamEntry { weight, grad_w, grad_b });
    }

    pub fn insert_deconv_bias(&mut self, name: &str, len: usize) {
        self.deconv_biases
            .insert(name.to_string(), BiasEntry { bias: vec![0.0; len], grad: vec![0.0; len] });
    }

    pub fn register_tie(&mut self, deconv_name: &str, partner: &str, flip: bool) -> Result<()> {
        if !self.params.contains_key(partner) {
            return Err(Error::config(format!(
                "tie for {deconv_name} names unknown partner {partner}"
            )));
        }
        if !self.deconv_biases.contains_key(deconv_name) {
            return Err(Error::config(format!("tie {deconv_name} has no registered bias entry")));
        }
        self.ties.insert(deconv_name.to_string(), Tie { partner: partner.to_string(), flip });
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&ParamEntry> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.params.get_mut(name)
    }

    pub fn deconv_bias(&self, name: &str) -> Option<&BiasEntry> {
        self.deconv_biases.get(name)
    }

    pub fn deconv_bias_mut(&mut self, name: &str) -> Option<&mut BiasEntry> {
        self.deconv_biases.get_mut(name)
    }

    pub fn tie(&self, deconv_name: &str) -> Option<&Tie> {
        self.ties.get(deconv_name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn deconv_bias_names(&self) -> impl Iterator<Item = &String> {
        self.deconv_biases.keys()
    }

    /// Materialize the tied kernel view for a registered deconvolution:
    /// the partner kernel with channel axes swapped (and rotated 180 degrees
    /// under the adjoint reading), carrying the deconvolution's own bias.
    pub fn make_tied_view(&self, deconv_name: &str) -> Result<ConvWeight> {
        let tie = self
            .ties
            .get(deconv_name)
            .ok_or_else(|| Error::config(format!("no tie registered for {deconv_name}")))?;
        let partner = self
            .params
            .get(&tie.partner)
            .ok_or_else(|| Error::config(format!("tie partner {} missing", tie.partner)))?;
        let bias = self
            .deconv_biases
            .get(deconv_name)
            .ok_or_else(|| Error::config(format!("no bias entry for {deconv_name}")))?;
        partner.weight.tied_view(tie.flip, bias.bias.clone())
    }

    pub fn accumulate_param_grad(&mut self, name: &str, dw: Option<&[f64]>, db: Option<&[f64]>) -> Result<()> {
        let entry = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::state(format!("unknown parameter {name}")))?;
        if let Some(dw) = dw {
            for (a, b) in entry.grad_w.iter_mut().zip(dw) {
                *a += b;
            }
        }
        if let Some(db) = db {
            for (a, b) in entry.grad_b.iter_mut().zip(db) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Route a view-frame kernel gradient back to the shared partner kernel.
    pub fn accumulate_tied_grad(&mut self, deconv_name: &str, dw_view: &[f64]) -> Result<()> {
        let tie = self
            .ties
            .get(deconv_name)
            .cloned()
            .ok_or_else(|| Error::config(format!("no tie registered for {deconv_name}")))?;
        let partner = self
            .params
            .get_mut(&tie.partner)
            .ok_or_else(|| Error::config(format!("tie partner {} missing", tie.partner)))?;
        let (out_c, in_c, kh, kw) = partner.weight.kernel_dims();
        // dw_view is in (in_c, out_c, kh, kw) order; the transform is its own
        // inverse, so applying it again lands in the partner frame.
        let mapped = tie_transform_kernel(dw_view, in_c, out_c, kh, kw, tie.flip);
        for (a, b) in partner.grad_w.iter_mut().zip(&mapped) {
            *a += b;
        }
        Ok(())
    }

    pub fn accumulate_deconv_bias_grad(&mut self, deconv_name: &str, db: &[f64]) -> Result<()> {
        let entry = self
            .deconv_biases
            .get_mut(deconv_name)
            .ok_or_else(|| Error::state(format!("unknown deconv bias {deconv_name}")))?;
        for (a, b) in entry.grad.iter_mut().zip(db) {
            *a += b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for entry in self.params.values_mut() {
            entry.grad_w.iter_mut().for_each(|v| *v = 0.0);
            entry.grad_b.iter_mut().for_each(|v| *v = 0.0);
        }
        for entry in self.deconv_biases.values_mut() {
            entry.grad.iter_mut().for_each(|v| *v = 0.0);
        }
        self.grads_ready = false;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn set_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    /// FNV-1a hash over every independent parameter byte, for determinism
    /// and no-op checks in tests.
    pub fn data_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, entry) in &self.params {
            eat(name.as_bytes());
            for v in entry.weight.data() {
                eat(&v.to_le_bytes());
            }
            for v in entry.weight.bias() {
                eat(&v.to_le_bytes());
            }
        }
        for (name, entry) in &self.deconv_biases {
            eat(name.as_bytes());
            for v in &entry.bias {
                eat(&v.to_le_bytes());
            }
        }
        h
    }

    fn records(&self) -> Vec<(String, Dims, Vec<f64>)> {
        let mut out = Vec::new();
        for (name, entry) in &self.params {
            out.push((name.clone(), entry.weight.kernel_dims(), entry.weight.data().to_vec()));
            out.push((
                format!("{name}.bias"),
                (entry.weight.bias().len(), 1, 1, 1),
                entry.weight.bias().to_vec(),
            ));
        }
        for (name, entry) in &self.deconv_biases {
            out.push((format!("{name}.bias"), (entry.bias.len(), 1, 1, 1), entry.bias.clone()));
        }
        out
    }

    /// Serialize every independent parameter. Byte-for-byte deterministic
    /// given identical parameter values.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let records = self.records();
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, dims, data) in &records {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u16).to_le_bytes())?;
            w.write_all(bytes)?;
            for d in [dims.0, dims.1, dims.2, dims.3] {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Copy matching checkpoint records into this store by name, skipping
    /// records whose dims differ (the head changes shape between stages and
    /// keeps its fresh initialization in that case).
    pub fn restore(&mut self, ckpt: &CheckpointData) -> RestoreStats {
        let mut stats = RestoreStats::default();
        let names: Vec<String> = self.params.keys().cloned().collect();
        for name in names {
            let entry = self.params.get_mut(&name).unwrap();
            match ckpt.records.get(&name) {
                Some((dims, data)) if *dims == entry.weight.kernel_dims() => {
                    entry.weight.data_mut().copy_from_slice(data);
                    stats.restored += 1;
                }
                Some(_) => stats.shape_mismatch += 1,
                None => stats.fresh += 1,
            }
            let bias_name = format!("{name}.bias");
            match ckpt.records.get(&bias_name) {
                Some((dims, data)) if dims.0 == entry.weight.bias().len() => {
                    entry.weight.bias_mut().copy_from_slice(data);
                    stats.restored += 1;
                }
                Some(_) => stats.shape_mismatch += 1,
                None => stats.fresh += 1,
            }
        }
        let names: Vec<String> = self.deconv_biases.keys().cloned().collect();
        for name in names {
            let entry = self.deconv_biases.get_mut(&name).unwrap();
            match ckpt.records.get(&format!("{name}.bias")) {
                Some((dims, data)) if dims.0 == entry.bias.len() => {
                    entry.bias.copy_from_slice(data);
                    stats.restored += 1;
                }
                Some(_) => stats.shape_mismatch += 1,
                None => stats.fresh += 1,
            }
        }
        stats
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RestoreStats {
    pub restored: usize,
    pub fresh: usize,
    pub shape_mismatch: usize,
}

/// Raw checkpoint contents: record name to (dims, payload).
#[derive(Debug, Clone, Default)]
pub struct CheckpointData {
    pub records: IndexMap<String, (Dims, Vec<f64>)>,
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(format!("truncated while reading {what}: {e}"), at))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_at(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_at(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }
}

/// Parse a checkpoint file. Wrong magic, unsupported version, truncation and
/// non-finite payloads are format errors carrying the byte offset.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut r = CountingReader { inner: BufReader::new(std::fs::File::open(path)?), offset: 0 };
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected \"DSTK\""), 0));
    }
    let version = r.read_u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported format version {version}"), 4));
    }
    let count = r.read_u32("record count")?;
    let mut records = IndexMap::new();
    for i in 0..count {
        let name_at = r.offset;
        let name_len = r.read_u16(&format!("record {i} name length"))? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact_at(&mut name_bytes, &format!("record {i} name"))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(format!("record {i} name is not utf-8"), name_at))?;
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            *d = r.read_u32(&format!("record {name} dims"))? as usize;
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .filter(|l| *l <= (1 << 28))
            .ok_or_else(|| Error::format(format!("record {name} dims {dims:?} overflow"), name_at))?;
        let payload_at = r.offset;
        let mut data = vec![0.0f64; len];
        for (vi, v) in data.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            r.read_exact_at(&mut b, &format!("record {name} payload"))?;
            *v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(Error::format(
                    format!("record {name} has non-finite value at element {vi}"),
                    payload_at + 8 * vi as u64,
                ));
            }
        }
        records.insert(name, ((dims[0], dims[1], dims[2], dims[3]), data));
    }
    Ok(CheckpointData { records })
}
