//! Datasets: synthetic shape generation, image/mask/label I/O, label
//! vectors and augmentation.
//!
//! A dataset directory holds `images/<id>.pgm` (or `.ppm` for 3-channel),
//! `masks/<id>.pgm` (class index as gray value, 0 = background),
//! `labels.csv` (one line per sample: id, comma-joined foreground class
//! indices) and `spec.json` when the set was generated here.
//!
//! Training never needs the masks: loaders only read `masks/` when
//! explicitly asked (evaluation), so a dataset with the masks directory
//! deleted still trains.

mod pnm;

pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pnm, PnmKind, RawPnm};

use crate::error::{Error, Result};
use crate::model::TaskKind;
use crate::tensor::{SeededRng, Tensor4};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

/// Per-pixel class index grid (0 = background). Evaluation only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl MaskGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        MaskGrid { h, w, data: vec![0; h * w] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }
}

/// Image-level multi-hot label vector of length `K`.
///
/// Multi-label vectors carry the background convention: bit 0 is always set.
/// Binary vectors are one-hot over (normal, abnormal).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<u8>,
}

impl LabelVector {
    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn is_set(&self, class: usize) -> bool {
        self.bits[class] == 1
    }

    /// True when only the background bit is on (multi-label).
    pub fn is_pure_background(&self) -> bool {
        self.bits[0] == 1 && self.bits[1..].iter().all(|b| *b == 0)
    }

    /// Foreground class indices (1-based class ids as mask values).
    pub fn present_classes(&self) -> Vec<usize> {
        (1..self.bits.len()).filter(|c| self.bits[*c] == 1).collect()
    }
}

/// Build a label vector from present class indices.
///
/// Multi-label: multi-hot with the background bit forced on. Binary: one-hot
/// over exactly one present class (0 = normal, 1 = abnormal).
pub fn make_label_vector(present: &[usize], task: TaskKind, k: usize) -> Result<LabelVector> {
    for c in present {
        if *c >= k {
            return Err(Error::input(format!("class index {c} out of range for K = {k}")));
        }
    }
    match task {
        TaskKind::MultiLabel => {
            let mut bits = vec![0u8; k];
            bits[0] = 1;
            for c in present {
                bits[*c] = 1;
            }
            Ok(LabelVector { bits })
        }
        TaskKind::Binary => {
            if k != 2 {
                return Err(Error::input(format!("binary labels need K = 2, got {k}")));
            }
            match present {
                [c] => {
                    let mut bits = vec![0u8; 2];
                    bits[*c] = 1;
                    Ok(LabelVector { bits })
                }
                [] => Err(Error::input("binary label needs exactly one class, got none".to_string())),
                _ => Err(Error::input(format!(
                    "binary label needs exactly one class, got {}",
                    present.len()
                ))),
            }
        }
    }
}

/// Stack label vectors into an `(n, K, 1, 1)` target tensor for the losses.
pub fn targets_tensor(labels: &[&LabelVector]) -> Result<Tensor4> {
    let n = labels.len();
    let k = labels.first().map(|l| l.len()).ok_or_else(|| Error::input("no labels".to_string()))?;
    let mut data = Vec::with_capacity(n * k);
    for l in labels {
        if l.len() != k {
            return Err(Error::input(format!("label length {} != {k}", l.len())));
        }
        data.extend(l.bits().iter().map(|b| *b as f64));
    }
    Tensor4::new((n, k, 1, 1), data)
}

/// One dataset element. The mask is carried for evaluation only; training
/// code paths never read it.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// `(1, c, h, w)` image scaled to `[0, 1]`.
    pub image: Tensor4,
    pub label: LabelVector,
    pub mask: Option<MaskGrid>,
}

/// Foreground shape kinds, one per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl ShapeKind {
    fn covers(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dy * dy + dx * dx <= r * r,
            ShapeKind::Square => dy.abs() <= r && dx.abs() <= r,
            ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 > (r / 2.0) * (r / 2.0)
            }
        }
    }

    /// Analytic footprint area, used as a rasterization oracle in tests.
    pub fn area(self, r: f64) -> f64 {
        match self {
            ShapeKind::Disk => std::f64::consts::PI * r * r,
            ShapeKind::Square => (2.0 * r) * (2.0 * r),
            ShapeKind::Triangle => 2.0 * r * r,
            ShapeKind::Ring => std::f64::consts::PI * r * r * 0.75,
        }
    }
}

/// Synthetic dataset description (serialized as `spec.json`).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub image_size: (usize, usize),
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// One foreground shape per class; class index `i+1` in masks/labels.
    pub classes: Vec<ShapeKind>,
    pub objects_per_image: (usize, usize),
    /// Shape radius range in pixels.
    pub scale_range: (f64, f64),
    pub intensity_range: (f64, f64),
    #[serde(default = "default_background")]
    pub background_level: f64,
    pub noise_amp: f64,
    pub count: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}
fn default_background() -> f64 {
    0.12
}

const CLASS_TINTS: [(f64, f64, f64); 5] = [
    (1.0, 0.55, 0.25),
    (0.35, 1.0, 0.45),
    (0.45, 0.35, 1.0),
    (1.0, 1.0, 0.35),
    (0.35, 1.0, 1.0),
];

impl SynthSpec {
    pub fn from_json(json: &str) -> Result<Self> {
        let spec: SynthSpec =
            serde_json::from_str(json).map_err(|e| Error::config(format!("bad synth spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || self.count == 0 {
            return Err(Error::config("zero-sized synth spec".to_string()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config(format!("channels {} must be 1 or 3", self.channels)));
        }
        if self.classes.is_empty() {
            return Err(Error::config("no foreground classes".to_string()));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::config("objects_per_image range reversed".to_string()));
        }
        if !(self.scale_range.0 > 0.0) || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::config("bad scale range".to_string()));
        }
        let margin = 2 * (self.scale_range.1.ceil() as usize + 1);
        if margin + 1 >= h.min(w) {
            return Err(Error::config(format!(
                "shape radius up to {} does not fit a {h}x{w} image",
                self.scale_range.1
            )));
        }
        Ok(())
    }

    /// Class count including background.
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }
}

/// Deterministically rasterize `spec.count` samples. Masks record exact
/// shape footprints; labels are multi-hot with the background bit set.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let c = spec.channels;
    let k = spec.num_classes();
    let mut rng = SeededRng::new(spec.seed);
    let mut samples = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut image = vec![spec.background_level; c * h * w];
        let mut mask = MaskGrid::zeros(h, w);
        let (lo, hi) = spec.objects_per_image;
        let n_obj = lo + rng.below(hi - lo + 1);
        let mut present = BTreeSet::new();
        for _ in 0..n_obj {
            let class = rng.below(spec.classes.len());
            let r = rng.uniform(spec.scale_range.0, spec.scale_range.1);
            let margin = r.ceil() as usize + 1;
            let cy = margin + rng.below(h - 2 * margin);
            let cx = margin + rng.below(w - 2 * margin);
            let v = rng.uniform(spec.intensity_range.0, spec.intensity_range.1);
            let shape = spec.classes[class];
            let tint = CLASS_TINTS[class % CLASS_TINTS.len()];
            let reach = r.ceil() as isize + 1;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if shape.covers(dy as f64, dx as f64, r) {
                        let (y, x) = ((cy as isize + dy) as usize, (cx as isize + dx) as usize);
                        mask.set(y, x, (class + 1) as u8);
                        if c == 1 {
                            image[y * w + x] = v;
                        } else {
                            image[y * w + x] = v * tint.0;
                            image[h * w + y * w + x] = v * tint.1;
                            image[2 * h * w + y * w + x] = v * tint.2;
                        }
                    }
                }
            }
            present.insert(class + 1);
        }
        for px in image.iter_mut() {
            *px = (*px + rng.uniform(-spec.noise_amp, spec.noise_amp)).clamp(0.0, 1.0);
        }
        let label =
            make_label_vector(&present.iter().copied().collect::<Vec<_>>(), TaskKind::MultiLabel, k)?;
        samples.push(Sample {
            id: format!("img{i:05}"),
            image: Tensor4::new((1, c, h, w), image)?,
            label,
            mask: Some(mask),
        });
    }
    Ok(samples)
}

fn tensor_to_raw(image: &Tensor4) -> Result<RawPnm> {
    let (n, c, h, w) = image.dims();
    if n != 1 || (c != 1 && c != 3) {
        return Err(Error::input(format!("image tensor must be (1, 1|3, h, w), got {:?}", image.dims())));
    }
    let kind = if c == 1 { PnmKind::Gray } else { PnmKind::Rgb };
    let mut data = vec![0u8; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                data[(y * w + x) * c + ci] = (image.get(0, ci, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok(RawPnm { kind, width: w, height: h, data })
}

fn raw_to_tensor(raw: &RawPnm) -> Result<Tensor4> {
    let c = raw.kind.bytes_per_pixel();
    let (h, w) = (raw.height, raw.width);
    let mut data = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            for ci in 0..c {
                data[ci * h * w + y * w + x] = raw.data[(y * w + x) * c + ci] as f64 / 255.0;
            }
        }
    }
    Tensor4::new((1, c, h, w), data)
}

/// Save a `[0, 1]` image tensor as P5/P6 at 8-bit depth.
pub fn save_image(path: &Path, image: &Tensor4) -> Result<()> {
    write_pnm(path, &tensor_to_raw(image)?)
}

/// Load a P5/P6 image as a `(1, c, h, w)` tensor scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor4> {
    raw_to_tensor(&read_pnm(path)?)
}

/// Save a mask as P5 with the class index as gray value.
pub fn save_mask(path: &Path, mask: &MaskGrid) -> Result<()> {
    write_pnm(
        path,
        &RawPnm { kind: PnmKind::Gray, width: mask.w, height: mask.h, data: mask.data.clone() },
    )
}

pub fn load_mask(path: &Path) -> Result<MaskGrid> {
    let raw = read_pnm(path)?;
    if raw.kind != PnmKind::Gray {
        return Err(Error::input(format!("mask {} must be a P5 graymap", path.display())));
    }
    Ok(MaskGrid { h: raw.height, w: raw.width, data: raw.data })
}

/// Write a dataset directory: `images/`, `masks/`, `labels.csv`, `spec.json`.
pub fn write_dataset(dir: &Path, samples: &[Sample], spec: Option<&SynthSpec>) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut labels = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.csv"))?);
    for s in samples {
        let ext = if s.image.c() == 1 { "pgm" } else { "ppm" };
        save_image(&dir.join("images").join(format!("{}.{ext}", s.id)), &s.image)?;
        if let Some(mask) = &s.mask {
            save_mask(&dir.join("masks").join(format!("{}.pgm", s.id)), mask)?;
        }
        let classes = s.label.present_classes();
        if classes.is_empty() {
            writeln!(labels, "{}", s.id)?;
        } else {
            let joined: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
            writeln!(labels, "{},{}", s.id, joined.join(","))?;
        }
    }
    labels.flush()?;
    if let Some(spec) = spec {
        let json = serde_json::to_string_pretty(spec)
            .map_err(|e| Error::config(format!("spec serialization: {e}")))?;
        std::fs::write(dir.join("spec.json"), json)?;
    }
    Ok(())
}

/// Load a dataset directory in `labels.csv` order.
///
/// With `with_masks` false the masks directory is never touched, which is
/// the firewall training relies on.
pub fn load_dataset(dir: &Path, task: TaskKind, k: usize, with_masks: bool) -> Result<Vec<Sample>> {
    let labels_path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&labels_path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", labels_path.display())))?;
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap().trim().to_string();
        if id.is_empty() {
            return Err(Error::input(format!("labels.csv line {}: empty id", lineno + 1)));
        }
        let mut classes = Vec::new();
        for p in parts {
            let p = p.trim();
            if p.is_empty() {
                continue;
            }
            classes.push(p.parse::<usize>().map_err(|_| {
                Error::input(format!("labels.csv line {}: bad class index {p:?}", lineno + 1))
            })?);
        }
        let label = make_label_vector(&classes, task, k)
            .map_err(|e| Error::input(format!("sample {id}: {e}")))?;
        let pgm = dir.join("images").join(format!("{id}.pgm"));
        let ppm = dir.join("images").join(format!("{id}.ppm"));
        let image = if pgm.exists() {
            load_image(&pgm)?
        } else if ppm.exists() {
            load_image(&ppm)?
        } else {
            return Err(Error::input(format!("sample {id}: no image file under {}", dir.display())));
        };
        let mask = if with_masks {
            let mpath = dir.join("masks").join(format!("{id}.pgm"));
            if !mpath.exists() {
                return Err(Error::input(format!("sample {id}: missing mask {}", mpath.display())));
            }
            Some(load_mask(&mpath)?)
        } else {
            None
        };
        samples.push(Sample { id, image, label, mask });
    }
    if samples.is_empty() {
        return Err(Error::input(format!("empty dataset at {}", dir.display())));
    }
    Ok(samples)
}

/// Horizontal mirror (an involution).
pub fn mirror_image(image: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = image.dims();
    let mut data = vec![0.0; image.len()];
    for p in 0..n * c {
        for y in 0..h {
            for x in 0..w {
                data[p * h * w + y * w + x] = image.data()[p * h * w + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor4::new(image.dims(), data).expect("mirror preserves shape")
}

fn mirror_mask(mask: &MaskGrid) -> MaskGrid {
    let mut out = MaskGrid::zeros(mask.h, mask.w);
    for y in 0..mask.h {
        for x in 0..mask.w {
            out.set(y, x, mask.get(y, mask.w - 1 - x));
        }
    }
    out
}

fn crop_image(image: &Tensor4, oy: usize, ox: usize, th: usize, tw: usize) -> Result<Tensor4> {
    let (n, c, h, w) = image.dims();
    if oy + th > h || ox + tw > w {
        return Err(Error::input(format!(
            "crop {th}x{tw} at ({oy}, {ox}) exceeds image {h}x{w}"
        )));
    }
    let mut data = vec![0.0; n * c * th * tw];
    for p in 0..n * c {
        for y in 0..th {
            let src = &image.data()[p * h * w + (y + oy) * w + ox..p * h * w + (y + oy) * w + ox + tw];
            data[p * th * tw + y * tw..p * th * tw + (y + 1) * tw].copy_from_slice(src);
        }
    }
    Tensor4::new((n, c, th, tw), data)
}

/// Random crop (offset drawn in `[0, crop_margin]` per axis, output shrunk
/// by the margin) followed by a p = 0.5 horizontal mirror. The mask, when
/// carried, receives the identical transform; the label is untouched.
pub fn augment(sample: &Sample, rng: &mut SeededRng, crop_margin: usize, mirror: bool) -> Result<Sample> {
    let (_, _, h, w) = sample.image.dims();
    if crop_margin >= h || crop_margin >= w {
        return Err(Error::input(format!(
            "crop margin {crop_margin} too large for {h}x{w} image (sample {})",
            sample.id
        )));
    }
    let (th, tw) = (h - crop_margin, w - crop_margin);
    let (mut image, mut mask) = if crop_margin > 0 {
        let oy = rng.below(crop_margin + 1);
        let ox = rng.below(crop_margin + 1);
        let image = crop_image(&sample.image, oy, ox, th, tw)?;
        let mask = match &sample.mask {
            Some(m) => {
                let mut out = MaskGrid::zeros(th, tw);
                for y in 0..th {
                    for x in 0..tw {
                        out.set(y, x, m.get(y + oy, x + ox));
                    }
                }
                Some(out)
            }
            None => None,
        };
        (image, mask)
    } else {
        (sample.image.clone(), sample.mask.clone())
    };
    if mirror && rng.coin() {
        image = mirror_image(&image);
        mask = mask.map(|m| mirror_mask(&m));
    }
    Ok(Sample { id: sample.id.clone(), image, label: sample.label.clone(), mask })
}
