//! Pixel-level inference, IoU scoring, activation profiles and heat maps.

use std::io::Write;
use std::path::Path;

use crate::data::{MaskGrid, PnmKind, RawPnm, Sample};
use crate::error::{Error, Result};
use crate::layers::expand_map;
use crate::model::{StageNet, TaskKind};
use crate::tensor::Tensor4;

/// Output of [`predict_mask`]: the per-pixel class grid and the per-class
/// activation maps upscaled to input resolution (raw task-head outputs).
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: MaskGrid,
    /// `(1, K, H, W)` upscaled maps.
    pub heatmaps: Tensor4,
}

fn upscaled_maps(maps: &Tensor4, th: usize, tw: usize) -> Result<Tensor4> {
    expand_map(maps, th, tw)
}

/// Turn one sample's upscaled maps into a class grid.
///
/// Multi-label: per-pixel argmax over the K softmaxed channels (background
/// competes as channel 0). Binary: min-max normalize the abnormal map and
/// threshold at `tau`; an all-constant map predicts nothing.
fn maps_to_mask(up: &Tensor4, task: TaskKind, tau: f64) -> MaskGrid {
    let (_, k, h, w) = up.dims();
    let mut mask = MaskGrid::zeros(h, w);
    match task {
        TaskKind::MultiLabel => {
            for y in 0..h {
                for x in 0..w {
                    let mut best = 0usize;
                    let mut best_v = up.get(0, 0, y, x);
                    for c in 1..k {
                        let v = up.get(0, c, y, x);
                        if v > best_v {
                            best_v = v;
                            best = c;
                        }
                    }
                    mask.set(y, x, best as u8);
                }
            }
        }
        TaskKind::Binary => {
            let plane = up.plane(0, 1);
            let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > min {
                for y in 0..h {
                    for x in 0..w {
                        let norm = (up.get(0, 1, y, x) - min) / (max - min);
                        if norm > tau {
                            mask.set(y, x, 1);
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Per-pixel class prediction for a single `(1, c, h, w)` image.
pub fn predict_mask(net: &mut StageNet, image: &Tensor4, tau: f64) -> Result<Prediction> {
    if image.n() != 1 {
        return Err(Error::input(format!("predict_mask wants a single image, got n = {}", image.n())));
    }
    let (_, maps) = net.forward(image)?;
    let (th, tw) = (image.h(), image.w());
    let up = upscaled_maps(&maps, th, tw)?;
    let mask = maps_to_mask(&up, net.config().task, tau);
    Ok(Prediction { mask, heatmaps: up })
}

/// Per-sample IoU row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIou {
    pub id: String,
    /// Mean IoU over classes present in either grid for this sample.
    pub mean_iou: f64,
}

/// IoU scores with dataset-wide accumulated confusion counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SegResult {
    pub num_classes: usize,
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// `None` for classes absent from both prediction and truth everywhere.
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean over evaluated classes (union > 0).
    pub mean_iou: f64,
    /// Mean over evaluated foreground classes (class 0 excluded).
    pub mean_foreground_iou: f64,
    pub per_sample: Vec<SampleIou>,
}

/// Streaming accumulator: add prediction/truth pairs, then `finalize`.
#[derive(Debug, Clone)]
pub struct SegAccumulator {
    num_classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    per_sample: Vec<SampleIou>,
}

impl SegAccumulator {
    pub fn new(num_classes: usize) -> Self {
        SegAccumulator {
            num_classes,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            per_sample: Vec::new(),
        }
    }

    pub fn add(&mut self, id: &str, pred: &MaskGrid, truth: &MaskGrid) -> Result<()> {
        if (pred.h, pred.w) != (truth.h, truth.w) {
            return Err(Error::input(format!(
                "mask dims {}x{} vs {}x{}",
                pred.h, pred.w, truth.h, truth.w
            )));
        }
        let mut inter = vec![0u64; self.num_classes];
        let mut union = vec![0u64; self.num_classes];
        for (p, t) in pred.data.iter().zip(&truth.data) {
            let (p, t) = (*p as usize, *t as usize);
            if p >= self.num_classes || t >= self.num_classes {
                return Err(Error::input(format!(
                    "class index {} out of range for K = {}",
                    p.max(t),
                    self.num_classes
                )));
            }
            if p == t {
                inter[p] += 1;
                union[p] += 1;
            } else {
                union[p] += 1;
                union[t] += 1;
            }
        }
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for c in 0..self.num_classes {
            if union[c] > 0 {
                sum += inter[c] as f64 / union[c] as f64;
                cnt += 1;
            }
            self.intersection[c] += inter[c];
            self.union[c] += union[c];
        }
        self.per_sample
            .push(SampleIou { id: id.to_string(), mean_iou: if cnt > 0 { sum / cnt as f64 } else { 0.0 } });
        Ok(())
    }

    pub fn finalize(self) -> SegResult {
        let mut per_class = Vec::with_capacity(self.num_classes);
        let (mut sum, mut cnt) = (0.0, 0usize);
        let (mut fg_sum, mut fg_cnt) = (0.0, 0usize);
        for c in 0..self.num_classes {
            if self.union[c] > 0 {
                let v = self.intersection[c] as f64 / self.union[c] as f64;
                per_class.push(Some(v));
                sum += v;
                cnt += 1;
                if c > 0 {
                    fg_sum += v;
                    fg_cnt += 1;
                }
            } else {
                per_class.push(None);
            }
        }
        SegResult {
            num_classes: self.num_classes,
            intersection: self.intersection,
            union: self.union,
            per_class_iou: per_class,
            mean_iou: if cnt > 0 { sum / cnt as f64 } else { 0.0 },
            mean_foreground_iou: if fg_cnt > 0 { fg_sum / fg_cnt as f64 } else { 0.0 },
            per_sample: self.per_sample,
        }
    }
}

/// IoU of a single prediction/truth pair.
pub fn iou(pred: &MaskGrid, truth: &MaskGrid, num_classes: usize) -> Result<SegResult> {
    let mut acc = SegAccumulator::new(num_classes);
    acc.add("pair", pred, truth)?;
    Ok(acc.finalize())
}

impl SegResult {
    /// Line-oriented CSV: per-class aggregate rows, the two means, then
    /// per-sample rows. Deterministic given identical inputs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "kind,id,class,intersection,union,iou")?;
        for c in 0..self.num_classes {
            let iou = match self.per_class_iou[c] {
                Some(v) => format!("{v:.6}"),
                None => String::new(),
            };
            writeln!(f, "class,,{c},{},{},{iou}", self.intersection[c], self.union[c])?;
        }
        writeln!(f, "mean,,,,,{:.6}", self.mean_iou)?;
        writeln!(f, "mean_foreground,,,,,{:.6}", self.mean_foreground_iou)?;
        for s in &self.per_sample {
            writeln!(f, "sample,{},,,,{:.6}", s.id, s.mean_iou)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Whole-dataset evaluation: pixel IoU plus image-level label accuracy.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub seg: SegResult,
    pub label_accuracy: f64,
}

/// Evaluate every sample (masks required), batching forwards.
pub fn evaluate_dataset(
    net: &mut StageNet,
    samples: &[Sample],
    tau: f64,
    batch_size: usize,
) -> Result<EvalOutcome> {
    let cfg = net.config().clone();
    let mut acc = SegAccumulator::new(cfg.num_classes);
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let mut data = Vec::new();
        for s in chunk {
            let (n, c, h, w) = s.image.dims();
            if n != 1 || c != cfg.input_channels || (h, w) != cfg.input_size {
                return Err(Error::input(format!(
                    "sample {} dims {:?} do not match config",
                    s.id,
                    s.image.dims()
                )));
            }
            data.extend_from_slice(s.image.data());
        }
        let x = Tensor4::new((chunk.len(), cfg.input_channels, cfg.input_size.0, cfg.input_size.1), data)?;
        let (y_pred, maps) = net.forward(&x)?;
        for (ni, s) in chunk.iter().enumerate() {
            let truth = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::input(format!("sample {} has no mask for evaluation", s.id)))?;
            let up = upscaled_maps(&maps.batch_slice(ni), cfg.input_size.0, cfg.input_size.1)?;
            let pred = maps_to_mask(&up, cfg.task, tau);
            acc.add(&s.id, &pred, truth)?;

            match cfg.task {
                TaskKind::MultiLabel => {
                    // softmax-map LSE scores live in [0, 1]: midpoint rule
                    for c in 1..cfg.num_classes {
                        let pred_bit = y_pred.get(ni, c, 0, 0) > 0.5;
                        if pred_bit == s.label.is_set(c) {
                            correct += 1;
                        }
                        total += 1;
                    }
                }
                TaskKind::Binary => {
                    let pred = (0..cfg.num_classes)
                        .max_by(|a, b| {
                            y_pred.get(ni, *a, 0, 0).partial_cmp(&y_pred.get(ni, *b, 0, 0)).unwrap()
                        })
                        .unwrap();
                    if s.label.is_set(pred) {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
    }
    Ok(EvalOutcome {
        seg: acc.finalize(),
        label_accuracy: correct as f64 / total.max(1) as f64,
    })
}

/// Sorted, truncated, min-max-normalized top activations of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationProfile {
    pub layer: String,
    /// Non-increasing values in `[0, 1]`; a zero-range (constant) layer
    /// normalizes to all ones by convention.
    pub values: Vec<f64>,
    pub k: usize,
}

/// Top-k activation profile of a named layer on one image.
pub fn topk_activation_profile(
    net: &mut StageNet,
    image: &Tensor4,
    layer: &str,
    k: usize,
) -> Result<ActivationProfile> {
    if k == 0 {
        return Err(Error::input("profile k must be >= 1".to_string()));
    }
    net.forward(image)?;
    let out = net.layer_output(layer)?;
    let mut values: Vec<f64> = out.data().to_vec();
    values.sort_by(|a, b| b.partial_cmp(a).unwrap());
    values.truncate(k);
    let max = values.first().copied().unwrap_or(0.0);
    let min = values.last().copied().unwrap_or(0.0);
    if max > min {
        for v in values.iter_mut() {
            *v = (*v - min) / (max - min);
        }
    } else {
        values.iter_mut().for_each(|v| *v = 1.0);
    }
    Ok(ActivationProfile { layer: layer.to_string(), values, k })
}

/// Write profiles side by side: `rank,<layer>,...`; shorter profiles leave
/// trailing cells empty.
pub fn write_profiles_csv(path: &Path, profiles: &[ActivationProfile]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let names: Vec<&str> = profiles.iter().map(|p| p.layer.as_str()).collect();
    writeln!(f, "rank,{}", names.join(","))?;
    let rows = profiles.iter().map(|p| p.values.len()).max().unwrap_or(0);
    for r in 0..rows {
        let mut row = format!("{}", r + 1);
        for p in profiles {
            match p.values.get(r) {
                Some(v) => row.push_str(&format!(",{v:.6}")),
                None => row.push(','),
            }
        }
        writeln!(f, "{row}")?;
    }
    f.flush()?;
    Ok(())
}

/// Linear black -> red -> yellow color ramp.
fn ramp(v: f64) -> (f64, f64, f64) {
    ((2.0 * v).min(1.0), (2.0 * v - 1.0).clamp(0.0, 1.0), 0.0)
}

/// Blend a `[0, 1]` map over a grayscale view of `image` at alpha 0.5 and
/// write a P6 pixmap. Bit-exact for identical inputs.
pub fn export_heatmap(map: &Tensor4, image: &Tensor4, path: &Path) -> Result<()> {
    let (mn, mc, h, w) = map.dims();
    if mn != 1 || mc != 1 {
        return Err(Error::input(format!("heat map must be (1, 1, h, w), got {:?}", map.dims())));
    }
    if (image.h(), image.w()) != (h, w) || image.n() != 1 {
        return Err(Error::input(format!(
            "image dims {:?} do not match map {h}x{w}",
            image.dims()
        )));
    }
    if map.data().iter().any(|v| !(-1e-9..=1.0 + 1e-9).contains(v)) {
        return Err(Error::input("heat map must be normalized to [0, 1]".to_string()));
    }
    let c = image.c();
    let mut data = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let gray: f64 = (0..c).map(|ci| image.get(0, ci, y, x)).sum::<f64>() / c as f64;
            let (r, g, b) = ramp(map.get(0, 0, y, x).clamp(0.0, 1.0));
            let px = &mut data[(y * w + x) * 3..(y * w + x) * 3 + 3];
            px[0] = ((0.5 * gray + 0.5 * r) * 255.0).round() as u8;
            px[1] = ((0.5 * gray + 0.5 * g) * 255.0).round() as u8;
            px[2] = ((0.5 * gray + 0.5 * b) * 255.0).round() as u8;
        }
    }
    crate::data::write_pnm(path, &RawPnm { kind: PnmKind::Rgb, width: w, height: h, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn grid(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> u8) -> MaskGrid {
        let mut m = MaskGrid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                m.set(y, x, f(y, x));
            }
        }
        m
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = grid(8, 8, |y, _| if y < 4 { 1 } else { 0 });
        let r = iou(&a, &a, 2).unwrap();
        assert_eq!(r.per_class_iou[0], Some(1.0));
        assert_eq!(r.per_class_iou[1], Some(1.0));
        assert_eq!(r.mean_iou, 1.0);

        let b = grid(8, 8, |y, _| if y >= 4 { 1 } else { 0 });
        let r = iou(&a, &b, 2).unwrap();
        assert_eq!(r.per_class_iou[1], Some(0.0));
    }

    #[test]
    fn iou_half_overlap_is_one_third() {
        // two equal 4x4 squares overlapping by half
        let a = grid(8, 8, |y, x| if y < 4 && x < 4 { 1 } else { 0 });
        let b = grid(8, 8, |y, x| if y < 4 && (2..6).contains(&x) { 1 } else { 0 });
        let r = iou(&a, &b, 2).unwrap();
        let got = r.per_class_iou[1].unwrap();
        assert!((got - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric() {
        let mut rng = SeededRng::new(101);
        for _ in 0..20 {
            let a = grid(6, 6, |_, _| rng.below(3) as u8);
            let b = grid(6, 6, |_, _| rng.below(3) as u8);
            let mut rng2 = SeededRng::new(1);
            let _ = &mut rng2;
            let ab = iou(&a, &b, 3).unwrap();
            let ba = iou(&b, &a, 3).unwrap();
            assert_eq!(ab.per_class_iou, ba.per_class_iou);
            assert_eq!(ab.mean_iou, ba.mean_iou);
        }
    }

    #[test]
    fn absent_classes_are_excluded_from_the_mean() {
        let a = grid(4, 4, |_, _| 0);
        let r = iou(&a, &a, 5).unwrap();
        assert_eq!(r.per_class_iou[0], Some(1.0));
        for c in 1..5 {
            assert_eq!(r.per_class_iou[c], None);
        }
        assert_eq!(r.mean_iou, 1.0);
        assert_eq!(r.mean_foreground_iou, 0.0);
    }

    #[test]
    fn mask_dim_mismatch_rejected() {
        let a = grid(4, 4, |_, _| 0);
        let b = grid(4, 5, |_, _| 0);
        assert!(matches!(iou(&a, &b, 2), Err(Error::Input(_))));
    }

    #[test]
    fn binary_thresholding_handles_flat_maps() {
        // all-constant abnormal map: empty prediction
        let up = Tensor4::zeros((1, 2, 4, 4)).unwrap();
        let mask = maps_to_mask(&up, TaskKind::Binary, 0.5);
        assert!(mask.data.iter().all(|v| *v == 0));
    }

    #[test]
    fn multilabel_argmax_reproduces_hot_channel() {
        let mut up = Tensor4::zeros((1, 3, 2, 2)).unwrap();
        up.set(0, 2, 0, 0, 5.0).unwrap();
        up.set(0, 1, 1, 1, 3.0).unwrap();
        up.set(0, 0, 0, 1, 1.0).unwrap();
        up.set(0, 0, 1, 0, 1.0).unwrap();
        let mask = maps_to_mask(&up, TaskKind::MultiLabel, 0.5);
        assert_eq!(mask.data, vec![2, 0, 0, 1]);
    }

    #[test]
    fn checker_pattern_of_confident_classes() {
        let (h, w) = (4, 4);
        let mut up = Tensor4::zeros((1, 3, h, w)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let c = if (y + x) % 2 == 0 { 1 } else { 2 };
                up.set(0, c, y, x, 10.0).unwrap();
            }
        }
        let mask = maps_to_mask(&up, TaskKind::MultiLabel, 0.5);
        for y in 0..h {
            for x in 0..w {
                assert_eq!(mask.get(y, x), if (y + x) % 2 == 0 { 1 } else { 2 });
            }
        }
    }

    #[test]
    fn profile_conventions() {
        // degenerate constant layer: all ones
        let vals = vec![3.3; 10];
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(max, min);
        // covered end-to-end below through topk_activation_profile
    }

    #[test]
    fn heatmap_blend_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor4::fill((1, 1, 2, 2), 0.5).unwrap();

        let zero = Tensor4::zeros((1, 1, 2, 2)).unwrap();
        let p0 = dir.path().join("zero.ppm");
        export_heatmap(&zero, &image, &p0).unwrap();
        let raw = crate::data::read_pnm(&p0).unwrap();
        // zero map: pure (darkened) grayscale, equal channels
        for px in raw.data.chunks(3) {
            assert_eq!(px[0], px[1]);
            assert_eq!(px[1], px[2]);
        }

        let one = Tensor4::fill((1, 1, 2, 2), 1.0).unwrap();
        let p1 = dir.path().join("one.ppm");
        export_heatmap(&one, &image, &p1).unwrap();
        let raw = crate::data::read_pnm(&p1).unwrap();
        // full ramp (yellow) blended 50/50 over gray 0.5
        for px in raw.data.chunks(3) {
            assert_eq!(px[0], ((0.25 + 0.5) * 255.0f64).round() as u8);
            assert_eq!(px[1], ((0.25 + 0.5) * 255.0f64).round() as u8);
            assert_eq!(px[2], (0.25 * 255.0f64).round() as u8);
        }

        // determinism
        let p2 = dir.path().join("one2.ppm");
        export_heatmap(&one, &image, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unnormalized_heatmap_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let image = Tensor4::fill((1, 1, 2, 2), 0.5).unwrap();
        let bad = Tensor4::fill((1, 1, 2, 2), 1.5).unwrap();
        assert!(matches!(
            export_heatmap(&bad, &image, &dir.path().join("x.ppm")),
            Err(Error::Input(_))
        ));
    }
}
