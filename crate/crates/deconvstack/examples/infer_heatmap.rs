//! Train a tiny model, predict a per-pixel mask for one image and export
//! per-class heat maps blended over the input.
//!
//! ```bash
//! cargo run --release --example infer_heatmap
//! ```

use deconvstack::data::{generate_synthetic, save_image, save_mask, ShapeKind, SynthSpec};
use deconvstack::eval::{export_heatmap, predict_mask};
use deconvstack::model::{load_checkpoint, NetworkConfig, StageNet};
use deconvstack::tensor::{SeededRng, Tensor4};
use deconvstack::trainer::{train_stage_plan, Schedule, StagePlanEntry, TrainConfig, TrainablePolicy};

fn main() -> deconvstack::Result<()> {
    let out = std::env::temp_dir().join("deconvstack_infer");
    std::fs::create_dir_all(&out)?;
    let cfg = NetworkConfig::from_json(
        r#"{
            "input_size": [48, 48],
            "input_channels": 1,
            "conv_layers": [
                { "blocks": [{ "filters": 8,  "kh": 5, "kw": 5 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } },
                { "blocks": [{ "filters": 16, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } },
                { "blocks": [{ "filters": 16, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } }
            ],
            "deconv_stages": 2,
            "num_classes": 3,
            "task": "multi-label",
            "s": 8.0
        }"#,
    )?;
    let mut spec = SynthSpec {
        image_size: (48, 48),
        channels: 1,
        classes: vec![ShapeKind::Disk, ShapeKind::Square],
        objects_per_image: (1, 1),
        scale_range: (7.0, 12.0),
        intensity_range: (0.6, 0.95),
        background_level: 0.12,
        noise_amp: 0.04,
        count: 240,
        seed: 31,
    };
    let train_samples = generate_synthetic(&spec)?;
    spec.count = 1;
    spec.seed = 32;
    let probe = &generate_synthetic(&spec)?[0];

    let train_cfg = TrainConfig {
        lr0: 0.02,
        schedule: Schedule::HalveEvery(3),
        epochs: 5,
        momentum: 0.9,
        batch_size: 16,
        seed: 6,
        augment: Default::default(),
        stage_plan: vec![
            StagePlanEntry {
                stage: 0,
                epochs: Some(5),
                lr0: Some(0.02),
                schedule: None,
                trainable: Some(TrainablePolicy::All),
            },
            StagePlanEntry {
                stage: 2,
                epochs: Some(2),
                lr0: Some(0.004),
                schedule: Some(Schedule::Constant),
                trainable: Some(TrainablePolicy::NewStageAndHead),
            },
        ],
    };
    let outcome = train_stage_plan(&cfg, &train_cfg, &train_samples, &out)?;
    let (stage, ckpt) = outcome.checkpoints.last().unwrap();

    let mut net = StageNet::build(&cfg, *stage, &mut SeededRng::new(0))?;
    net.store_mut().restore(&load_checkpoint(ckpt)?);
    let pred = predict_mask(&mut net, &probe.image, 0.5)?;

    save_image(&out.join("input.pgm"), &probe.image)?;
    save_mask(&out.join("predicted_mask.pgm"), &pred.mask)?;
    let (_, k, h, w) = pred.heatmaps.dims();
    for c in 0..k {
        let plane = pred.heatmaps.plane(0, c);
        let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let norm: Vec<f64> = if max > min {
            plane.iter().map(|v| (v - min) / (max - min)).collect()
        } else {
            vec![0.0; plane.len()]
        };
        export_heatmap(&Tensor4::new((1, 1, h, w), norm)?, &probe.image, &out.join(format!("heat_class{c}.ppm")))?;
    }
    let truth = probe.mask.as_ref().unwrap();
    let agree = pred
        .mask
        .data
        .iter()
        .zip(&truth.data)
        .filter(|(a, b)| a == b)
        .count() as f64
        / truth.data.len() as f64;
    println!("true classes: {:?}", probe.label.present_classes());
    println!("pixel agreement with the held-out mask: {:.1}%", agree * 100.0);
    println!("artifacts in {}", out.display());
    Ok(())
}
