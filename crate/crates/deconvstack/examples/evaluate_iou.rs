//! Pixel-level IoU evaluation of a trained checkpoint against held-out
//! masks. Masks never enter training; here they score the predictions.
//!
//! ```bash
//! cargo run --release --example evaluate_iou
//! ```

use deconvstack::data::{generate_synthetic, ShapeKind, SynthSpec};
use deconvstack::eval::evaluate_dataset;
use deconvstack::model::{load_checkpoint, NetworkConfig, StageNet};
use deconvstack::tensor::SeededRng;
use deconvstack::trainer::{train_stage_plan, Schedule, StagePlanEntry, TrainConfig, TrainablePolicy};

fn main() -> deconvstack::Result<()> {
    let out = std::env::temp_dir().join("deconvstack_evaluate_iou");
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
        count: 300,
        seed: 21,
    };
    let train_samples = generate_synthetic(&spec)?;
    spec.count = 80;
    spec.seed = 22;
    let eval_samples = generate_synthetic(&spec)?;

    let train_cfg = TrainConfig {
        lr0: 0.02,
        schedule: Schedule::HalveEvery(3),
        epochs: 5,
        momentum: 0.9,
        batch_size: 16,
        seed: 4,
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
                trainable: Some(TrainablePolicy::TiedAndHead),
            },
        ],
    };
    let outcome = train_stage_plan(&cfg, &train_cfg, &train_samples, &out)?;

    for (stage, ckpt) in &outcome.checkpoints {
        let mut net = StageNet::build(&cfg, *stage, &mut SeededRng::new(0))?;
        net.store_mut().restore(&load_checkpoint(ckpt)?);
        let result = evaluate_dataset(&mut net, &eval_samples, 0.5, 8)?;
        println!(
            "stage {stage}: mean IoU {:.4}, foreground IoU {:.4}, label accuracy {:.4}",
            result.seg.mean_iou, result.seg.mean_foreground_iou, result.label_accuracy
        );
        let csv = out.join(format!("iou_stage{stage}.csv"));
        result.seg.write_csv(&csv)?;
        println!("  per-class table: {}", csv.display());
    }
    Ok(())
}
