//! Staged (layer-by-layer) training on a small synthetic task: baseline
//! first, then deconvolution stages stacked one at a time, each stage
//! restoring the previous checkpoint.
//!
//! ```bash
//! cargo run --release --example train_staged
//! ```

use deconvstack::data::{generate_synthetic, ShapeKind, SynthSpec};
use deconvstack::model::NetworkConfig;
use deconvstack::trainer::{train_stage_plan, Schedule, StagePlanEntry, TrainConfig, TrainablePolicy};

fn main() -> deconvstack::Result<()> {
    let out = std::env::temp_dir().join("deconvstack_train_staged");
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

    let spec = SynthSpec {
        image_size: (48, 48),
        channels: 1,
        classes: vec![ShapeKind::Disk, ShapeKind::Square],
        objects_per_image: (1, 1),
        scale_range: (7.0, 12.0),
        intensity_range: (0.6, 0.95),
        background_level: 0.12,
        noise_amp: 0.04,
        count: 200,
        seed: 11,
    };
    let samples = generate_synthetic(&spec)?;

    let train_cfg = TrainConfig {
        lr0: 0.02,
        schedule: Schedule::HalveEvery(3),
        epochs: 4,
        momentum: 0.9,
        batch_size: 16,
        seed: 3,
        augment: Default::default(),
        stage_plan: vec![
            StagePlanEntry {
                stage: 0,
                epochs: Some(4),
                lr0: Some(0.02),
                schedule: None,
                trainable: Some(TrainablePolicy::All),
            },
            StagePlanEntry {
                stage: 1,
                epochs: Some(2),
                lr0: Some(0.004),
                schedule: Some(Schedule::Constant),
                trainable: Some(TrainablePolicy::NewStageAndHead),
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

    let outcome = train_stage_plan(&cfg, &train_cfg, &samples, &out)?;
    println!("checkpoints:");
    for (stage, path) in &outcome.checkpoints {
        println!("  stage {stage}: {}", path.display());
    }
    println!("metrics log:\n{}", std::fs::read_to_string(&outcome.metrics_path)?);
    Ok(())
}
