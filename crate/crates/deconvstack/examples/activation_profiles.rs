//! Compare the top-k activation distributions of a convolution layer and
//! its partner deconvolution on a trained model. The deconvolution profile
//! decays faster at matched ranks: unpooling reconstructs from the most
//! discriminative activations, so weak (false-positive-prone) responses
//! fall away.
//!
//! ```bash
//! cargo run --release --example activation_profiles
//! ```

use deconvstack::data::{generate_synthetic, ShapeKind, SynthSpec};
use deconvstack::eval::{topk_activation_profile, write_profiles_csv};
use deconvstack::model::{load_checkpoint, NetworkConfig, StageNet};
use deconvstack::tensor::SeededRng;
use deconvstack::trainer::{train_stage_plan, Schedule, StagePlanEntry, TrainConfig, TrainablePolicy};

fn main() -> deconvstack::Result<()> {
    let out = std::env::temp_dir().join("deconvstack_profiles");
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
        seed: 41,
    };
    let train_samples = generate_synthetic(&spec)?;
    spec.count = 1;
    spec.seed = 42;
    let probe = &generate_synthetic(&spec)?[0];

    let train_cfg = TrainConfig {
        lr0: 0.02,
        schedule: Schedule::HalveEvery(3),
        epochs: 5,
        momentum: 0.9,
        batch_size: 16,
        seed: 8,
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

    // deconv stage 2 is tied with conv layer 2 in this 3-layer config
    let k = 500;
    let conv = topk_activation_profile(&mut net, &probe.image, "conv2", k)?;
    let deconv = topk_activation_profile(&mut net, &probe.image, "deconv2", k)?;
    let csv = out.join("profiles.csv");
    write_profiles_csv(&csv, &[conv.clone(), deconv.clone()])?;

    println!("normalized activation at selected ranks (1.0 = strongest):");
    println!("{:>8} {:>10} {:>10}", "rank", "conv2", "deconv2");
    for r in [0, k / 8, k / 4, k / 2, k - 1] {
        println!(
            "{:>8} {:>10.4} {:>10.4}",
            r + 1,
            conv.values.get(r).copied().unwrap_or(f64::NAN),
            deconv.values.get(r).copied().unwrap_or(f64::NAN)
        );
    }
    println!("full table: {}", csv.display());
    Ok(())
}
