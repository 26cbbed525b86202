//! Command-line surface: `gen-data`, `train`, `eval`, `infer`, `analyze`.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::data::{generate_synthetic, load_dataset, load_image, save_mask, write_dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_dataset, export_heatmap, predict_mask, topk_activation_profile, write_profiles_csv,
};
use crate::model::{load_checkpoint, NetworkConfig, StageNet, TaskKind};
use crate::tensor::{SeededRng, Tensor4};
use crate::trainer::{train_stage_plan, TrainConfig};

#[derive(Parser)]
#[command(
    name = "deconvstack",
    version,
    about = "Weakly-supervised semantic segmentation with tied deconvolutional feature stacking"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shape dataset directory from a spec JSON.
    GenData {
        /// Synthetic dataset spec (see presets/synth_data.json).
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a staged training plan; writes checkpoints and a metrics CSV.
    Train {
        /// Network config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Training plan JSON.
        #[arg(long)]
        plan: PathBuf,
        /// Dataset directory (masks are never read).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints, metrics.csv and config.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint by pixel IoU; prints the mean IoU.
    Eval {
        /// Network config JSON; defaults to config.json next to the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Deconvolution stage the checkpoint was trained at.
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory with masks.
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Binary decision threshold on the normalized abnormal map.
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        /// Additionally sweep tau over (0, 1) and write <out>.tau.csv.
        #[arg(long, default_value_t = false)]
        tau_sweep: bool,
    },
    /// Predict a mask (and optional heat maps) for one image.
    Infer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        ckpt: PathBuf,
        /// Input image (P5/P6).
        #[arg(long)]
        image: PathBuf,
        /// Output mask path (P5, class index per pixel).
        #[arg(long)]
        out_mask: PathBuf,
        /// Directory for per-class heat maps (heat_class<k>.ppm).
        #[arg(long)]
        heatmap_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
    },
    /// Export top-k activation profiles of named layers to a CSV.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        stage: usize,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated layer names, e.g. conv3,deconv3.
        #[arg(long)]
        layers: String,
        #[arg(long, default_value_t = 10000)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parse and dispatch. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(config: &Option<PathBuf>, ckpt: &Path) -> Result<NetworkConfig> {
    match config {
        Some(path) => NetworkConfig::load(path),
        None => {
            let sibling = ckpt.parent().map(|d| d.join("config.json"));
            match sibling {
                Some(path) if path.exists() => NetworkConfig::load(&path),
                _ => Err(Error::input(
                    "no --config given and no config.json next to the checkpoint".to_string(),
                )),
            }
        }
    }
}

/// Build a stage net and restore every parameter from the checkpoint.
fn restored_net(cfg: &NetworkConfig, stage: usize, ckpt: &Path) -> Result<StageNet> {
    let mut net = StageNet::build(cfg, stage, &mut SeededRng::new(0))?;
    let data = load_checkpoint(ckpt)?;
    let stats = net.store_mut().restore(&data);
    if stats.fresh > 0 || stats.shape_mismatch > 0 {
        return Err(Error::input(format!(
            "checkpoint {} does not cover this config at stage {stage} \
             ({} restored, {} missing, {} shape-mismatched)",
            ckpt.display(),
            stats.restored,
            stats.fresh,
            stats.shape_mismatch
        )));
    }
    Ok(net)
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { spec, out } => {
            let spec = SynthSpec::load(&spec)?;
            let samples = generate_synthetic(&spec)?;
            write_dataset(&out, &samples, Some(&spec))?;
            println!("wrote {} samples to {}", samples.len(), out.display());
            Ok(())
        }
        Cmd::Train { config, plan, data, out } => {
            let net_cfg = NetworkConfig::load(&config)?;
            let train_cfg = TrainConfig::load(&plan)?;
            // Masks stay untouched: image-level labels only.
            let samples = load_dataset(&data, net_cfg.task, net_cfg.num_classes, false)?;
            std::fs::create_dir_all(&out)?;
            let resolved = serde_json::to_string_pretty(&net_cfg)
                .map_err(|e| Error::config(format!("config serialization: {e}")))?;
            std::fs::write(out.join("config.json"), resolved)?;
            let outcome = train_stage_plan(&net_cfg, &train_cfg, &samples, &out)?;
            for (stage, path) in &outcome.checkpoints {
                println!("stage {stage}: {}", path.display());
            }
            println!("metrics: {}", outcome.metrics_path.display());
            Ok(())
        }
        Cmd::Eval { config, stage, ckpt, data, out, tau, tau_sweep } => {
            let cfg = resolve_config(&config, &ckpt)?;
            let mut net = restored_net(&cfg, stage, &ckpt)?;
            let samples = load_dataset(&data, cfg.task, cfg.num_classes, true)?;
            let outcome = evaluate_dataset(&mut net, &samples, tau, 8)?;
            outcome.seg.write_csv(&out)?;
            println!("mean IoU: {:.4}", outcome.seg.mean_iou);
            println!("mean foreground IoU: {:.4}", outcome.seg.mean_foreground_iou);
            println!("label accuracy: {:.4}", outcome.label_accuracy);
            if tau_sweep {
                if cfg.task != TaskKind::Binary {
                    return Err(Error::input("--tau-sweep applies to binary tasks only".to_string()));
                }
                let sweep_path = out.with_extension("tau.csv");
                let mut rows = String::from("tau,mean_iou,mean_foreground_iou\n");
                let mut t = 0.05;
                while t < 0.96 {
                    let o = evaluate_dataset(&mut net, &samples, t, 8)?;
                    rows.push_str(&format!(
                        "{t:.2},{:.6},{:.6}\n",
                        o.seg.mean_iou, o.seg.mean_foreground_iou
                    ));
                    t += 0.05;
                }
                std::fs::write(&sweep_path, rows)?;
                println!("tau sweep: {}", sweep_path.display());
            }
            Ok(())
        }
        Cmd::Infer { config, stage, ckpt, image, out_mask, heatmap_dir, tau } => {
            let cfg = resolve_config(&config, &ckpt)?;
            let mut net = restored_net(&cfg, stage, &ckpt)?;
            let img = load_image(&image)?;
            let pred = predict_mask(&mut net, &img, tau)?;
            save_mask(&out_mask, &pred.mask)?;
            println!("mask: {}", out_mask.display());
            if let Some(dir) = heatmap_dir {
                std::fs::create_dir_all(&dir)?;
                let (_, k, h, w) = pred.heatmaps.dims();
                for c in 0..k {
                    // normalize each class map to [0, 1] before blending
                    let plane = pred.heatmaps.plane(0, c);
                    let min = plane.iter().cloned().fold(f64::INFINITY, f64::min);
                    let max = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let norm: Vec<f64> = if max > min {
                        plane.iter().map(|v| (v - min) / (max - min)).collect()
                    } else {
                        vec![0.0; plane.len()]
                    };
                    let map = Tensor4::new((1, 1, h, w), norm)?;
                    let path = dir.join(format!("heat_class{c}.ppm"));
                    export_heatmap(&map, &img, &path)?;
                }
                println!("heat maps: {}", dir.display());
            }
            Ok(())
        }
        Cmd::Analyze { config, stage, ckpt, image, layers, k, out } => {
            let cfg = resolve_config(&config, &ckpt)?;
            let mut net = restored_net(&cfg, stage, &ckpt)?;
            let img = load_image(&image)?;
            let mut profiles = Vec::new();
            for layer in layers.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                profiles.push(topk_activation_profile(&mut net, &img, layer, k)?);
            }
            if profiles.is_empty() {
                return Err(Error::input("no layers given".to_string()));
            }
            write_profiles_csv(&out, &profiles)?;
            println!("profiles: {}", out.display());
            Ok(())
        }
    }
}
