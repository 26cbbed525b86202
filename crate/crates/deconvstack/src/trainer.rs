//! SGD with momentum, learning-rate schedules, minibatching and the staged
//! (layer-by-layer) training plan.
//!
//! Determinism contract: `(seed, configs, data)` fully determines every
//! checkpoint byte and every metrics row. One run RNG is consumed in a fixed
//! order (parameter init per stage, then per-epoch shuffling and
//! augmentation draws), and gradient reduction order never depends on
//! thread scheduling.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{augment, targets_tensor, Sample};
use crate::error::{Error, Result};
use crate::layers::{bce_multilabel_loss, categorical_ce_loss};
use crate::model::{
    conv_param_name, deconv_param_name, load_checkpoint, NetworkConfig, StageNet, TaskKind,
    TiedParamStore,
};
use crate::tensor::{SeededRng, Tensor4};

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Halve the initial rate every `n` epochs.
    HalveEvery(usize),
}

impl Schedule {
    pub fn lr_at(self, lr0: f64, epoch0: usize) -> f64 {
        match self {
            Schedule::Constant => lr0,
            Schedule::HalveEvery(n) => lr0 * 0.5f64.powi((epoch0 / n.max(1)) as i32),
        }
    }
}

/// Which parameters a stage trains.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TrainablePolicy {
    /// Everything.
    All,
    /// The head plus the current stage's own parameters: the tied kernels of
    /// deconvolution stage `j` (which are the partner conv kernels) and the
    /// stage's deconvolution biases. At stage 0 this is the head alone.
    NewStageAndHead,
    /// The head plus every tied kernel and deconvolution bias of stages
    /// 1..=j; untied convolution weights stay fixed.
    TiedAndHead,
    /// Explicit parameter names (include `.bias` entries as needed).
    Names(Vec<String>),
}

/// Resolve a policy into concrete parameter names for a built net, then
/// subtract the config's frozen list.
pub fn resolve_trainable(net: &StageNet, policy: &TrainablePolicy) -> Result<BTreeSet<String>> {
    let cfg = net.config();
    let mut out: BTreeSet<String> = match policy {
        TrainablePolicy::All => net.all_param_names(),
        TrainablePolicy::NewStageAndHead => {
            let mut set = BTreeSet::new();
            set.insert("head".to_string());
            set.insert("head.bias".to_string());
            let j = net.stage();
            if j >= 1 {
                let pl = cfg.partner_layer(j);
                for b in 0..cfg.conv_layers[pl].blocks.len() {
                    set.insert(conv_param_name(pl, b));
                    set.insert(format!("{}.bias", deconv_param_name(j, b)));
                }
            }
            set
        }
        TrainablePolicy::TiedAndHead => {
            let mut set = BTreeSet::new();
            set.insert("head".to_string());
            set.insert("head.bias".to_string());
            for j in 1..=net.stage() {
                let pl = cfg.partner_layer(j);
                for b in 0..cfg.conv_layers[pl].blocks.len() {
                    set.insert(conv_param_name(pl, b));
                    set.insert(format!("{}.bias", deconv_param_name(j, b)));
                }
            }
            set
        }
        TrainablePolicy::Names(names) => names.iter().cloned().collect(),
    };
    for frozen in &cfg.frozen {
        out.remove(frozen);
        out.remove(&format!("{frozen}.bias"));
    }
    let all = net.all_param_names();
    for n in &out {
        if !all.contains(n) {
            return Err(Error::config(format!("trainable policy names unknown parameter {n}")));
        }
    }
    Ok(out)
}

/// Augmentation toggles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct AugmentCfg {
    #[serde(default)]
    pub crop_margin: usize,
    #[serde(default)]
    pub mirror: bool,
}

/// One entry of the staged training plan. Unset fields fall back to the
/// top-level values; an unset policy means `all` at stage 0 and
/// `new-stage-and-head` afterwards.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StagePlanEntry {
    pub stage: usize,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr0: Option<f64>,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default)]
    pub trainable: Option<TrainablePolicy>,
}

/// Training configuration (serialized as the plan JSON).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    pub epochs: usize,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub augment: AugmentCfg,
    #[serde(default)]
    pub stage_plan: Vec<StagePlanEntry>,
}

fn default_schedule() -> Schedule {
    Schedule::Constant
}

impl TrainConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(json).map_err(|e| Error::config(format!("bad train config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1".to_string()));
        }
        for pair in self.stage_plan.windows(2) {
            if pair[1].stage < pair[0].stage {
                return Err(Error::config(format!(
                    "stage plan must be ascending, got {} after {}",
                    pair[1].stage, pair[0].stage
                )));
            }
        }
        for e in &self.stage_plan {
            if let Some(lr0) = e.lr0 {
                if !(lr0 > 0.0) || !lr0.is_finite() {
                    return Err(Error::config(format!("stage {} lr0 {lr0} must be positive", e.stage)));
                }
            }
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers, reset at each stage boundary.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    velocity: IndexMap<String, Vec<f64>>,
}

impl OptState {
    /// Allocate zero velocities matching every independent parameter.
    pub fn new(store: &TiedParamStore) -> Self {
        let mut velocity = IndexMap::new();
        for name in store.param_names() {
            let entry = store.param(name).unwrap();
            velocity.insert(name.clone(), vec![0.0; entry.weight.data().len()]);
            velocity.insert(format!("{name}.bias"), vec![0.0; entry.weight.bias().len()]);
        }
        for name in store.deconv_bias_names() {
            let entry = store.deconv_bias(name).unwrap();
            velocity.insert(format!("{name}.bias"), vec![0.0; entry.bias.len()]);
        }
        OptState { velocity }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(|v| v.as_slice())
    }
}

fn step_buffer(p: &mut [f64], g: &[f64], v: &mut [f64], lr: f64, momentum: f64) -> Result<()> {
    for i in 0..p.len() {
        v[i] = momentum * v[i] - lr * g[i];
        p[i] += v[i];
        if !p[i].is_finite() {
            return Err(Error::state(format!("parameter diverged to {} during sgd step", p[i])));
        }
    }
    Ok(())
}

/// One SGD-with-momentum step: `v <- momentum*v - lr*g; p <- p + v`, applied
/// to the trainable set only. Gradients are zeroed afterwards.
pub fn sgd_step(
    store: &mut TiedParamStore,
    opt: &mut OptState,
    lr: f64,
    momentum: f64,
    trainable: &BTreeSet<String>,
) -> Result<()> {
    if !store.grads_ready() {
        return Err(Error::state("sgd step without populated gradients (run backward first)".to_string()));
    }
    let names: Vec<String> = store.param_names().cloned().collect();
    for name in names {
        if trainable.contains(&name) {
            let v = opt
                .velocity
                .get_mut(&name)
                .ok_or_else(|| Error::state(format!("no velocity buffer for {name}")))?;
            let entry = store.param_mut(&name).unwrap();
            let g = entry.grad_w.clone();
            step_buffer(entry.weight.data_mut(), &g, v, lr, momentum)?;
        }
        let bias_name = format!("{name}.bias");
        if trainable.contains(&bias_name) {
            let v = opt
                .velocity
                .get_mut(&bias_name)
                .ok_or_else(|| Error::state(format!("no velocity buffer for {bias_name}")))?;
            let entry = store.param_mut(&name).unwrap();
            let g = entry.grad_b.clone();
            step_buffer(entry.weight.bias_mut(), &g, v, lr, momentum)?;
        }
    }
    let names: Vec<String> = store.deconv_bias_names().cloned().collect();
    for name in names {
        let bias_name = format!("{name}.bias");
        if trainable.contains(&bias_name) {
            let v = opt
                .velocity
                .get_mut(&bias_name)
                .ok_or_else(|| Error::state(format!("no velocity buffer for {bias_name}")))?;
            let entry = store.deconv_bias_mut(&name).unwrap();
            let g = entry.grad.clone();
            step_buffer(&mut entry.bias, &g, v, lr, momentum)?;
        }
    }
    store.zero_grads();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Image-level accuracy of a score batch against targets.
///
/// Multi-label scores are log-sum-exp pools of channel-softmaxed maps and
/// therefore live in `[0, 1]`; a foreground bit counts as predicted when its
/// score clears the midpoint 0.5. The always-on background bit is excluded.
/// Binary: argmax agreement.
pub fn batch_accuracy(y_pred: &Tensor4, targets: &Tensor4, task: TaskKind) -> (usize, usize) {
    let (n, k, _, _) = y_pred.dims();
    let mut correct = 0;
    let mut total = 0;
    match task {
        TaskKind::MultiLabel => {
            for ni in 0..n {
                for ci in 1..k {
                    let pred = y_pred.get(ni, ci, 0, 0) > 0.5;
                    let truth = targets.get(ni, ci, 0, 0) == 1.0;
                    if pred == truth {
                        correct += 1;
                    }
                    total += 1;
                }
            }
        }
        TaskKind::Binary => {
            for ni in 0..n {
                let pred = (0..k)
                    .max_by(|a, b| {
                        y_pred.get(ni, *a, 0, 0).partial_cmp(&y_pred.get(ni, *b, 0, 0)).unwrap()
                    })
                    .unwrap();
                let truth =
                    (0..k).find(|c| targets.get(ni, *c, 0, 0) == 1.0).expect("one-hot target");
                if pred == truth {
                    correct += 1;
                }
                total += 1;
            }
        }
    }
    (correct, total)
}

fn assemble_batch(
    samples: &[&Sample],
    cfg: &NetworkConfig,
    rng: &mut SeededRng,
    aug: AugmentCfg,
) -> Result<(Tensor4, Tensor4)> {
    let (h, w) = cfg.input_size;
    let c = cfg.input_channels;
    let mut data = Vec::with_capacity(samples.len() * c * h * w);
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let prepared = augment(s, rng, aug.crop_margin, aug.mirror)?;
        let (_, pc, ph, pw) = prepared.image.dims();
        if (pc, ph, pw) != (c, h, w) {
            return Err(Error::input(format!(
                "sample {} has dims ({pc}, {ph}, {pw}), config wants ({c}, {h}, {w})",
                s.id
            )));
        }
        data.extend_from_slice(prepared.image.data());
        labels.push(s.label.clone());
    }
    let x = Tensor4::new((samples.len(), c, h, w), data)?;
    let label_refs: Vec<&crate::data::LabelVector> = labels.iter().collect();
    let t = targets_tensor(&label_refs)?;
    if t.c() != cfg.num_classes {
        return Err(Error::input(format!(
            "label length {} does not match num_classes {}",
            t.c(),
            cfg.num_classes
        )));
    }
    Ok((x, t))
}

/// Loss and gradient for the configured task.
pub fn task_loss(task: TaskKind, y_pred: &Tensor4, targets: &Tensor4) -> Result<(f64, Tensor4)> {
    match task {
        TaskKind::MultiLabel => bce_multilabel_loss(y_pred, targets),
        TaskKind::Binary => categorical_ce_loss(y_pred, targets),
    }
}

/// One pass over the shuffled dataset: minibatch forward, loss, backward,
/// SGD step. A trailing partial batch is processed.
pub fn train_epoch(
    net: &mut StageNet,
    opt: &mut OptState,
    samples: &[Sample],
    rng: &mut SeededRng,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    if samples.is_empty() {
        return Err(Error::input("empty dataset".to_string()));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    rng.shuffle(&mut order);
    let task = net.config().task;
    let trainable = net.trainable().clone();
    let net_cfg = net.config().clone();
    let mut loss_sum = 0.0;
    let mut correct = 0;
    let mut total = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|i| &samples[*i]).collect();
        let (x, t) = assemble_batch(&batch, &net_cfg, rng, cfg.augment)?;
        let (y_pred, _) = net.forward(&x)?;
        let (loss, d_y) = task_loss(task, &y_pred, &t)?;
        let (c, tt) = batch_accuracy(&y_pred, &t, task);
        correct += c;
        total += tt;
        loss_sum += loss * chunk.len() as f64;
        net.backward(&d_y)?;
        sgd_step(net.store_mut(), opt, lr, cfg.momentum, &trainable)?;
    }
    Ok(EpochMetrics {
        mean_loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / total.max(1) as f64,
    })
}

/// Result of running a training plan.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// `(stage, checkpoint path)` per plan entry, in order.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub metrics_path: PathBuf,
}

/// Run the staged plan: for each entry build the stage net, restore the
/// previous checkpoint by name intersection, apply the trainable policy,
/// train, and save `stage<N>.ckpt`. An empty plan saves the freshly
/// initialized baseline as `base.ckpt` and does nothing else.
pub fn train_stage_plan(
    net_cfg: &NetworkConfig,
    cfg: &TrainConfig,
    samples: &[Sample],
    out_dir: &Path,
) -> Result<PlanOutcome> {
    net_cfg.validate()?;
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics, "epoch,stage,loss,accuracy,lr")?;
    let mut rng = SeededRng::new(cfg.seed);

    if cfg.stage_plan.is_empty() {
        let net = StageNet::build(net_cfg, 0, &mut rng)?;
        let path = out_dir.join("base.ckpt");
        net.store().save_checkpoint(&path)?;
        metrics.flush()?;
        return Ok(PlanOutcome { checkpoints: vec![(0, path)], metrics_path });
    }

    let mut checkpoints = Vec::new();
    let mut prev_ckpt: Option<PathBuf> = None;
    for entry in &cfg.stage_plan {
        let mut net = StageNet::build(net_cfg, entry.stage, &mut rng)?;
        if let Some(prev) = &prev_ckpt {
            let data = load_checkpoint(prev)?;
            net.store_mut().restore(&data);
        }
        let default_policy = if entry.stage == 0 {
            TrainablePolicy::All
        } else {
            TrainablePolicy::NewStageAndHead
        };
        let policy = entry.trainable.clone().unwrap_or(default_policy);
        net.set_trainable(resolve_trainable(&net, &policy)?)?;
        let mut opt = OptState::new(net.store());
        let epochs = entry.epochs.unwrap_or(cfg.epochs);
        let lr0 = entry.lr0.unwrap_or(cfg.lr0);
        let schedule = entry.schedule.unwrap_or(cfg.schedule);
        for epoch in 0..epochs {
            let lr = schedule.lr_at(lr0, epoch);
            let m = train_epoch(&mut net, &mut opt, samples, &mut rng, lr, cfg)?;
            writeln!(
                metrics,
                "{},{},{:.6},{:.4},{:.6}",
                epoch + 1,
                entry.stage,
                m.mean_loss,
                m.accuracy,
                lr
            )?;
            metrics.flush()?;
        }
        let path = out_dir.join(format!("stage{}.ckpt", entry.stage));
        net.store().save_checkpoint(&path)?;
        checkpoints.push((entry.stage, path.clone()));
        prev_ckpt = Some(path);
    }
    metrics.flush()?;
    Ok(PlanOutcome { checkpoints, metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, ShapeKind, SynthSpec};

    fn toy_net_cfg() -> NetworkConfig {
        NetworkConfig::from_json(
            r#"{
                "input_size": [16, 16],
                "input_channels": 1,
                "conv_layers": [
                    { "blocks": [{ "filters": 4, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } },
                    { "blocks": [{ "filters": 6, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } }
                ],
                "deconv_stages": 2,
                "num_classes": 2,
                "task": "multi-label",
                "s": 5.0
            }"#,
        )
        .unwrap()
    }

    fn toy_samples(count: usize, seed: u64) -> Vec<Sample> {
        let spec = SynthSpec {
            image_size: (16, 16),
            channels: 1,
            classes: vec![ShapeKind::Disk],
            objects_per_image: (1, 1),
            scale_range: (3.0, 5.0),
            intensity_range: (0.7, 0.95),
            background_level: 0.1,
            noise_amp: 0.02,
            count,
            seed,
        };
        generate_synthetic(&spec).unwrap()
    }

    fn toy_train_cfg() -> TrainConfig {
        TrainConfig {
            lr0: 0.05,
            schedule: Schedule::Constant,
            epochs: 1,
            momentum: 0.9,
            batch_size: 4,
            seed: 11,
            augment: AugmentCfg::default(),
            stage_plan: vec![],
        }
    }

    #[test]
    fn sgd_hand_cases() {
        let cfg = toy_net_cfg();
        let mut rng = SeededRng::new(90);
        let net = StageNet::build(&cfg, 0, &mut rng).unwrap();
        let mut store = net.store().clone();
        let mut opt = OptState::new(&store);
        let trainable: BTreeSet<String> = ["conv1_1".to_string()].into_iter().collect();

        // momentum 0: p decreases by lr * g
        let p0 = store.param("conv1_1").unwrap().weight.data()[0];
        store.param_mut("conv1_1").unwrap().grad_w.iter_mut().for_each(|g| *g = 1.0);
        store.set_grads_ready();
        sgd_step(&mut store, &mut opt, 0.1, 0.0, &trainable).unwrap();
        let p1 = store.param("conv1_1").unwrap().weight.data()[0];
        assert!((p1 - (p0 - 0.1)).abs() < 1e-15);

        // two steps with constant gradient and momentum 0.9:
        // second delta is -lr*g*(1 + 0.9)
        store.param_mut("conv1_1").unwrap().grad_w.iter_mut().for_each(|g| *g = 1.0);
        store.set_grads_ready();
        let mut opt = OptState::new(&store);
        sgd_step(&mut store, &mut opt, 0.1, 0.9, &trainable).unwrap();
        let p2 = store.param("conv1_1").unwrap().weight.data()[0];
        store.param_mut("conv1_1").unwrap().grad_w.iter_mut().for_each(|g| *g = 1.0);
        store.set_grads_ready();
        sgd_step(&mut store, &mut opt, 0.1, 0.9, &trainable).unwrap();
        let p3 = store.param("conv1_1").unwrap().weight.data()[0];
        assert!((p2 - p3 - 0.1 * 1.9).abs() < 1e-12);

        // frozen parameter untouched
        let head_before = store.param("head").unwrap().weight.data().to_vec();
        store.param_mut("head").unwrap().grad_w.iter_mut().for_each(|g| *g = 1.0);
        store.set_grads_ready();
        sgd_step(&mut store, &mut opt, 0.1, 0.9, &trainable).unwrap();
        assert_eq!(store.param("head").unwrap().weight.data(), &head_before[..]);
    }

    #[test]
    fn sgd_without_grads_is_state_error() {
        let cfg = toy_net_cfg();
        let mut rng = SeededRng::new(91);
        let net = StageNet::build(&cfg, 0, &mut rng).unwrap();
        let mut store = net.store().clone();
        let mut opt = OptState::new(&store);
        let trainable = net.all_param_names();
        assert!(matches!(
            sgd_step(&mut store, &mut opt, 0.1, 0.9, &trainable),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn zero_lr_is_a_pure_evaluation_loop() {
        let cfg = toy_net_cfg();
        let samples = toy_samples(8, 5);
        let mut rng = SeededRng::new(92);
        let mut net = StageNet::build(&cfg, 1, &mut rng).unwrap();
        let mut opt = OptState::new(net.store());
        let before = net.store().data_fingerprint();
        let tcfg = toy_train_cfg();
        let m = train_epoch(&mut net, &mut opt, &samples, &mut rng, 0.0, &tcfg).unwrap();
        assert!(m.mean_loss.is_finite());
        assert_eq!(net.store().data_fingerprint(), before);
    }

    #[test]
    fn loss_decreases_over_first_steps_with_small_lr() {
        let cfg = toy_net_cfg();
        let samples = toy_samples(4, 6);
        let mut rng = SeededRng::new(93);
        let mut net = StageNet::build(&cfg, 0, &mut rng).unwrap();
        let mut opt = OptState::new(net.store());
        let mut tcfg = toy_train_cfg();
        tcfg.batch_size = 4; // one fixed batch per epoch
        tcfg.momentum = 0.0;
        let mut losses = Vec::new();
        for _ in 0..5 {
            let m = train_epoch(&mut net, &mut opt, &samples, &mut rng, 1e-4, &tcfg).unwrap();
            losses.push(m.mean_loss);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0] + 1e-12, "loss did not decrease: {losses:?}");
        }
    }

    #[test]
    fn single_sample_overfit() {
        // Binary task: the ReLU head leaves the pooled scores unbounded, so
        // the softmax cross-entropy can actually reach zero. (Multi-label
        // scores are LSE pools of softmaxed maps, bounded in [0, 1], which
        // floors the squashed BCE away from zero by construction.)
        let mut cfg = toy_net_cfg();
        cfg.task = TaskKind::Binary;
        cfg.num_classes = 2;
        let mut samples = toy_samples(1, 7);
        samples[0].label = crate::data::make_label_vector(&[1], TaskKind::Binary, 2).unwrap();
        let mut rng = SeededRng::new(94);
        let mut net = StageNet::build(&cfg, 0, &mut rng).unwrap();
        let mut opt = OptState::new(net.store());
        let tcfg = toy_train_cfg();
        let mut last = f64::INFINITY;
        for _ in 0..200 {
            last = train_epoch(&mut net, &mut opt, &samples, &mut rng, 0.05, &tcfg).unwrap().mean_loss;
        }
        assert!(last < 0.01, "failed to overfit a single sample: loss {last}");
    }

    #[test]
    fn same_seed_gives_identical_loss_curves() {
        let cfg = toy_net_cfg();
        let samples = toy_samples(8, 8);
        let run = || {
            let mut rng = SeededRng::new(95);
            let mut net = StageNet::build(&cfg, 1, &mut rng).unwrap();
            let mut opt = OptState::new(net.store());
            let tcfg = toy_train_cfg();
            (0..3)
                .map(|_| {
                    train_epoch(&mut net, &mut opt, &samples, &mut rng, 0.02, &tcfg)
                        .unwrap()
                        .mean_loss
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn momentum_off_equals_vanilla_descent() {
        let cfg = toy_net_cfg();
        let mut rng = SeededRng::new(96);
        let net = StageNet::build(&cfg, 0, &mut rng).unwrap();
        let mut a = net.store().clone();
        let mut b = net.store().clone();
        let trainable = net.all_param_names();

        for store in [&mut a, &mut b] {
            store.param_mut("conv1_1").unwrap().grad_w.iter_mut().for_each(|g| *g = 0.37);
            store.set_grads_ready();
        }
        let mut opt = OptState::new(&a);
        sgd_step(&mut a, &mut opt, 0.2, 0.0, &trainable).unwrap();
        // vanilla by hand
        let g = 0.37;
        for v in b.param_mut("conv1_1").unwrap().weight.data_mut().iter_mut() {
            *v -= 0.2 * g;
        }
        assert_eq!(
            a.param("conv1_1").unwrap().weight.data(),
            b.param("conv1_1").unwrap().weight.data()
        );
    }

    #[test]
    fn empty_plan_is_a_noop_returning_base_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_net_cfg();
        let samples = toy_samples(4, 9);
        let tcfg = toy_train_cfg();
        let out = train_stage_plan(&cfg, &tcfg, &samples, dir.path()).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert!(out.checkpoints[0].1.ends_with("base.ckpt"));
        assert!(out.checkpoints[0].1.exists());
    }

    #[test]
    fn staged_plan_chains_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_net_cfg();
        let samples = toy_samples(8, 10);
        let mut tcfg = toy_train_cfg();
        tcfg.stage_plan = vec![
            StagePlanEntry { stage: 0, epochs: Some(2), lr0: Some(0.02), schedule: None, trainable: None },
            StagePlanEntry { stage: 1, epochs: Some(1), lr0: Some(0.01), schedule: None, trainable: None },
        ];
        let out = train_stage_plan(&cfg, &tcfg, &samples, dir.path()).unwrap();
        assert_eq!(out.checkpoints.len(), 2);
        assert!(dir.path().join("stage0.ckpt").exists());
        assert!(dir.path().join("stage1.ckpt").exists());

        // conv1 is frozen at stage 1 under the default policy, so its bytes
        // survive from the stage-0 checkpoint into stage1.ckpt.
        let s0 = load_checkpoint(&dir.path().join("stage0.ckpt")).unwrap();
        let s1 = load_checkpoint(&dir.path().join("stage1.ckpt")).unwrap();
        assert_eq!(s0.records.get("conv1_1").unwrap().1, s1.records.get("conv1_1").unwrap().1);
        // the tied partner (conv2) did train at stage 1
        assert_ne!(s0.records.get("conv2_1").unwrap().1, s1.records.get("conv2_1").unwrap().1);

        let metrics = std::fs::read_to_string(&out.metrics_path).unwrap();
        assert!(metrics.starts_with("epoch,stage,loss,accuracy,lr\n"));
        assert_eq!(metrics.lines().count(), 1 + 3);
    }

    #[test]
    fn schedule_halves() {
        let s = Schedule::HalveEvery(20);
        assert_eq!(s.lr_at(0.002, 0), 0.002);
        assert_eq!(s.lr_at(0.002, 19), 0.002);
        assert_eq!(s.lr_at(0.002, 20), 0.001);
        assert_eq!(s.lr_at(0.002, 40), 0.0005);
        assert_eq!(Schedule::Constant.lr_at(0.001, 500), 0.001);
    }
}
