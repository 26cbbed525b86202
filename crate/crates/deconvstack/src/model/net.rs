//! Staged network assembly, forward pass and backpropagation.
//!
//! A `StageNet` at stage 0 is the plain convolutional baseline: conv stack,
//! normalize/expand of the top feature map, class-map head, channel softmax
//! (or ReLU for the binary task) and log-sum-exp pooling. Stage `j >= 1`
//! inserts deconvolution stages 1..=j between the conv stack and the head;
//! stage `j` unpools through the switches of conv layer `L_c + 1 - j` and
//! convolves with tied views of that layer's kernels, block for block in
//! reverse order. The stack then concatenates the top conv map and every
//! deconvolution output, normalized and expanded to the last deconvolution
//! resolution.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::layers::{
    channel_softmax, channel_softmax_backward, classmap_forward, concat_maps, conv_backward_parts,
    expand_backward, expand_map, lse_pool, lse_pool_backward, maxpool_backward, maxpool_forward,
    normalize_backward, normalize_map, relu, relu_backward, split_channels, unpool_backward,
    unpool_forward, ConvWeight, PoolSwitches,
};
use crate::tensor::{SeededRng, Tensor4};

use super::config::{NetworkConfig, TaskKind};
use super::store::TiedParamStore;

/// Epsilon inside the per-map normalization denominator.
pub const NORM_EPS: f64 = 1e-5;

pub fn conv_param_name(layer0: usize, block0: usize) -> String {
    format!("conv{}_{}", layer0 + 1, block0 + 1)
}

pub fn deconv_param_name(stage_j: usize, block0: usize) -> String {
    format!("deconv{}_{}", stage_j, block0 + 1)
}

/// Activations and switches kept from the last forward pass.
#[derive(Debug, Clone)]
struct ForwardCache {
    input: Tensor4,
    /// Pre-ReLU output of every conv block, `[layer][block]`.
    conv_pre: Vec<Vec<Tensor4>>,
    /// Post-ReLU outputs feeding blocks 1.. of each layer, `[layer][block-1]`.
    conv_mid: Vec<Vec<Tensor4>>,
    /// Post-pool layer outputs `h_c`.
    conv_out: Vec<Tensor4>,
    switches: Vec<Option<PoolSwitches>>,
    /// Unpooled input of each deconv stage (feeds the first executed block).
    deconv_unpooled: Vec<Tensor4>,
    /// Pre-ReLU outputs per deconv stage in execution order.
    deconv_pre: Vec<Vec<Tensor4>>,
    deconv_mid: Vec<Vec<Tensor4>>,
    /// Stage outputs `h_d`.
    deconv_out: Vec<Tensor4>,
    stacked: Tensor4,
    head_pre: Tensor4,
    maps: Tensor4,
    y_pred: Tensor4,
}

/// A network built at a fixed deconvolution stage.
#[derive(Debug, Clone)]
pub struct StageNet {
    cfg: NetworkConfig,
    stage: usize,
    store: TiedParamStore,
    trainable: BTreeSet<String>,
    cache: Option<ForwardCache>,
}

impl StageNet {
    /// Assemble the network for `stage`, drawing fresh parameters from `rng`.
    ///
    /// Convolution kernels are drawn first in layer/block order, then the
    /// head, so conv initializations are identical across stages for the
    /// same seed and carry over cleanly through checkpoints.
    pub fn build(cfg: &NetworkConfig, stage: usize, rng: &mut SeededRng) -> Result<StageNet> {
        cfg.validate()?;
        if stage > cfg.deconv_stages {
            return Err(Error::config(format!(
                "stage {stage} exceeds configured deconv_stages {}",
                cfg.deconv_stages
            )));
        }
        let mut store = TiedParamStore::new();
        let mut in_c = cfg.input_channels;
        for (l, layer) in cfg.conv_layers.iter().enumerate() {
            for (b, blk) in layer.blocks.iter().enumerate() {
                store.insert_param(
                    &conv_param_name(l, b),
                    ConvWeight::glorot(rng, blk.filters, in_c, blk.kh, blk.kw)?,
                );
                in_c = blk.filters;
            }
        }
        store.insert_param(
            "head",
            ConvWeight::glorot(
                rng,
                cfg.num_classes,
                cfg.head_in_channels(stage),
                cfg.head_kernel,
                cfg.head_kernel,
            )?,
        );
        for j in 1..=stage {
            let pl = cfg.partner_layer(j);
            for b in 0..cfg.conv_layers[pl].blocks.len() {
                let out_len = block_in_channels(cfg, pl, b);
                store.insert_deconv_bias(&deconv_param_name(j, b), out_len);
                store.register_tie(&deconv_param_name(j, b), &conv_param_name(pl, b), cfg.tied_flip)?;
            }
        }

        let mut net = StageNet { cfg: cfg.clone(), stage, store, trainable: BTreeSet::new(), cache: None };
        let mut all = net.all_param_names();
        for frozen in &net.cfg.frozen.clone() {
            all.remove(frozen);
            all.remove(&format!("{frozen}.bias"));
        }
        net.trainable = all;
        Ok(net)
    }

    /// Every trainable-name this net recognizes: kernels, their `.bias`
    /// twins, and deconvolution `.bias` entries.
    pub fn all_param_names(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for name in self.store.param_names() {
            out.insert(name.clone());
            out.insert(format!("{name}.bias"));
        }
        for name in self.store.deconv_bias_names() {
            out.insert(format!("{name}.bias"));
        }
        out
    }

    pub fn set_trainable(&mut self, names: BTreeSet<String>) -> Result<()> {
        let all = self.all_param_names();
        for n in &names {
            if !all.contains(n) {
                return Err(Error::config(format!("unknown trainable parameter {n}")));
            }
        }
        self.trainable = names;
        Ok(())
    }

    pub fn trainable(&self) -> &BTreeSet<String> {
        &self.trainable
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn store(&self) -> &TiedParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut TiedParamStore {
        &mut self.store
    }

    /// Materialized tied kernel view for a registered deconvolution block.
    pub fn make_tied_view(&self, deconv_name: &str) -> Result<ConvWeight> {
        self.store.make_tied_view(deconv_name)
    }

    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (_, c, h, w) = x.dims();
        if c != self.cfg.input_channels || (h, w) != self.cfg.input_size {
            return Err(Error::shape(format!(
                "input dims {:?} do not match config (channels {}, size {:?})",
                x.dims(),
                self.cfg.input_channels,
                self.cfg.input_size
            )));
        }
        Ok(())
    }

    /// Run the full graph; returns `(y_pred, maps)` where `y_pred` is the
    /// `(n, K, 1, 1)` pooled score vector and `maps` the per-class activation
    /// maps after the task nonlinearity. Caches everything backward needs.
    pub fn forward(&mut self, x: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        self.check_input(x)?;
        let num_layers = self.cfg.num_conv_layers();
        let mut conv_pre: Vec<Vec<Tensor4>> = Vec::with_capacity(num_layers);
        let mut conv_mid: Vec<Vec<Tensor4>> = Vec::with_capacity(num_layers);
        let mut conv_out: Vec<Tensor4> = Vec::with_capacity(num_layers);
        let mut switches: Vec<Option<PoolSwitches>> = Vec::with_capacity(num_layers);

        let mut cur = x.clone();
        for (l, layer) in self.cfg.conv_layers.iter().enumerate() {
            let mut pres = Vec::with_capacity(layer.blocks.len());
            let mut mids = Vec::new();
            for b in 0..layer.blocks.len() {
                let name = conv_param_name(l, b);
                let w = &self.store.param(&name).expect("registered conv block").weight;
                let pre = crate::layers::conv_forward(&cur, w).map_err(|e| e.in_layer(&name))?;
                let post = relu(&pre);
                pres.push(pre);
                if b + 1 < layer.blocks.len() {
                    mids.push(post.clone());
                }
                cur = post;
            }
            conv_pre.push(pres);
            conv_mid.push(mids);
            if let Some(p) = &layer.pool {
                let (pooled, sw) = maxpool_forward(&cur, (p.kh, p.kw), (p.stride, p.stride))
                    .map_err(|e| e.in_layer(&format!("pool{}", l + 1)))?;
                cur = pooled;
                switches.push(Some(sw));
            } else {
                switches.push(None);
            }
            conv_out.push(cur.clone());
        }

        let mut deconv_unpooled: Vec<Tensor4> = Vec::with_capacity(self.stage);
        let mut deconv_pre: Vec<Vec<Tensor4>> = Vec::with_capacity(self.stage);
        let mut deconv_mid: Vec<Vec<Tensor4>> = Vec::with_capacity(self.stage);
        let mut deconv_out: Vec<Tensor4> = Vec::with_capacity(self.stage);
        for j in 1..=self.stage {
            let pl = self.cfg.partner_layer(j);
            let sw = switches[pl].as_ref().expect("validated pooling");
            cur = unpool_forward(&cur, sw).map_err(|e| e.in_layer(&format!("unpool{j}")))?;
            deconv_unpooled.push(cur.clone());
            let nblocks = self.cfg.conv_layers[pl].blocks.len();
            let mut pres = Vec::with_capacity(nblocks);
            let mut mids = Vec::new();
            for (e, b) in (0..nblocks).rev().enumerate() {
                let name = deconv_param_name(j, b);
                let view = self.store.make_tied_view(&name)?;
                let pre = crate::layers::deconv_forward(&cur, &view).map_err(|e| e.in_layer(&name))?;
                let post = relu(&pre);
                pres.push(pre);
                if e + 1 < nblocks {
                    mids.push(post.clone());
                }
                cur = post;
            }
            deconv_pre.push(pres);
            deconv_mid.push(mids);
            deconv_out.push(cur.clone());
        }

        // Normalize, expand to the stack resolution, concatenate.
        let (th, tw) = self.cfg.stack_size(self.stage);
        let mut expanded = Vec::with_capacity(1 + self.stage);
        {
            let mut sources: Vec<&Tensor4> = vec![&conv_out[num_layers - 1]];
            sources.extend(deconv_out.iter());
            for (i, src) in sources.into_iter().enumerate() {
                let normed = normalize_map(src, NORM_EPS).map_err(|e| e.in_layer(&format!("stack{i}")))?;
                expanded
                    .push(expand_map(&normed, th, tw).map_err(|e| e.in_layer(&format!("stack{i}")))?);
            }
        }
        let stacked = concat_maps(&expanded.iter().collect::<Vec<_>>())?;

        let head = &self.store.param("head").expect("head registered").weight;
        let head_pre = classmap_forward(&stacked, head).map_err(|e| e.in_layer("head"))?;
        let maps = match self.cfg.task {
            TaskKind::MultiLabel => channel_softmax(&head_pre)?,
            TaskKind::Binary => relu(&head_pre),
        };
        let y_pred = lse_pool(&maps, self.cfg.s)?;

        self.cache = Some(ForwardCache {
            input: x.clone(),
            conv_pre,
            conv_mid,
            conv_out,
            switches,
            deconv_unpooled,
            deconv_pre,
            deconv_mid,
            deconv_out,
            stacked,
            head_pre,
            maps: maps.clone(),
            y_pred: y_pred.clone(),
        });
        Ok((y_pred, maps))
    }

    /// Backpropagate `d_y` (gradient w.r.t. the pooled score vector) into
    /// the store's gradient accumulators. Only parameters in the trainable
    /// set receive gradients; tied kernels accumulate both the conv-path and
    /// the deconv-path contributions.
    pub fn backward(&mut self, d_y: &Tensor4) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::state("backward called before forward".to_string()))?;
        let res = self.backward_impl(&cache, d_y);
        self.cache = Some(cache);
        res
    }

    fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    fn backward_impl(&mut self, cache: &ForwardCache, d_y: &Tensor4) -> Result<()> {
        if d_y.dims() != cache.y_pred.dims() {
            return Err(Error::shape(format!(
                "d_y dims {:?} do not match y_pred {:?}",
                d_y.dims(),
                cache.y_pred.dims()
            )));
        }
        self.store.zero_grads();
        let num_layers = self.cfg.num_conv_layers();

        let d_maps = lse_pool_backward(&cache.maps, self.cfg.s, d_y)?;
        let d_head_pre = match self.cfg.task {
            TaskKind::MultiLabel => channel_softmax_backward(&cache.maps, &d_maps)?,
            TaskKind::Binary => relu_backward(&cache.head_pre, &d_maps)?,
        };

        let head_w = self.store.param("head").expect("head registered").weight.clone();
        let need_head = self.is_trainable("head") || self.is_trainable("head.bias");
        let (d_stacked, dw, db) =
            conv_backward_parts(&cache.stacked, &head_w, &d_head_pre, true, need_head)?;
        if self.is_trainable("head") {
            self.store.accumulate_param_grad("head", dw.as_deref(), None)?;
        }
        if self.is_trainable("head.bias") {
            self.store.accumulate_param_grad("head", None, db.as_deref())?;
        }

        // Stack gradient back to each source map.
        let counts = self.cfg.stack_channels(self.stage);
        let pieces = split_channels(&d_stacked.expect("requested"), &counts)?;
        let mut d_sources = Vec::with_capacity(pieces.len());
        for (i, piece) in pieces.iter().enumerate() {
            let src: &Tensor4 =
                if i == 0 { &cache.conv_out[num_layers - 1] } else { &cache.deconv_out[i - 1] };
            let d_norm = expand_backward(src.dims(), piece)?;
            d_sources.push(normalize_backward(src, NORM_EPS, &d_norm)?);
        }

        // Deconvolution chain, top stage first.
        let mut d_chain: Option<Tensor4> = None;
        for j in (1..=self.stage).rev() {
            let mut d = match d_chain.take() {
                Some(c) => c.ew_add(&d_sources[j])?,
                None => d_sources[j].clone(),
            };
            let pl = self.cfg.partner_layer(j);
            let nblocks = self.cfg.conv_layers[pl].blocks.len();
            for e in (0..nblocks).rev() {
                let b = nblocks - 1 - e; // partner block of execution slot e
                let name = deconv_param_name(j, b);
                let kernel_name = conv_param_name(pl, b);
                let bias_name = format!("{name}.bias");
                d = relu_backward(&cache.deconv_pre[j - 1][e], &d)?;
                let view = self.store.make_tied_view(&name)?;
                let input: &Tensor4 = if e == 0 {
                    &cache.deconv_unpooled[j - 1]
                } else {
                    &cache.deconv_mid[j - 1][e - 1]
                };
                let need_w = self.is_trainable(&kernel_name) || self.is_trainable(&bias_name);
                let (d_in, dw_view, db_view) = conv_backward_parts(input, &view, &d, true, need_w)
                    .map_err(|err| err.in_layer(&name))?;
                if self.is_trainable(&kernel_name) {
                    self.store.accumulate_tied_grad(&name, dw_view.as_deref().expect("requested"))?;
                }
                if self.is_trainable(&bias_name) {
                    self.store
                        .accumulate_deconv_bias_grad(&name, db_view.as_deref().expect("requested"))?;
                }
                d = d_in.expect("requested");
            }
            let sw = cache.switches[pl].as_ref().expect("validated pooling");
            d_chain = Some(unpool_backward(sw, &d)?);
        }

        // Convolution stack, only down to the lowest trainable layer.
        let lowest = (0..num_layers).find(|l| {
            (0..self.cfg.conv_layers[*l].blocks.len()).any(|b| {
                let k = conv_param_name(*l, b);
                self.is_trainable(&k) || self.is_trainable(&format!("{k}.bias"))
            })
        });
        let Some(lowest) = lowest else {
            self.store.set_grads_ready();
            return Ok(());
        };
        let mut d = match d_chain.take() {
            Some(c) => c.ew_add(&d_sources[0])?,
            None => d_sources[0].clone(),
        };
        'layers: for l in (lowest..num_layers).rev() {
            if let Some(sw) = &cache.switches[l] {
                d = maxpool_backward(sw, &d)?;
            }
            let nblocks = self.cfg.conv_layers[l].blocks.len();
            for b in (0..nblocks).rev() {
                let name = conv_param_name(l, b);
                d = relu_backward(&cache.conv_pre[l][b], &d)?;
                let input: &Tensor4 = if b == 0 {
                    if l == 0 {
                        &cache.input
                    } else {
                        &cache.conv_out[l - 1]
                    }
                } else {
                    &cache.conv_mid[l][b - 1]
                };
                let bias_name = format!("{name}.bias");
                let need_w = self.is_trainable(&name) || self.is_trainable(&bias_name);
                let need_in = !(l == lowest && b == 0);
                let w = self.store.param(&name).expect("registered conv block").weight.clone();
                let (d_in, dw, db) = conv_backward_parts(input, &w, &d, need_in, need_w)
                    .map_err(|err| err.in_layer(&name))?;
                if self.is_trainable(&name) {
                    self.store.accumulate_param_grad(&name, dw.as_deref(), None)?;
                }
                if self.is_trainable(&bias_name) {
                    self.store.accumulate_param_grad(&name, None, db.as_deref())?;
                }
                match d_in {
                    Some(t) => d = t,
                    None => break 'layers,
                }
            }
        }
        self.store.set_grads_ready();
        Ok(())
    }

    /// Distance of the cached forward pass from the nearest nondifferentiable
    /// point: the minimum over all ReLU pre-activation magnitudes, all pooling
    /// window (max minus runner-up) gaps for windows with a positive max, and
    /// the scores' clearance from the loss clamp. Central finite differences
    /// are only trustworthy when this margin comfortably exceeds the probe's
    /// effect on the activations; gradient suites reject operating points
    /// with a small margin instead of loosening tolerances.
    pub fn smoothness_margin(&self) -> Result<f64> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("no cached forward pass".to_string()))?;
        let mut margin = f64::INFINITY;
        for pres in cache.conv_pre.iter().chain(cache.deconv_pre.iter()) {
            for t in pres {
                for v in t.data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        if self.cfg.task == TaskKind::Binary {
            for v in cache.head_pre.data() {
                margin = margin.min(v.abs());
            }
        }
        for (l, sw) in cache.switches.iter().enumerate() {
            let Some(sw) = sw else { continue };
            let pool_in = relu(cache.conv_pre[l].last().expect("layer has blocks"));
            let (n, c, h, w) = pool_in.dims();
            let (kh, kw) = sw.window();
            for ni in 0..n {
                for ci in 0..c {
                    let plane = pool_in.plane(ni, ci);
                    for oy in 0..h / kh {
                        for ox in 0..w / kw {
                            let mut best = f64::NEG_INFINITY;
                            let mut second = f64::NEG_INFINITY;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let v = plane[(oy * kh + ky) * w + ox * kw + kx];
                                    if v > best {
                                        second = best;
                                        best = v;
                                    } else if v > second {
                                        second = v;
                                    }
                                }
                            }
                            // Only a race between two positive values can
                            // flip a switch under a small probe: clamped
                            // runner-ups are pinned at zero and their own
                            // pre-activations are guarded above.
                            if best > 0.0 && second > 0.0 {
                                margin = margin.min(best - second);
                            }
                        }
                    }
                }
            }
        }
        if self.cfg.task == TaskKind::MultiLabel {
            // clearance from the BCE probability clamp; negative means the
            // score already sits inside the clamped band
            for y in cache.y_pred.data() {
                margin = margin.min((y - 1e-6).min(1.0 - 1e-6 - y));
            }
        }
        Ok(margin)
    }

    /// Cached output of a named layer from the last forward pass.
    /// Names: `input`, `conv<l>` (post-pool), `deconv<j>`, `stacked`, `maps`.
    pub fn layer_output(&self, name: &str) -> Result<&Tensor4> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::state("no cached forward pass".to_string()))?;
        if name == "input" {
            return Ok(&cache.input);
        }
        if name == "stacked" {
            return Ok(&cache.stacked);
        }
        if name == "maps" {
            return Ok(&cache.maps);
        }
        if let Some(l) = name.strip_prefix("conv").and_then(|s| s.parse::<usize>().ok()) {
            if l >= 1 && l <= cache.conv_out.len() {
                return Ok(&cache.conv_out[l - 1]);
            }
        }
        if let Some(j) = name.strip_prefix("deconv").and_then(|s| s.parse::<usize>().ok()) {
            if j >= 1 && j <= cache.deconv_out.len() {
                return Ok(&cache.deconv_out[j - 1]);
            }
        }
        let mut available: Vec<String> = vec!["input".into(), "stacked".into(), "maps".into()];
        available.extend((1..=cache.conv_out.len()).map(|l| format!("conv{l}")));
        available.extend((1..=cache.deconv_out.len()).map(|j| format!("deconv{j}")));
        Err(Error::input(format!("unknown layer {name}; available: {}", available.join(", "))))
    }
}

fn block_in_channels(cfg: &NetworkConfig, layer0: usize, block0: usize) -> usize {
    if block0 == 0 {
        cfg.layer_in_channels(layer0)
    } else {
        cfg.conv_layers[layer0].blocks[block0 - 1].filters
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{bce_multilabel_loss, categorical_ce_loss};
    use crate::reference;

    fn toy_config() -> NetworkConfig {
        NetworkConfig::from_json(
            r#"{
                "input_size": [16, 16],
                "input_channels": 1,
                "conv_layers": [
                    { "blocks": [{ "filters": 4, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } },
                    { "blocks": [{ "filters": 6, "kh": 3, "kw": 3 }], "pool": { "kh": 2, "kw": 2, "stride": 2 } }
                ],
                "deconv_stages": 2,
                "num_classes": 3,
                "task": "multi-label",
                "s": 5.0
            }"#,
        )
        .unwrap()
    }

    fn toy_targets(n: usize, k: usize, rng: &mut SeededRng) -> Tensor4 {
        let mut bits = vec![0.0; n * k];
        for ni in 0..n {
            bits[ni * k] = 1.0;
            bits[ni * k + 1 + rng.below(k - 1)] = 1.0;
        }
        Tensor4::new((n, k, 1, 1), bits).unwrap()
    }

    #[test]
    fn stage_geometry_and_param_sets() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(80);
        let net0 = StageNet::build(&cfg, 0, &mut rng).unwrap();
        assert_eq!(net0.store().param("head").unwrap().weight.kernel_dims(), (3, 6, 1, 1));

        let mut rng = SeededRng::new(80);
        let net2 = StageNet::build(&cfg, 2, &mut rng).unwrap();
        // stack: conv2 (6) + deconv1 (4) + deconv2 (1)
        assert_eq!(net2.store().param("head").unwrap().weight.kernel_dims(), (3, 11, 1, 1));
        // same seed: conv parameters identical across stages
        assert_eq!(
            net0.store().param("conv1_1").unwrap().weight.data(),
            net2.store().param("conv1_1").unwrap().weight.data()
        );
        // stage 2 parameters are a superset apart from the head
        let p0 = net0.all_param_names();
        let p2 = net2.all_param_names();
        assert!(p0.iter().all(|n| p2.contains(n)));
        assert!(p2.contains("deconv1_1.bias") && p2.contains("deconv2_1.bias"));
    }

    #[test]
    fn forward_softmax_invariant_and_determinism() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(81);
        let mut net = StageNet::build(&cfg, 1, &mut rng).unwrap();
        let x = Tensor4::uniform(&mut rng, (2, 1, 16, 16), 0.0, 1.0).unwrap();
        let (y1, maps) = net.forward(&x).unwrap();
        let (n, k, h, w) = maps.dims();
        assert_eq!((n, k), (2, 3));
        for ni in 0..n {
            for yy in 0..h {
                for xx in 0..w {
                    let sum: f64 = (0..k).map(|c| maps.get(ni, c, yy, xx)).sum();
                    assert!((sum - 1.0).abs() < 1e-12);
                }
            }
        }
        let (y2, _) = net.forward(&x).unwrap();
        assert_eq!(y1.data(), y2.data());

        // identical rows for identical images in a batch
        let one = Tensor4::uniform(&mut rng, (1, 1, 16, 16), 0.0, 1.0).unwrap();
        let mut two = Vec::new();
        two.extend_from_slice(one.data());
        two.extend_from_slice(one.data());
        let pair = Tensor4::new((2, 1, 16, 16), two).unwrap();
        let (y, _) = net.forward(&pair).unwrap();
        assert_eq!(&y.data()[..3], &y.data()[3..6]);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(82);
        let mut net = StageNet::build(&cfg, 0, &mut rng).unwrap();
        let d_y = Tensor4::zeros((1, 3, 1, 1)).unwrap();
        assert!(matches!(net.backward(&d_y), Err(Error::State(_))));
    }

    #[test]
    fn zero_dy_zeroes_all_grads() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(83);
        let mut net = StageNet::build(&cfg, 2, &mut rng).unwrap();
        let x = Tensor4::uniform(&mut rng, (2, 1, 16, 16), 0.0, 1.0).unwrap();
        net.forward(&x).unwrap();
        net.backward(&Tensor4::zeros((2, 3, 1, 1)).unwrap()).unwrap();
        for name in net.store().param_names().cloned().collect::<Vec<_>>() {
            let e = net.store().param(&name).unwrap();
            assert!(e.grad_w.iter().all(|v| *v == 0.0));
            assert!(e.grad_b.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn frozen_params_receive_no_grads() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(84);
        let mut net = StageNet::build(&cfg, 1, &mut rng).unwrap();
        let mut names = net.all_param_names();
        names.remove("conv1_1");
        names.remove("conv1_1.bias");
        net.set_trainable(names).unwrap();
        let x = Tensor4::uniform(&mut rng, (2, 1, 16, 16), 0.0, 1.0).unwrap();
        let (y, _) = net.forward(&x).unwrap();
        let t = toy_targets(2, 3, &mut rng);
        let (_, d_y) = bce_multilabel_loss(&y, &t).unwrap();
        net.backward(&d_y).unwrap();
        let e = net.store().param("conv1_1").unwrap();
        assert!(e.grad_w.iter().all(|v| *v == 0.0));
        assert!(e.grad_b.iter().all(|v| *v == 0.0));
        let e2 = net.store().param("conv2_1").unwrap();
        assert!(e2.grad_w.iter().any(|v| *v != 0.0));
    }

    /// End-to-end gradient check against central finite differences on the
    /// full stage-1 loss, covering the tied-kernel shared path. The seed is
    /// fixed to a smooth operating point (no ReLU pre-activation or pooling
    /// tie close enough to flip under the probe step).
    #[test]
    fn whole_network_gradient_matches_fd() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(17);
        let mut net = StageNet::build(&cfg, 1, &mut rng).unwrap();
        let x = Tensor4::uniform(&mut rng, (1, 1, 16, 16), 0.0, 1.0).unwrap();
        let t = toy_targets(1, 3, &mut rng);

        let (y, _) = net.forward(&x).unwrap();
        let (_, d_y) = bce_multilabel_loss(&y, &t).unwrap();
        net.backward(&d_y).unwrap();

        let names: Vec<String> = net.store().param_names().cloned().collect();
        for name in names {
            let (analytic_w, analytic_b) = {
                let e = net.store().param(&name).unwrap();
                (e.grad_w.clone(), e.grad_b.clone())
            };
            let base = net.store().param(&name).unwrap().weight.data().to_vec();
            let fd_w = reference::fd_grad(&base, 1e-5, |vals| {
                let mut probe = net.clone();
                probe.store_mut().param_mut(&name).unwrap().weight.data_mut().copy_from_slice(vals);
                let (y, _) = probe.forward(&x).unwrap();
                bce_multilabel_loss(&y, &t).unwrap().0
            });
            let err = reference::max_rel_err(&analytic_w, &fd_w);
            assert!(err < 1e-4, "{name} kernel grad rel err {err}");

            let base_b = net.store().param(&name).unwrap().weight.bias().to_vec();
            let fd_b = reference::fd_grad(&base_b, 1e-5, |vals| {
                let mut probe = net.clone();
                probe.store_mut().param_mut(&name).unwrap().weight.bias_mut().copy_from_slice(vals);
                let (y, _) = probe.forward(&x).unwrap();
                bce_multilabel_loss(&y, &t).unwrap().0
            });
            let err = reference::max_rel_err(&analytic_b, &fd_b);
            assert!(err < 1e-4, "{name} bias grad rel err {err}");
        }

        let bias_names: Vec<String> = net.store().deconv_bias_names().cloned().collect();
        for name in bias_names {
            let analytic = net.store().deconv_bias(&name).unwrap().grad.clone();
            let base = net.store().deconv_bias(&name).unwrap().bias.clone();
            let fd = reference::fd_grad(&base, 1e-5, |vals| {
                let mut probe = net.clone();
                probe.store_mut().deconv_bias_mut(&name).unwrap().bias.copy_from_slice(vals);
                let (y, _) = probe.forward(&x).unwrap();
                bce_multilabel_loss(&y, &t).unwrap().0
            });
            let err = reference::max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "{name} deconv bias grad rel err {err}");
        }
    }

    #[test]
    fn binary_task_head_gradient_matches_fd() {
        let mut cfg = toy_config();
        cfg.task = TaskKind::Binary;
        cfg.num_classes = 2;
        let mut rng = SeededRng::new(19);
        let mut net = StageNet::build(&cfg, 1, &mut rng).unwrap();
        let x = Tensor4::uniform(&mut rng, (1, 1, 16, 16), 0.0, 1.0).unwrap();
        let t = Tensor4::new((1, 2, 1, 1), vec![0.0, 1.0]).unwrap();

        let (y, _) = net.forward(&x).unwrap();
        let (_, d_y) = categorical_ce_loss(&y, &t).unwrap();
        net.backward(&d_y).unwrap();

        let analytic = net.store().param("conv2_1").unwrap().grad_w.clone();
        let base = net.store().param("conv2_1").unwrap().weight.data().to_vec();
        let fd = reference::fd_grad(&base, 1e-5, |vals| {
            let mut probe = net.clone();
            probe.store_mut().param_mut("conv2_1").unwrap().weight.data_mut().copy_from_slice(vals);
            let (y, _) = probe.forward(&x).unwrap();
            categorical_ce_loss(&y, &t).unwrap().0
        });
        let err = reference::max_rel_err(&analytic, &fd);
        assert!(err < 1e-4, "tied conv2_1 grad rel err {err}");
    }

    #[test]
    fn layer_output_names() {
        let cfg = toy_config();
        let mut rng = SeededRng::new(85);
        let mut net = StageNet::build(&cfg, 2, &mut rng).unwrap();
        let x = Tensor4::uniform(&mut rng, (1, 1, 16, 16), 0.0, 1.0).unwrap();
        net.forward(&x).unwrap();
        assert_eq!(net.layer_output("conv2").unwrap().dims(), (1, 6, 4, 4));
        assert_eq!(net.layer_output("deconv1").unwrap().dims(), (1, 4, 8, 8));
        assert_eq!(net.layer_output("deconv2").unwrap().dims(), (1, 1, 16, 16));
        assert!(matches!(net.layer_output("conv9"), Err(Error::Input(_))));
    }
}
