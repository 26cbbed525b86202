//! Declarative network architecture.
//!
//! A config lists the convolution layers (each a run of conv blocks plus an
//! optional pooling), the number of active deconvolution stages, and the
//! head/task settings. The tie map is fixed by construction: deconvolution
//! stage `j` is tied with convolution layer `L_c + 1 - j` block for block,
//! consumes that layer's pooling switches, and applies the partner blocks
//! in reverse order.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// One convolution block: `filters` kernels of `kh x kw`, stride 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvBlockCfg {
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

/// Pooling geometry. Window and stride must agree (non-overlapping tiling).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PoolCfg {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

/// A convolution layer: consecutive blocks followed by an optional pooling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ConvLayerCfg {
    pub blocks: Vec<ConvBlockCfg>,
    #[serde(default)]
    pub pool: Option<PoolCfg>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Multi-hot labels with a background class at index 0; channel softmax
    /// head and a sum of per-class binary cross-entropies.
    MultiLabel,
    /// Two-class one-hot labels; elementwise ReLU head and softmaxed scores
    /// under categorical cross-entropy.
    Binary,
}

fn one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_head_kernel() -> usize {
    1
}
fn default_channels() -> usize {
    1
}

/// Full network description; see the shipped presets for examples.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    /// Input spatial size `(h, w)`.
    pub input_size: (usize, usize),
    #[serde(default = "default_channels")]
    pub input_channels: usize,
    pub conv_layers: Vec<ConvLayerCfg>,
    /// Number of deconvolution stages available (`L_d`). A `StageNet` may be
    /// built at any stage from 0 (no deconvolution) up to this count.
    pub deconv_stages: usize,
    /// Number of class maps `K` (multi-label counts include background).
    pub num_classes: usize,
    pub task: TaskKind,
    /// Log-sum-exp similarity parameter.
    pub s: f64,
    /// Adjoint tie reading: rotate the tied kernel 180 degrees in addition to
    /// swapping channel axes. Plain axis swap when false.
    #[serde(default = "default_true")]
    pub tied_flip: bool,
    /// Head kernel side (1 keeps per-pixel classification local).
    #[serde(default = "default_head_kernel")]
    pub head_kernel: usize,
    /// Parameter names excluded from training regardless of policy.
    #[serde(default)]
    pub frozen: Vec<String>,
}

/// Per-layer derived geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGeom {
    pub out_channels: usize,
    /// Spatial size before the layer's pooling.
    pub pre_pool: (usize, usize),
    /// Spatial size after the layer's pooling (equal to `pre_pool` when the
    /// layer has none).
    pub post_pool: (usize, usize),
}

impl NetworkConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: NetworkConfig =
            serde_json::from_str(json).map_err(|e| Error::config(format!("bad network config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::config("no convolution layers".to_string()));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes {} must be >= 2", self.num_classes)));
        }
        if self.task == TaskKind::Binary && self.num_classes != 2 {
            return Err(Error::config("binary task requires num_classes == 2".to_string()));
        }
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::config(format!("s must be positive and finite, got {}", self.s)));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::config(format!("head kernel {} must be odd", self.head_kernel)));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input_channels must be >= 1".to_string()));
        }
        let mut pool_product = (1usize, 1usize);
        for (l, layer) in self.conv_layers.iter().enumerate() {
            if layer.blocks.is_empty() {
                return Err(Error::config(format!("conv layer {} has no blocks", l + 1)));
            }
            for b in &layer.blocks {
                if b.filters == 0 {
                    return Err(Error::config(format!("conv layer {} has a zero-filter block", l + 1)));
                }
                if b.kh % 2 == 0 || b.kw % 2 == 0 {
                    return Err(Error::config(format!(
                        "conv layer {} kernel {}x{} must be odd",
                        l + 1,
                        b.kh,
                        b.kw
                    )));
                }
                if b.stride != 1 {
                    return Err(Error::config(format!(
                        "conv layer {} stride {} unsupported; all convolutions are stride 1",
                        l + 1,
                        b.stride
                    )));
                }
            }
            if let Some(p) = &layer.pool {
                if p.kh != p.stride || p.kw != p.stride {
                    return Err(Error::config(format!(
                        "conv layer {} pool {}x{} stride {} must tile exactly (window == stride)",
                        l + 1,
                        p.kh,
                        p.kw,
                        p.stride
                    )));
                }
                pool_product.0 *= p.stride;
                pool_product.1 *= p.stride;
            }
        }
        if self.input_size.0 % pool_product.0 != 0 || self.input_size.1 % pool_product.1 != 0 {
            return Err(Error::config(format!(
                "input size {:?} not divisible by total pool stride {:?}",
                self.input_size, pool_product
            )));
        }
        // Each deconvolution stage unpools through its partner's switches.
        let num_layers = self.conv_layers.len();
        if self.deconv_stages > num_layers {
            return Err(Error::config(format!(
                "deconv_stages {} exceeds {} conv layers",
                self.deconv_stages, num_layers
            )));
        }
        for j in 1..=self.deconv_stages {
            let partner = num_layers - j;
            if self.conv_layers[partner].pool.is_none() {
                return Err(Error::config(format!(
                    "deconv stage {j} requires a pooling on conv layer {}",
                    partner + 1
                )));
            }
        }
        Ok(())
    }

    pub fn num_conv_layers(&self) -> usize {
        self.conv_layers.len()
    }

    /// 0-based index of the conv layer tied with deconv stage `j` (1-based):
    /// layer `L_c + 1 - j`.
    pub fn partner_layer(&self, stage_j: usize) -> usize {
        self.conv_layers.len() - stage_j
    }

    /// Input channel count of conv layer `l` (0-based).
    pub fn layer_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.input_channels
        } else {
            self.conv_layers[l - 1].blocks.last().unwrap().filters
        }
    }

    /// Derived per-layer geometry for this input size.
    pub fn conv_geometry(&self) -> Vec<LayerGeom> {
        let (mut h, mut w) = self.input_size;
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for layer in &self.conv_layers {
            let pre = (h, w);
            if let Some(p) = &layer.pool {
                h /= p.stride;
                w /= p.stride;
            }
            out.push(LayerGeom {
                out_channels: layer.blocks.last().unwrap().filters,
                pre_pool: pre,
                post_pool: (h, w),
            });
        }
        out
    }

    /// Output channels of deconv stage `j`: the partner layer's input count.
    pub fn deconv_out_channels(&self, stage_j: usize) -> usize {
        self.layer_in_channels(self.partner_layer(stage_j))
    }

    /// Output spatial size of deconv stage `j`: the partner pooling's input.
    pub fn deconv_out_size(&self, stage_j: usize) -> (usize, usize) {
        self.conv_geometry()[self.partner_layer(stage_j)].pre_pool
    }

    /// Channel counts of the stacked sources at `stage`, in stack order
    /// (top conv map first, then deconv stages 1..=stage).
    pub fn stack_channels(&self, stage: usize) -> Vec<usize> {
        let mut counts = vec![self.conv_layers.last().unwrap().blocks.last().unwrap().filters];
        for j in 1..=stage {
            counts.push(self.deconv_out_channels(j));
        }
        counts
    }

    /// Spatial size the stacked maps are expanded to at `stage`.
    pub fn stack_size(&self, stage: usize) -> (usize, usize) {
        if stage == 0 {
            self.conv_geometry().last().unwrap().post_pool
        } else {
            self.deconv_out_size(stage)
        }
    }

    /// Input channels of the class-map head at `stage`.
    pub fn head_in_channels(&self, stage: usize) -> usize {
        self.stack_channels(stage).iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset(name: &str) -> NetworkConfig {
        let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(name);
        NetworkConfig::load(&path).unwrap()
    }

    #[test]
    fn tb_preset_geometry() {
        let cfg = preset("tb.json");
        assert_eq!(cfg.num_conv_layers(), 5);
        assert_eq!(cfg.input_size, (320, 320));
        let geom = cfg.conv_geometry();
        assert_eq!(geom[4].post_pool, (10, 10));
        assert_eq!(geom[4].out_channels, 256);
        // baseline head sees the top conv map only
        assert_eq!(cfg.head_in_channels(0), 256);
        assert_eq!(cfg.stack_size(0), (10, 10));
        // stage 1 stacks conv5 (256) + deconv1 (384)
        assert_eq!(cfg.stack_channels(1), vec![256, 384]);
        assert_eq!(cfg.head_in_channels(1), 640);
        // stage 3 stacks 256 + 384 + 384 + 256 = 1280 at 80x80
        assert_eq!(cfg.head_in_channels(3), 1280);
        assert_eq!(cfg.stack_size(3), (80, 80));
        // deconv stage j is tied with conv layer 6 - j
        assert_eq!(cfg.partner_layer(1), 4);
        assert_eq!(cfg.partner_layer(3), 2);
    }

    #[test]
    fn voc_preset_geometry() {
        let cfg = preset("voc16.json");
        assert_eq!(cfg.num_classes, 21);
        assert_eq!(cfg.conv_geometry()[4].post_pool, (7, 7));
        // deconv1 emits 512 channels (ties with the conv5 block chain)
        assert_eq!(cfg.deconv_out_channels(1), 512);
        assert_eq!(cfg.deconv_out_channels(2), 256);
        assert_eq!(cfg.deconv_out_channels(3), 128);
        assert_eq!(cfg.stack_channels(3), vec![512, 512, 256, 128]);
        assert_eq!(cfg.stack_size(3), (56, 56));
    }

    #[test]
    fn validation_errors() {
        let mut cfg = preset("tb.json");
        cfg.input_size = (322, 320); // not divisible by 32
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = preset("tb.json");
        cfg.deconv_stages = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = preset("tb.json");
        cfg.conv_layers[0].blocks[0].kh = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = preset("tb.json");
        cfg.conv_layers[4].pool = None;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
