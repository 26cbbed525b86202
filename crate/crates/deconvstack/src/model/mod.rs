//! Network configuration, tied parameter store, staged assembly and
//! checkpoints.

mod config;
mod net;
mod store;

pub use config::{ConvBlockCfg, ConvLayerCfg, LayerGeom, NetworkConfig, PoolCfg, TaskKind};
pub use net::{conv_param_name, deconv_param_name, StageNet, NORM_EPS};
pub use store::{
    load_checkpoint, BiasEntry, CheckpointData, ParamEntry, RestoreStats, Tie, TiedParamStore,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
