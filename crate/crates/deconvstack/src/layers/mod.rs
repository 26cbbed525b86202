//! Layer primitives: forward and backward passes for everything the
//! network graph is built from.

mod conv;
mod head;
mod loss;
mod pool;
mod stack;

pub use conv::{
    conv_backward, conv_forward, deconv_backward, deconv_forward, tie_transform_kernel, ConvWeight,
    LayerGrad,
};
pub(crate) use conv::conv_backward_parts;
pub use head::{channel_softmax, channel_softmax_backward, classmap_forward, lse_pool, lse_pool_backward};
pub use loss::{bce_multilabel_loss, categorical_ce_loss};
pub use pool::{maxpool_backward, maxpool_forward, unpool_backward, unpool_forward, PoolSwitches};
pub use stack::{
    concat_maps, expand_backward, expand_map, normalize_backward, normalize_map, split_channels,
};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor4) -> Tensor4 {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor4::new(x.dims(), data).expect("relu preserves shape and finiteness")
}

/// Gradient of [`relu`]: pass `d_out` where the pre-activation was positive.
pub fn relu_backward(x_pre: &Tensor4, d_out: &Tensor4) -> Result<Tensor4> {
    if x_pre.dims() != d_out.dims() {
        return Err(Error::shape(format!(
            "relu backward dims {:?} vs {:?}",
            x_pre.dims(),
            d_out.dims()
        )));
    }
    let data = x_pre
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(x, d)| if *x > 0.0 { *d } else { 0.0 })
        .collect();
    Tensor4::new(x_pre.dims(), data)
}
