//! Weakly-supervised semantic segmentation on the CPU, from scratch.
//!
//! The network is a plain convolutional stack whose top features are
//! progressively restored to higher resolution by *tied* deconvolution
//! layers: each deconvolution unpools through the argmax switches recorded
//! by its partner pooling layer and then convolves with the adjoint view of
//! the partner convolution kernel (one stored parameter, two uses). The
//! feature maps of the top convolution layer and of every deconvolution
//! layer are normalized, expanded to a common resolution and stacked across
//! channels; a small head convolution turns the stack into per-class
//! activation maps, which are softmaxed across channels and aggregated into
//! an image-level score vector by global log-sum-exp pooling. Training needs
//! image-level labels only; pixel masks are used for evaluation exclusively.
//!
//! Everything is `f64` and deterministic: fixed seeds reproduce training
//! runs byte for byte, including checkpoints and evaluation CSVs.
//!
//! Crate map:
//! - [`tensor`]: dense rank-4 tensors, elementwise/reduction arithmetic and
//!   the seeded RNG every other module draws from.
//! - [`layers`]: forward/backward for every layer primitive (convolution,
//!   max-pool with switches, unpooling, tied deconvolution, per-map
//!   normalization, nearest-neighbor expansion, channel concatenation,
//!   channel softmax, log-sum-exp pooling, losses).
//! - [`model`]: declarative network configs, the tied parameter store with
//!   shared-gradient accumulation, staged network assembly and the full
//!   forward/backward graph, plus the binary checkpoint format.
//! - [`trainer`]: SGD with momentum, schedules, minibatching and the staged
//!   (layer-by-layer) training plan.
//! - [`data`]: synthetic shape datasets with image-level labels and held-out
//!   masks, PGM/PPM I/O, label vectors, augmentation.
//! - [`eval`]: pixel-level inference, IoU scoring, activation profiles and
//!   heat-map export.
//! - [`reference`]: slow, independent oracle implementations used by the
//!   test suites and the `gradient_check` example.
//!
//! The `examples/` directory is the front door: one runnable example per
//! capability (dataset generation, staged training, evaluation, inference,
//! activation profiles, gradient checking, tied-weight mechanics, LSE
//! pooling). A thin `deconvstack` binary exposes the same operations as
//! subcommands for scripted use.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod layers;
pub mod model;
pub mod reference;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{SeededRng, Tensor4};
