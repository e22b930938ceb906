//! Fourier-activated adapter layers for frozen transformer backbones,
//! built on a small reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] / [`tape`] / [`gradcheck`]: dense f64 tensors, a dynamic
//!   single-use tape, and a finite-difference oracle for every gradient.
//! * [`adapter`]: random-Fourier feature maps, frequency channels with
//!   input-conditioned gates, and the gated adapter layer itself.
//! * [`regularizer`]: the l1 + pairwise-orthogonality penalty on gates.
//! * [`transformer`]: a post-norm encoder with adapters inserted on the
//!   attention branch, plus the trainable/frozen parameter partition.
//! * [`checkpoint`]: flat JSON parameter serialization, bit-exact.
//! * [`data`]: synthetic sinusoid-band classification tasks and the DFT
//!   band splitter.
//! * [`optim`] / [`training`]: AdamW, the warmup/decay schedule, and the
//!   deterministic training loop.
//! * [`analysis`]: per-channel frequency reports, ablation runs, and
//!   report export.

pub mod adapter;
pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod optim;
pub mod regularizer;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use adapter::{FaaConfig, FaaLayerParams, FaaMode};
pub use data::{Dataset, Sample, TaskConfig};
pub use regularizer::RegWeights;
pub use tape::{GradMap, NodeId, Tape};
pub use tensor::Tensor;
pub use training::{TrainConfig, TrainReport};
pub use transformer::{AdapterKind, EncoderConfig, Model};
