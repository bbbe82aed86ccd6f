//! Cross-view contrastive representation learning for 3D skeleton sequences.
//!
//! `numcore` is a small reverse-mode autodiff engine over `f64` tensors; the
//! remaining modules build the data pipeline, graph-convolutional encoder,
//! contrastive objectives, pretraining loop and evaluation protocols on it.

pub mod augment;
pub mod contrastive;
pub mod encoder;
pub mod evalkit;
pub mod numcore;
pub mod skeldata;
pub mod trainkit;

pub use augment::AugmentConfig;
pub use contrastive::{ContrastiveConfig, GuideMode, MemoryBank};
pub use encoder::{Checkpoint, Encoder, EncoderConfig, EncoderParams, Mode, MomentumEncoderPair};
pub use evalkit::{EvalReport, ProbeConfig, ProtocolResult};
pub use numcore::{Graph, Tensor, TensorError, Var};
pub use skeldata::{LabeledDataset, SkeletonGraph, SkeletonSequence, Split, SynthConfig, ViewKind};
pub use trainkit::{LrSchedule, TrainConfig, Trainer};
