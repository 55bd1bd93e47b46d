//! Residual backbone, its parameter naming scheme, attachable heads and the
//! checkpoint format.
//!
//! Layer paths:
//!
//! ```text
//! stem.conv  stem.bn
//! stage{i}.block{j}.conv1  .bn1  .conv2  .bn2  [.shortcut.conv  .shortcut.bn]
//! head.fc | head.proj1 head.proj2 | head.probe{s}
//! ```
//!
//! A batch-norm layer owns four entries (gamma, beta, running mean, running
//! variance) under one path; convolutions and linear layers own their weight
//! (and bias).

mod checkpoint;
mod config;
mod head;
mod model;
mod registry;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
pub use config::BackboneConfig;
pub use head::{Head, HeadKind};
pub use model::{Backbone, Bound, Features, Mode, BN_EPS, BN_MOMENTUM};
pub use registry::{Entry, ParamRegistry, RegistryError, Role};

use thiserror::Error;

use crate::rerand::InitError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
    #[error("input extent {size} is too small for four stages of downsampling")]
    InputTooSmall { size: usize, config: BackboneConfig },
    #[error("input has shape {got:?}, expected N×{channels}×H×W")]
    InputShape { got: Vec<usize>, channels: usize },
    #[error("a {0:?} head is already attached")]
    HeadPresent(HeadKind),
    #[error("no head attached")]
    NoHead,
    #[error("probe stage must be 1..=4, got {0}")]
    ProbeStage(usize),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Init(#[from] InitError),
}
