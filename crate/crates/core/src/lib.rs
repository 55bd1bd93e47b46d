pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod pipelines;
pub mod rerand;
pub mod rng;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use tensor::{Element, Tensor, TensorError};

#[cfg(feature = "mimalloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
