//! The batch-normalized Inception network.

mod checkpoint;
mod config;
mod network;
mod registry;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{InceptionBlockSpec, ModelConfig, Stage, StageShape, HEAD_DROPOUT, HEAD_WIDTH, PATCH_SIZE, NARROW_HEAD_WIDTH};
pub use network::{build_model, Buffers, ForwardCtx, ForwardOutput, InceptionBlock, InceptionUnit, Model};
pub use registry::{ParamRegistry, TensorSet};
