//! Batch-normalized Inception network for 50×50 histopathology patch
//! classification: tensors and reverse-mode autodiff, layers, the network and
//! its checkpoint format, the training protocol, the patch dataset pipeline,
//! evaluation metrics, and whole-slide heatmaps.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heatmap;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{BnMode, Gradients, Graph, NodeId};
pub use error::{Error, Result};
pub use heatmap::{assemble_slide, gaussian_smooth, render_overlay, SlideCanvas};
pub use metrics::{balanced_accuracy, confusion, f1_score, roc_auc, ConfusionMatrix, EvalReport, RocCurve};
pub use model::{build_model, InceptionBlock, InceptionBlockSpec, Model, ModelConfig, Stage};
pub use nn::{BatchNormState, LayerMode};
pub use optim::{adam_step, early_stop_check, plateau_scheduler_step, AdamState};
pub use tensor::{Scalar, Tensor};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};
