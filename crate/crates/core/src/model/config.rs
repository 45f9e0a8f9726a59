use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DEFAULT_BN_EPS, DEFAULT_BN_MOMENTUM};

/// Widths of one Inception block: `features` channels per branch, and the
/// 1×1 reduction widths in front of the 3×3 (`alpha`) and 5×5 (`beta`) branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionBlockSpec {
    pub features: usize,
    pub alpha: usize,
    pub beta: usize,
}

impl InceptionBlockSpec {
    /// Reductions default to half the branch width.
    pub fn new(features: usize) -> Self {
        let half = (features / 2).max(1);
        InceptionBlockSpec {
            features,
            alpha: half,
            beta: half,
        }
    }

    pub fn with_reductions(features: usize, alpha: usize, beta: usize) -> Self {
        InceptionBlockSpec { features, alpha, beta }
    }

    pub fn out_channels(&self) -> usize {
        4 * self.features
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [("features", self.features), ("alpha", self.alpha), ("beta", self.beta)] {
            if v == 0 {
                return Err(Error::config(format!("inception.{field}"), "must be positive"));
            }
        }
        Ok(())
    }

    /// Trainable parameters of one block on `in_channels` inputs (conv weights
    /// and biases plus BN scale and shift).
    pub fn param_count(&self, in_channels: usize) -> usize {
        let (c, f, a, b) = (in_channels, self.features, self.alpha, self.beta);
        let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout + 2 * cout;
        conv_bn(c, f, 1) + conv_bn(c, a, 1) + conv_bn(a, f, 3) + conv_bn(c, b, 1) + conv_bn(b, f, 5) + conv_bn(c, f, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Stage {
    Inception(InceptionBlockSpec),
    MaxPool { kernel: usize, stride: usize },
}

/// Network layout: feature-extraction stages followed by a dense classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `[channels, height, width]` of one input patch.
    pub input_shape: [usize; 3],
    pub stages: Vec<Stage>,
    /// Widths of the hidden dense layers (each followed by BN, ReLU, dropout).
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Shape of the activation after a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

pub const PATCH_SIZE: usize = 50;
pub const HEAD_WIDTH: usize = 512;
pub const NARROW_HEAD_WIDTH: usize = 256;
pub const HEAD_DROPOUT: f64 = 0.4;

impl ModelConfig {
    fn with_stages(stages: Vec<Stage>, hidden: Vec<usize>) -> Self {
        ModelConfig {
            input_shape: [3, PATCH_SIZE, PATCH_SIZE],
            stages,
            hidden,
            dropout: HEAD_DROPOUT,
            classes: 2,
            bn_eps: DEFAULT_BN_EPS,
            bn_momentum: DEFAULT_BN_MOMENTUM,
        }
    }

    fn block_layout(widths: [usize; 4]) -> Vec<Stage> {
        let pool = Stage::MaxPool { kernel: 2, stride: 2 };
        let mut stages = Vec::new();
        for (i, &f) in widths.iter().enumerate() {
            if i > 0 {
                stages.push(pool);
            }
            stages.push(Stage::Inception(InceptionBlockSpec::new(f)));
            stages.push(Stage::Inception(InceptionBlockSpec::new(f)));
        }
        stages
    }

    /// The full architecture: eight Inception blocks (64, 64, 128, 128, 256, 256,
    /// 512, 512) with three 2×2 max-pool stages, two 512-wide hidden layers, and a
    /// two-class output.
    pub fn standard() -> Self {
        Self::standard_with_head(HEAD_WIDTH)
    }

    /// Same feature extractor with a different hidden-layer width (the tabulated
    /// layout lists 256).
    pub fn standard_with_head(width: usize) -> Self {
        Self::with_stages(Self::block_layout([64, 128, 256, 512]), vec![width, width])
    }

    /// The full layout with every branch width divided by `divisor`; useful for
    /// CPU-scale experiments.
    pub fn standard_scaled(divisor: usize, head_width: usize) -> Self {
        let d = divisor.max(1);
        let widths = [64, 128, 256, 512].map(|f| (f / d).max(1));
        Self::with_stages(Self::block_layout(widths), vec![head_width, head_width])
    }

    /// A small network on 50×50 patches that trains in seconds on a CPU.
    pub fn miniature() -> Self {
        let pool = Stage::MaxPool { kernel: 2, stride: 2 };
        let block = |f| Stage::Inception(InceptionBlockSpec::new(f));
        let mut cfg = Self::with_stages(vec![block(4), pool, block(4), pool, block(8), pool], vec![16, 16]);
        cfg.dropout = 0.0;
        cfg
    }

    pub fn inception_blocks(&self) -> impl Iterator<Item = &InceptionBlockSpec> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Inception(spec) => Some(spec),
            Stage::MaxPool { .. } => None,
        })
    }

    /// Activation shape after every stage, in order.
    pub fn spatial_trace(&self) -> Result<Vec<StageShape>> {
        let [c, h, w] = self.input_shape;
        let mut cur = StageShape {
            channels: c,
            height: h,
            width: w,
        };
        let mut trace = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            cur = match *stage {
                Stage::Inception(spec) => {
                    spec.validate()?;
                    if cur.height < 5 || cur.width < 5 {
                        return Err(Error::config(
                            format!("stages[{i}]"),
                            format!("inception block needs spatial size >= 5, got {}x{}", cur.height, cur.width),
                        ));
                    }
                    StageShape {
                        channels: spec.out_channels(),
                        ..cur
                    }
                }
                Stage::MaxPool { kernel, stride } => {
                    if kernel == 0 || stride == 0 {
                        return Err(Error::config(format!("stages[{i}]"), "pool kernel and stride must be positive"));
                    }
                    if cur.height < kernel || cur.width < kernel {
                        return Err(Error::config(
                            format!("stages[{i}]"),
                            format!("pool window {kernel} larger than {}x{}", cur.height, cur.width),
                        ));
                    }
                    StageShape {
                        channels: cur.channels,
                        height: (cur.height - kernel) / stride + 1,
                        width: (cur.width - kernel) / stride + 1,
                    }
                }
            };
            trace.push(cur);
        }
        Ok(trace)
    }

    /// Length of the flattened feature vector fed to the classifier head.
    pub fn feature_len(&self) -> Result<usize> {
        let last = self.spatial_trace()?.last().copied().unwrap_or(StageShape {
            channels: self.input_shape[0],
            height: self.input_shape[1],
            width: self.input_shape[2],
        });
        Ok(last.channels * last.height * last.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("input_shape", "dimensions must be positive"));
        }
        if self.classes != 2 {
            return Err(Error::config("classes", format!("output layer must have 2 classes, got {}", self.classes)));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::config("hidden", "layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must be in [0, 1)"));
        }
        if !(self.bn_eps > 0.0) {
            return Err(Error::config("bn_eps", "must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::config("bn_momentum", "must be in (0, 1]"));
        }
        self.spatial_trace()?;
        Ok(())
    }
}
