//! The run configuration file: one TOML document whose tables mirror the
//! library's configuration types. Command-line flags override file values,
//! which override defaults.

use std::path::{Path, PathBuf};

use idcnet_core::data::{Normalization, SplitSizes, SplitUnit};
use idcnet_core::heatmap::HeatmapOptions;
use idcnet_core::model::{ModelConfig, HEAD_WIDTH};
use idcnet_core::TrainConfig;
use serde::{Deserialize, Serialize};

/// A rejected configuration value.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(field: &str, constraint: impl std::fmt::Display) -> Invalid {
    Invalid(format!("invalid config field `{field}`: {constraint}"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// The full eight-block network.
    #[default]
    Standard,
    /// Three tiny blocks; trains in seconds.
    Miniature,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    /// Divides every branch width of `standard`.
    pub width_divisor: usize,
    /// Hidden dense width of `standard`.
    pub head_width: usize,
    /// Overrides the preset's dropout rate.
    pub dropout: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: Preset::Standard,
            width_divisor: 1,
            head_width: HEAD_WIDTH,
            dropout: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self) -> Result<ModelConfig, Invalid> {
        if self.width_divisor == 0 {
            return Err(invalid("model.width_divisor", "must be at least 1"));
        }
        if self.head_width == 0 {
            return Err(invalid("model.head_width", "must be at least 1"));
        }
        let mut cfg = match self.preset {
            Preset::Standard if self.width_divisor == 1 => ModelConfig::standard_with_head(self.head_width),
            Preset::Standard => ModelConfig::standard_scaled(self.width_divisor, self.head_width),
            Preset::Miniature => {
                if self.width_divisor != 1 || self.head_width != HEAD_WIDTH {
                    return Err(invalid("model.preset", "width_divisor and head_width apply only to standard"));
                }
                ModelConfig::miniature()
            }
        };
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(invalid("model.dropout", format!("must lie in [0, 1), got {p}")));
            }
            cfg.dropout = p;
        }
        cfg.validate().map_err(|e| Invalid(e.to_string()))?;
        Ok(cfg)
    }
}

/// Which records validate each epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidateOn {
    #[default]
    Val,
    /// The training records themselves; for memorization checks.
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub unit: SplitUnit,
    pub sizes: SplitSizes,
    pub validate_on: ValidateOn,
    /// Reuse a saved split instead of drawing one.
    pub plan: Option<PathBuf>,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            unit: SplitUnit::Patch,
            sizes: SplitSizes::Fractions { train: 0.6, val: 0.2 },
            validate_on: ValidateOn::Val,
            plan: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub normalization: Normalization,
    /// Decode every patch once up front instead of on each access.
    pub preload: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub threshold: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { threshold: idcnet_core::metrics::DEFAULT_THRESHOLD }
    }
}

/// Everything `train` needs. `seed` drives model initialization, the split,
/// and the epoch shuffles.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub split: SplitSection,
    #[serde(rename = "dataset")]
    pub data_opts: DataSection,
    pub metrics: MetricsSection,
    pub heatmap: HeatmapOptions,
}

/// [`TrainConfig`] without its seed, which lives at the top level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            batch_size: d.batch_size,
            lr_init: d.lr_init,
            lr_min: d.lr_min,
            plateau_patience: d.plateau_patience,
            lr_factor: d.lr_factor,
            early_stop_patience: d.early_stop_patience,
            max_epochs: d.max_epochs,
        }
    }
}

/// Values given on the command line; each `Some` replaces the file value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_init: Option<f64>,
    pub preset: Option<Preset>,
    pub split_unit: Option<SplitUnit>,
    pub preload: bool,
}

/// A validated configuration, ready to run.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub run: RunConfig,
    pub data: PathBuf,
    pub output: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, Invalid> {
        toml::from_str(text).map_err(|e| Invalid(format!("config: {}", e.to_string().trim_end())))
    }

    pub fn load(path: &Path) -> Result<Self, Invalid> {
        let text = std::fs::read_to_string(path).map_err(|e| Invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if o.data.is_some() {
            self.data.clone_from(&o.data);
        }
        if o.output.is_some() {
            self.output.clone_from(&o.output);
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.max_epochs {
            self.train.max_epochs = e;
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.lr_init {
            self.train.lr_init = lr;
        }
        if let Some(p) = o.preset {
            self.model.preset = p;
        }
        if let Some(u) = o.split_unit {
            self.split.unit = u;
        }
        self.data_opts.preload |= o.preload;
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            batch_size: t.batch_size,
            lr_init: t.lr_init,
            lr_min: t.lr_min,
            plateau_patience: t.plateau_patience,
            lr_factor: t.lr_factor,
            early_stop_patience: t.early_stop_patience,
            max_epochs: t.max_epochs,
            seed: self.seed,
        }
    }

    /// Checks every field and referenced path without touching the disk
    /// beyond reads.
    pub fn resolve(self) -> Result<Resolved, Invalid> {
        let data = self.data.clone().ok_or_else(|| invalid("data", "a dataset root is required (file or --data)"))?;
        if !data.is_dir() {
            return Err(Invalid(format!("dataset root {} is not a directory", data.display())));
        }
        let output = self.output.clone().ok_or_else(|| invalid("output", "an output directory is required (file or --output)"))?;
        if output.exists() && !output.is_dir() {
            return Err(Invalid(format!("output {} exists and is not a directory", output.display())));
        }
        let train = self.train_config();
        train.validate().map_err(|e| match e {
            idcnet_core::Error::Config { field, constraint } => invalid(&format!("train.{field}"), constraint),
            e => Invalid(e.to_string()),
        })?;
        let model = self.model.build()?;
        match self.split.sizes {
            SplitSizes::Fractions { train: t, val: v } => {
                for (field, f) in [("split.sizes.train", t), ("split.sizes.val", v)] {
                    if !(0.0..=1.0).contains(&f) {
                        return Err(invalid(field, format!("fraction must lie in [0, 1], got {f}")));
                    }
                }
                if t + v > 1.0 {
                    return Err(invalid("split.sizes", format!("train + val fractions exceed 1 ({})", t + v)));
                }
            }
            SplitSizes::Counts { test: Some(t), test_positives: Some(k), .. } if k > t => {
                return Err(invalid("split.sizes.test_positives", format!("{k} exceeds the test size {t}")));
            }
            SplitSizes::Counts { .. } => {}
        }
        if let Some(plan) = &self.split.plan {
            if !plan.is_file() {
                return Err(Invalid(format!("split plan {} does not exist", plan.display())));
            }
        }
        if !(0.0..=1.0).contains(&self.metrics.threshold) {
            return Err(invalid("metrics.threshold", format!("must lie in [0, 1], got {}", self.metrics.threshold)));
        }
        self.heatmap.validate().map_err(|e| Invalid(format!("heatmap: {e}")))?;
        Ok(Resolved { run: self, data, output, model, train })
    }
}
