use rand::distributions::{Distribution, Uniform};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{InceptionBlockSpec, ModelConfig, Stage};
use super::registry::{ParamRegistry, TensorSet};
use crate::autodiff::{BnMode, Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{self, LayerMode};
use crate::tensor::{fmt_shape, Scalar, Tensor};

/// Where BN layers read (and, in train mode, write) their running statistics.
pub enum Buffers<'a, T: Scalar> {
    Frozen(&'a TensorSet<T>),
    Tracked(&'a mut TensorSet<T>),
}

impl<T: Scalar> Buffers<'_, T> {
    fn get(&self, idx: usize) -> &Tensor<T> {
        match self {
            Buffers::Frozen(b) => b.get(idx),
            Buffers::Tracked(b) => b.get(idx),
        }
    }
}

/// Per-forward state shared by all layers.
pub struct ForwardCtx<'a, T: Scalar> {
    pub params: &'a [NodeId],
    pub buffers: Buffers<'a, T>,
    pub mode: LayerMode,
    pub eps: T,
    pub momentum: T,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl<T: Scalar> ForwardCtx<'_, T> {
    fn batch_norm(&mut self, g: &mut Graph<T>, x: NodeId, bn: &BnIndices) -> Result<NodeId> {
        let (gamma, beta) = (self.params[bn.gamma], self.params[bn.beta]);
        match self.mode {
            LayerMode::Train => {
                let (out, stats) = g.batch_norm(x, gamma, beta, BnMode::Batch { eps: self.eps })?;
                let stats = stats.expect("batch mode returns statistics");
                let Buffers::Tracked(buffers) = &mut self.buffers else {
                    return Err(Error::invalid("batch_norm", "train mode requires mutable running statistics"));
                };
                let mut mean = buffers.get(bn.mean).data().to_vec();
                let mut var = buffers.get(bn.var).data().to_vec();
                nn::blend_running(&mut mean, &mut var, &stats, self.momentum);
                buffers.get_mut(bn.mean).data_mut().copy_from_slice(&mean);
                buffers.get_mut(bn.var).data_mut().copy_from_slice(&var);
                Ok(out)
            }
            LayerMode::Inference => {
                let mode = BnMode::Running {
                    mean: self.buffers.get(bn.mean).data(),
                    var: self.buffers.get(bn.var).data(),
                    eps: self.eps,
                };
                Ok(g.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BnIndices {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

fn register_bn<T: Scalar>(reg: &mut ParamRegistry<T>, prefix: &str, channels: usize) -> BnIndices {
    BnIndices {
        gamma: reg.params.push(format!("{prefix}.bn.gamma"), Tensor::ones(&[channels])),
        beta: reg.params.push(format!("{prefix}.bn.beta"), Tensor::zeros(&[channels])),
        mean: reg.buffers.push(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[channels])),
        var: reg.buffers.push(format!("{prefix}.bn.running_var"), Tensor::ones(&[channels])),
    }
}

/// Fan-in scaled uniform initialization, `U(−√(6/fan_in), √(6/fan_in))`.
fn init_weight<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
struct ConvBnRelu {
    weight: usize,
    bias: usize,
    bn: BnIndices,
    padding: usize,
}

impl ConvBnRelu {
    fn register<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        let weight = reg.params.push(format!("{prefix}.conv.weight"), init_weight(&[cout, cin, k, k], cin * k * k, rng));
        let bias = reg.params.push(format!("{prefix}.conv.bias"), Tensor::zeros(&[cout]));
        let bn = register_bn(reg, prefix, cout);
        ConvBnRelu {
            weight,
            bias,
            bn,
            padding: k / 2,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = g.conv2d(x, ctx.params[self.weight], ctx.params[self.bias], 1, self.padding)?;
        let y = ctx.batch_norm(g, y, &self.bn)?;
        Ok(g.relu(y))
    }
}

/// Parameter layout of one Inception block.
#[derive(Clone, Debug)]
pub struct InceptionUnit {
    spec: InceptionBlockSpec,
    branch_1x1: ConvBnRelu,
    reduce_3x3: ConvBnRelu,
    conv_3x3: ConvBnRelu,
    reduce_5x5: ConvBnRelu,
    conv_5x5: ConvBnRelu,
    pool_proj: ConvBnRelu,
}

impl InceptionUnit {
    pub fn register<T: Scalar>(
        reg: &mut ParamRegistry<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        spec: InceptionBlockSpec,
    ) -> Self {
        let (f, a, b) = (spec.features, spec.alpha, spec.beta);
        InceptionUnit {
            spec,
            branch_1x1: ConvBnRelu::register(reg, rng, &format!("{prefix}.branch1x1"), in_channels, f, 1),
            reduce_3x3: ConvBnRelu::register(reg, rng, &format!("{prefix}.reduce3x3"), in_channels, a, 1),
            conv_3x3: ConvBnRelu::register(reg, rng, &format!("{prefix}.branch3x3"), a, f, 3),
            reduce_5x5: ConvBnRelu::register(reg, rng, &format!("{prefix}.reduce5x5"), in_channels, b, 1),
            conv_5x5: ConvBnRelu::register(reg, rng, &format!("{prefix}.branch5x5"), b, f, 5),
            pool_proj: ConvBnRelu::register(reg, rng, &format!("{prefix}.pool_proj"), in_channels, f, 1),
        }
    }

    pub fn spec(&self) -> InceptionBlockSpec {
        self.spec
    }

    /// Four same-padded branches concatenated along channels: 1×1; 1×1→3×3;
    /// 1×1→5×5; 3×3 max-pool (stride 1)→1×1.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: NodeId) -> Result<NodeId> {
        let s = g.value(x).shape();
        if s.len() != 4 || s[2] < 5 || s[3] < 5 {
            return Err(Error::shape("inception", "[N, C, H>=5, W>=5]", fmt_shape(s)));
        }
        let a = self.branch_1x1.forward(g, ctx, x)?;
        let b = self.reduce_3x3.forward(g, ctx, x)?;
        let b = self.conv_3x3.forward(g, ctx, b)?;
        let c = self.reduce_5x5.forward(g, ctx, x)?;
        let c = self.conv_5x5.forward(g, ctx, c)?;
        let d = g.maxpool2d(x, 3, 1, 1)?;
        let d = self.pool_proj.forward(g, ctx, d)?;
        g.concat_channels(&[a, b, c, d])
    }
}

/// A standalone Inception block with its own parameters.
#[derive(Clone, Debug)]
pub struct InceptionBlock<T: Scalar = f32> {
    pub registry: ParamRegistry<T>,
    unit: InceptionUnit,
    in_channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Scalar> InceptionBlock<T> {
    pub fn new(in_channels: usize, spec: InceptionBlockSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if in_channels == 0 {
            return Err(Error::config("in_channels", "must be positive"));
        }
        let mut registry = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = InceptionUnit::register(&mut registry, &mut rng, "block", in_channels, spec);
        Ok(InceptionBlock {
            registry,
            unit,
            in_channels,
            eps: nn::DEFAULT_BN_EPS,
            momentum: nn::DEFAULT_BN_MOMENTUM,
        })
    }

    pub fn spec(&self) -> InceptionBlockSpec {
        self.unit.spec
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Runs the block on graph nodes: `input` plus one node per registry parameter.
    pub fn forward_nodes(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        params: &[NodeId],
        buffers: Buffers<'_, T>,
        mode: LayerMode,
    ) -> Result<NodeId> {
        let mut ctx = ForwardCtx {
            params,
            buffers,
            mode,
            eps: T::from_f64(self.eps),
            momentum: T::from_f64(self.momentum),
            rng: None,
        };
        self.unit.forward(g, &mut ctx, input)
    }

    /// Eager forward pass. Train mode updates the running statistics.
    pub fn forward(&mut self, input: &Tensor<T>, mode: LayerMode) -> Result<Tensor<T>> {
        if input.rank() != 4 || input.shape()[1] != self.in_channels {
            return Err(Error::shape(
                "inception",
                format!("[N, {}, H, W]", self.in_channels),
                fmt_shape(input.shape()),
            ));
        }
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let params = self.registry.bind(&mut g, false);
        let buffers = match mode {
            LayerMode::Train => Buffers::Tracked(&mut self.registry.buffers),
            LayerMode::Inference => Buffers::Frozen(&self.registry.buffers),
        };
        let mut ctx = ForwardCtx {
            params: &params,
            buffers,
            mode,
            eps: T::from_f64(self.eps),
            momentum: T::from_f64(self.momentum),
            rng: None,
        };
        let out = self.unit.forward(&mut g, &mut ctx, x)?;
        Ok(g.value(out).clone())
    }
}

#[derive(Clone, Debug)]
enum StageUnit {
    Inception(InceptionUnit),
    MaxPool { kernel: usize, stride: usize },
}

#[derive(Clone, Debug)]
struct DenseBnRelu {
    weight: usize,
    bias: usize,
    bn: BnIndices,
}

#[derive(Clone, Debug)]
struct Layout {
    stages: Vec<StageUnit>,
    hidden: Vec<DenseBnRelu>,
    out_weight: usize,
    out_bias: usize,
}

/// Output of a graph-mode forward pass.
pub struct ForwardOutput {
    pub logits: NodeId,
    /// One node per trainable parameter, in registry order.
    pub params: Vec<NodeId>,
}

/// The assembled network: config, parameter registry, and layer layout.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    registry: ParamRegistry<T>,
    layout: Layout,
}

/// Builds the network described by `config` with parameters drawn from `seed`.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::build(config, seed)
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut reg = ParamRegistry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = config.input_shape[0];
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, stage) in config.stages.iter().enumerate() {
            stages.push(match *stage {
                Stage::Inception(spec) => {
                    let unit = InceptionUnit::register(&mut reg, &mut rng, &format!("stage{i}"), channels, spec);
                    channels = spec.out_channels();
                    StageUnit::Inception(unit)
                }
                Stage::MaxPool { kernel, stride } => StageUnit::MaxPool { kernel, stride },
            });
        }
        let mut width = config.feature_len()?;
        let mut hidden = Vec::with_capacity(config.hidden.len());
        for (j, &m) in config.hidden.iter().enumerate() {
            let prefix = format!("fc{j}");
            let weight = reg.params.push(format!("{prefix}.weight"), init_weight(&[width, m], width, &mut rng));
            let bias = reg.params.push(format!("{prefix}.bias"), Tensor::zeros(&[m]));
            let bn = register_bn(&mut reg, &prefix, m);
            hidden.push(DenseBnRelu { weight, bias, bn });
            width = m;
        }
        let out_weight = reg.params.push("out.weight", init_weight(&[width, config.classes], width, &mut rng));
        let out_bias = reg.params.push("out.bias", Tensor::zeros(&[config.classes]));
        Ok(Model {
            config: config.clone(),
            registry: reg,
            layout: Layout {
                stages,
                hidden,
                out_weight,
                out_bias,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry<T> {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParamRegistry<T> {
        &mut self.registry
    }

    pub fn trainable_count(&self) -> usize {
        self.registry.trainable_count()
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            registry: self.registry.cast(),
            layout: self.layout.clone(),
        }
    }

    pub(crate) fn with_registry(config: ModelConfig, registry: ParamRegistry<T>) -> Result<Self> {
        let template = Model::<T>::build(&config, 0)?;
        for set in [(&template.registry.params, &registry.params), (&template.registry.buffers, &registry.buffers)] {
            let (want, got) = set;
            if want.len() != got.len() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{} tensors for config", want.len()),
                    format!("{} tensors", got.len()),
                ));
            }
            for i in 0..want.len() {
                if want.name(i) != got.name(i) || want.get(i).shape() != got.get(i).shape() {
                    return Err(Error::shape(
                        "checkpoint",
                        format!("{} {}", want.name(i), fmt_shape(want.get(i).shape())),
                        format!("{} {}", got.name(i), fmt_shape(got.get(i).shape())),
                    ));
                }
            }
        }
        Ok(Model {
            config,
            registry,
            layout: template.layout,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.config.input_shape;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape("model input", format!("[N, {c}, {h}, {w}]"), fmt_shape(shape)));
        }
        Ok(())
    }

    /// Forward pass over explicit parameter nodes and buffers.
    pub fn forward_nodes(
        &self,
        g: &mut Graph<T>,
        input: NodeId,
        params: &[NodeId],
        buffers: Buffers<'_, T>,
        mode: LayerMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        Self::forward_layout(&self.config, &self.layout, g, input, params, buffers, mode, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_layout(
        config: &ModelConfig,
        layout: &Layout,
        g: &mut Graph<T>,
        input: NodeId,
        params: &[NodeId],
        buffers: Buffers<'_, T>,
        mode: LayerMode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<NodeId> {
        let [c, h, w] = config.input_shape;
        let shape = g.value(input).shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape("model input", format!("[N, {c}, {h}, {w}]"), fmt_shape(shape)));
        }
        let mut ctx = ForwardCtx {
            params,
            buffers,
            mode,
            eps: T::from_f64(config.bn_eps),
            momentum: T::from_f64(config.bn_momentum),
            rng: rng.map(|r| -> &mut dyn RngCore { r }),
        };
        let mut x = input;
        for stage in &layout.stages {
            x = match stage {
                StageUnit::Inception(unit) => unit.forward(g, &mut ctx, x)?,
                StageUnit::MaxPool { kernel, stride } => g.maxpool2d(x, *kernel, *stride, 0)?,
            };
        }
        x = g.flatten(x)?;
        for layer in &layout.hidden {
            x = g.dense(x, ctx.params[layer.weight], ctx.params[layer.bias])?;
            x = ctx.batch_norm(g, x, &layer.bn)?;
            x = g.relu(x);
            if mode == LayerMode::Train && config.dropout > 0.0 {
                let rng = ctx
                    .rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::invalid("dropout", "train mode requires a random generator"))?;
                x = g.dropout(x, config.dropout, rng)?;
            }
        }
        g.dense(x, ctx.params[layout.out_weight], ctx.params[layout.out_bias])
    }

    /// Train-mode forward: parameters become graph variables, BN statistics
    /// are updated, dropout masks drawn from `rng`.
    pub fn forward_train(&mut self, g: &mut Graph<T>, input: NodeId, rng: &mut dyn RngCore) -> Result<ForwardOutput> {
        let params = self.registry.bind(g, true);
        let logits = Self::forward_layout(
            &self.config,
            &self.layout,
            g,
            input,
            &params,
            Buffers::Tracked(&mut self.registry.buffers),
            LayerMode::Train,
            Some(rng),
        )?;
        Ok(ForwardOutput { logits, params })
    }

    /// Inference-mode logits for a batch `[N, C, H, W]`.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let params = self.registry.bind(&mut g, false);
        let out = self.forward_nodes(
            &mut g,
            x,
            &params,
            Buffers::Frozen(&self.registry.buffers),
            LayerMode::Inference,
            None,
        )?;
        Ok(g.value(out).clone())
    }

    /// Class probabilities `[N, 2]`; column 1 is the positive (IDC) class.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        nn::softmax_rows(&self.logits(batch)?)
    }
}
