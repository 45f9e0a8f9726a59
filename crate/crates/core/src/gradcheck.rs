//! Central finite-difference verification of the tape's backward rules.
//!
//! Checks run in `f64`; float32 differences are too noisy for tight tolerances.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, Graph, NodeId};
use crate::error::Result;
use crate::model::{Buffers, InceptionBlock, InceptionBlockSpec, Model, ModelConfig, ParamRegistry, Stage};
use crate::nn::LayerMode;
use crate::tensor::{Scalar, Tensor};

/// Maximum relative error accepted in wide-precision mode.
pub const WIDE_TOLERANCE: f64 = 1e-6;
/// Initial step of the wide-precision suite; [`numeric_gradient`] shrinks it
/// per coordinate as needed.
pub const WIDE_EPS: f64 = 1e-2;

/// A scalar-valued function of graph inputs.
pub type ScalarFn<'a, T> = dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + 'a;

/// `|a − n| / max(|a|, |n|, 1e-8)`, maximized over coordinates.
pub fn max_relative_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
        })
        .fold(0.0, f64::max)
}

/// Analytic gradient of `f` with respect to every input.
pub fn analytic_gradients<T: Scalar>(f: &ScalarFn<'_, T>, inputs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    let mut grads = g.backward(loss)?;
    Ok(ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect())
}

/// Value of `f` and its kink pattern, see [`Graph::kink_pattern`].
fn evaluate_with_pattern<T: Scalar>(f: &ScalarFn<'_, T>, inputs: &[Tensor<T>]) -> Result<(f64, Vec<u32>)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = f(&mut g, &ids)?;
    Ok((g.value(loss).item()?.as_f64(), g.kink_pattern()))
}

/// Central-difference gradient of `f` with respect to input `which`.
///
/// Per coordinate the step starts at `eps` and halves until `x ± h` lie in the
/// same smooth piece as `x`, so no difference straddles a ReLU or pooling kink.
/// Central differences at `h, h/2, h/4, ...` are then extrapolated to zero step
/// (Ridders) and the tableau entry with the smallest error estimate is kept.
pub fn numeric_gradient<T: Scalar>(f: &ScalarFn<'_, T>, inputs: &[Tensor<T>], which: usize, eps: T) -> Result<Tensor<T>> {
    const LEVELS: usize = 6;
    const SHRINK: f64 = 2.0;
    const MIN_STEP: f64 = 1e-9;
    let mut work = inputs.to_vec();
    let base = evaluate_with_pattern(f, inputs)?.1;
    let mut out = Vec::with_capacity(inputs[which].numel());
    for i in 0..inputs[which].numel() {
        let orig = inputs[which].data()[i];
        // (difference quotient, both endpoints in the base piece)
        let mut central = |h: f64| -> Result<(f64, bool)> {
            let h = T::from_f64(h);
            work[which].data_mut()[i] = orig + h;
            let (plus, pp) = evaluate_with_pattern(f, &work)?;
            work[which].data_mut()[i] = orig - h;
            let (minus, pm) = evaluate_with_pattern(f, &work)?;
            work[which].data_mut()[i] = orig;
            // The realized step, not the requested one.
            let span = (orig + h).as_f64() - (orig - h).as_f64();
            Ok(((plus - minus) / span, pp == base && pm == base))
        };
        let mut h = eps.as_f64();
        let mut first = central(h)?;
        while !first.1 && h > MIN_STEP {
            h /= SHRINK;
            first = central(h)?;
        }
        let mut prev = vec![first.0];
        let (mut best, mut best_err) = (first.0, f64::INFINITY);
        for level in 1..LEVELS {
            h /= SHRINK;
            let mut row = vec![central(h)?.0];
            let mut fac = SHRINK * SHRINK;
            for j in 1..=level {
                let v = (row[j - 1] * fac - prev[j - 1]) / (fac - 1.0);
                fac *= SHRINK * SHRINK;
                let e = (v - row[j - 1]).abs().max((v - prev[j - 1]).abs());
                if e <= best_err {
                    best_err = e;
                    best = v;
                }
                row.push(v);
            }
            prev = row;
        }
        out.push(T::from_f64(best));
    }
    Tensor::new(inputs[which].shape().to_vec(), out)
}

/// Maximum relative error per input.
pub fn grad_check_many<T: Scalar>(f: &ScalarFn<'_, T>, inputs: &[Tensor<T>], eps: T) -> Result<Vec<f64>> {
    let analytic = analytic_gradients(f, inputs)?;
    (0..inputs.len())
        .map(|i| Ok(max_relative_error(&analytic[i], &numeric_gradient(f, inputs, i, eps)?)))
        .collect()
}

/// Maximum relative error of the gradient of `f` at `input`.
pub fn grad_check<T: Scalar>(
    f: impl Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
    input: &Tensor<T>,
    eps: T,
) -> Result<f64> {
    let wrapped = |g: &mut Graph<T>, ids: &[NodeId]| f(g, ids[0]);
    Ok(grad_check_many(&wrapped, std::slice::from_ref(input), eps)?[0])
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let d = Uniform::new(lo, hi);
    Tensor::from_fn(shape, |_| d.sample(rng))
}

/// `sum(y ⊙ r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = uniform(&mut rng, g.value(y).shape(), -1.0, 1.0);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn worst(errors: Vec<f64>) -> f64 {
    errors.into_iter().fold(0.0, f64::max)
}

fn check_conv(seed: u64, configs: &[([usize; 4], [usize; 4], usize, usize)]) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0f64;
    for &(xs, ws, stride, pad) in configs {
        let inputs = [uniform(&mut rng, &xs, -1.0, 1.0), uniform(&mut rng, &ws, -1.0, 1.0), uniform(&mut rng, &[ws[0]], -0.5, 0.5)];
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let y = g.conv2d(ids[0], ids[1], ids[2], stride, pad)?;
            project(g, y, seed)
        };
        err = err.max(worst(grad_check_many(&f, &inputs, WIDE_EPS)?));
    }
    Ok(err)
}

fn check_conv1(seed: u64) -> Result<f64> {
    check_conv(seed, &[([2, 3, 5, 5], [4, 3, 1, 1], 1, 0)])
}

fn check_conv3(seed: u64) -> Result<f64> {
    check_conv(seed, &[([2, 3, 6, 6], [4, 3, 3, 3], 1, 1), ([1, 2, 7, 7], [3, 2, 3, 3], 2, 0)])
}

fn check_conv5(seed: u64) -> Result<f64> {
    check_conv(seed, &[([1, 2, 7, 7], [3, 2, 5, 5], 1, 2)])
}

fn check_batch_norm(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0f64;
    for shape in [&[4, 3, 3, 3][..], &[6, 4]] {
        let c = shape[1];
        let inputs = [uniform(&mut rng, shape, -2.0, 2.0), uniform(&mut rng, &[c], 0.5, 1.5), uniform(&mut rng, &[c], -0.5, 0.5)];
        let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let (y, _) = g.batch_norm(ids[0], ids[1], ids[2], BnMode::Batch { eps: 1e-5 })?;
            project(g, y, seed)
        };
        err = err.max(worst(grad_check_many(&f, &inputs, WIDE_EPS)?));
    }
    Ok(err)
}

fn check_dense(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [uniform(&mut rng, &[3, 5], -1.0, 1.0), uniform(&mut rng, &[5, 4], -1.0, 1.0), uniform(&mut rng, &[4], -0.5, 0.5)];
    let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let y = g.dense(ids[0], ids[1], ids[2])?;
        project(g, y, seed)
    };
    Ok(worst(grad_check_many(&f, &inputs, WIDE_EPS)?))
}

fn check_maxpool(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut err = 0.0f64;
    for (k, s, p) in [(2, 2, 0), (3, 1, 1)] {
        let x = uniform(&mut rng, &[2, 2, 6, 6], -1.0, 1.0);
        let e = grad_check(
            |g, x| {
                let y = g.maxpool2d(x, k, s, p)?;
                project(g, y, seed)
            },
            &x,
            WIDE_EPS,
        )?;
        err = err.max(e);
    }
    Ok(err)
}

fn check_relu(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[4, 6], -1.0, 1.0);
    grad_check(
        |g, x| {
            let y = g.relu(x);
            project(g, y, seed)
        },
        &x,
        WIDE_EPS,
    )
}

fn check_softmax_ce(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = uniform(&mut rng, &[5, 2], -3.0, 3.0);
    let labels: Vec<usize> = (0..5).map(|_| rng.gen_range(0..2)).collect();
    grad_check(|g, x| Ok(g.softmax_cross_entropy(x, &labels)?.0), &logits, WIDE_EPS)
}

/// Gives biases, BN affine terms, and running statistics non-trivial values.
pub fn randomize_registry(reg: &mut ParamRegistry<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for i in 0..reg.params.len() {
        let name = reg.params.name(i).to_owned();
        let range = if name.ends_with(".bias") || name.ends_with(".beta") {
            Some((-0.5, 0.5))
        } else if name.ends_with(".gamma") {
            Some((0.5, 1.5))
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            let shape = reg.params.get(i).shape().to_vec();
            *reg.params.get_mut(i) = uniform(&mut rng, &shape, lo, hi);
        }
    }
    for i in 0..reg.buffers.len() {
        let shape = reg.buffers.get(i).shape().to_vec();
        let (lo, hi) = if reg.buffers.name(i).ends_with("running_var") { (0.5, 1.5) } else { (-0.5, 0.5) };
        *reg.buffers.get_mut(i) = uniform(&mut rng, &shape, lo, hi);
    }
}

fn check_inception_block(seed: u64) -> Result<f64> {
    let spec = InceptionBlockSpec::with_reductions(4, 2, 2);
    let mut block = InceptionBlock::<f64>::new(3, spec, seed)?;
    randomize_registry(&mut block.registry, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[2, 3, 6, 6], -1.0, 1.0);
    let mut inputs = vec![x];
    inputs.extend(block.registry.params.tensors().iter().cloned());

    // Inference-mode BN: every parameter, biases included.
    let frozen = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let y = block.forward_nodes(g, ids[0], &ids[1..], Buffers::Frozen(&block.registry.buffers), LayerMode::Inference)?;
        project(g, y, seed)
    };
    let mut err = worst(grad_check_many(&frozen, &inputs, WIDE_EPS)?);

    // Train-mode BN on a fixed batch: the input and everything except the conv
    // biases, whose gradient is identically zero under batch normalization.
    let batch = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let mut buffers = block.registry.buffers.clone();
        let y = block.forward_nodes(g, ids[0], &ids[1..], Buffers::Tracked(&mut buffers), LayerMode::Train)?;
        project(g, y, seed)
    };
    let analytic = analytic_gradients(&batch, &inputs)?;
    for (i, a) in analytic.iter().enumerate() {
        if i > 0 && block.registry.params.name(i - 1).ends_with("conv.bias") {
            continue;
        }
        err = err.max(max_relative_error(a, &numeric_gradient(&batch, &inputs, i, WIDE_EPS)?));
    }
    Ok(err)
}

/// Two blocks (F=4, α=β=2) around a 2×2 pool on a 1×3×12×12 input, then the
/// dense head and softmax cross-entropy, in inference mode.
pub fn miniature_gradcheck_config() -> ModelConfig {
    let spec = InceptionBlockSpec::with_reductions(4, 2, 2);
    let mut cfg = ModelConfig::miniature();
    cfg.input_shape = [3, 12, 12];
    cfg.stages = vec![Stage::Inception(spec), Stage::MaxPool { kernel: 2, stride: 2 }, Stage::Inception(spec)];
    cfg.hidden = vec![8];
    cfg
}

/// End-to-end check over every parameter of the miniature network.
pub fn check_miniature_model(seed: u64) -> Result<f64> {
    let mut model = Model::<f64>::build(&miniature_gradcheck_config(), seed)?;
    randomize_registry(model.registry_mut(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&mut rng, &[1, 3, 12, 12], -1.0, 1.0);
    let label = rng.gen_range(0..2usize);
    let mut inputs = vec![x];
    inputs.extend(model.registry().params.tensors().iter().cloned());
    let f = |g: &mut Graph<f64>, ids: &[NodeId]| {
        let logits = model.forward_nodes(
            g,
            ids[0],
            &ids[1..],
            Buffers::Frozen(&model.registry().buffers),
            LayerMode::Inference,
            None,
        )?;
        Ok(g.softmax_cross_entropy(logits, &[label])?.0)
    };
    Ok(worst(grad_check_many(&f, &inputs, WIDE_EPS)?))
}

/// One named check in the suite.
#[derive(Clone, Copy)]
pub struct GradCheckCase {
    pub kind: &'static str,
    pub run: fn(u64) -> Result<f64>,
}

/// Every layer kind the tape can differentiate, each listed once.
pub fn layer_checks() -> Vec<GradCheckCase> {
    vec![
        GradCheckCase { kind: "conv2d_1x1", run: check_conv1 },
        GradCheckCase { kind: "conv2d_3x3", run: check_conv3 },
        GradCheckCase { kind: "conv2d_5x5", run: check_conv5 },
        GradCheckCase { kind: "batch_norm_train", run: check_batch_norm },
        GradCheckCase { kind: "dense", run: check_dense },
        GradCheckCase { kind: "maxpool2d", run: check_maxpool },
        GradCheckCase { kind: "relu", run: check_relu },
        GradCheckCase { kind: "softmax_cross_entropy", run: check_softmax_ce },
        GradCheckCase { kind: "inception_block", run: check_inception_block },
        GradCheckCase { kind: "inception_model_mini", run: check_miniature_model },
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub kind: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CheckResult::passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.results {
            writeln!(
                f,
                "{:<24} max_rel_error={:.3e} tol={:.0e} {}",
                r.kind,
                r.max_rel_error,
                r.tolerance,
                if r.passed() { "PASS" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

pub fn run_checks(cases: &[GradCheckCase], seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let results = cases
        .iter()
        .map(|c| {
            Ok(CheckResult {
                kind: c.kind,
                max_rel_error: (c.run)(seed)?,
                tolerance,
            })
        })
        .collect::<Result<_>>()?;
    Ok(GradCheckReport { results })
}
