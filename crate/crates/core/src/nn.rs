//! Stateful layers with explicit train/inference behavior.
//!
//! The functions here operate eagerly on tensors; [`crate::autodiff::Graph`]
//! records the same kernels on its tape for training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{fmt_shape, Scalar, Tensor};

pub const DEFAULT_BN_EPS: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerMode {
    Train,
    Inference,
}

/// Learned scale/shift plus running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta_shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[channels]),
            beta_shift: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: T::from_f64(DEFAULT_BN_EPS),
            momentum: T::from_f64(DEFAULT_BN_MOMENTUM),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, t) in [
            ("beta_shift", &self.beta_shift),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.numel() != c {
                return Err(Error::shape("batch_norm", format!("{c} channels"), format!("{name} {}", fmt_shape(t.shape()))));
            }
        }
        if !(self.eps > T::zero()) {
            return Err(Error::invalid("batch_norm", "eps must be positive"));
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::invalid("batch_norm", "running_var must be non-negative"));
        }
        Ok(())
    }

    /// `running ← (1−momentum)·running + momentum·batch`, storing the unbiased variance.
    pub fn absorb(&mut self, stats: &BatchStats<T>) {
        blend_running(
            self.running_mean.data_mut(),
            self.running_var.data_mut(),
            stats,
            self.momentum,
        );
    }
}

/// Per-channel statistics of one train-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used by the train-mode normalizer.
    pub var: Vec<T>,
    /// Elements per channel, `N·H·W`.
    pub count: usize,
}

pub(crate) fn blend_running<T: Scalar>(mean: &mut [T], var: &mut [T], stats: &BatchStats<T>, momentum: T) {
    let keep = T::one() - momentum;
    let m = T::from_f64(stats.count as f64);
    let correction = m / (m - T::one());
    for c in 0..mean.len() {
        mean[c] = keep * mean[c] + momentum * stats.mean[c];
        var[c] = keep * var[c] + momentum * stats.var[c] * correction;
    }
}

/// `(N, C, spatial)` for an `[N,C,H,W]` or `[N,C]` tensor.
pub(crate) fn bn_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [n, c] => Ok((n, c, 1)),
        [n, c, h, w] => Ok((n, c, h * w)),
        _ => Err(Error::shape(op, "[N,C] or [N,C,H,W]", fmt_shape(shape))),
    }
}

/// Saved values for the batch-norm backward rule.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub layout: (usize, usize, usize),
    pub train: bool,
}

pub(crate) enum BnStats<'a, T> {
    Batch,
    Running { mean: &'a [T], var: &'a [T] },
}

pub(crate) fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: BnStats<'_, T>,
    eps: T,
) -> Result<(Tensor<T>, BnSaved<T>, Option<BatchStats<T>>)> {
    let (n, c, s) = bn_layout("batch_norm", x.shape())?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{c} channels"),
            format!("gamma {} / beta {}", gamma.len(), beta.len()),
        ));
    }
    let data = x.data();
    let at = |b: usize, ch: usize, i: usize| (b * c + ch) * s + i;
    let count = n * s;
    let (mean, var, train) = match stats {
        BnStats::Batch => {
            if count < 2 {
                return Err(Error::invalid(
                    "batch_norm",
                    format!("train mode needs at least 2 values per channel, got {count}"),
                ));
            }
            let m = T::from_f64(count as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for b in 0..n {
                    for i in 0..s {
                        acc += data[at(b, ch, i)];
                    }
                }
                let mu = acc / m;
                let mut sq = T::zero();
                for b in 0..n {
                    for i in 0..s {
                        let d = data[at(b, ch, i)] - mu;
                        sq += d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            (mean, var, true)
        }
        BnStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm", format!("{c} running stats"), format!("{}/{}", mean.len(), var.len())));
            }
            (mean.to_vec(), var.to_vec(), false)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..s {
                let idx = at(b, ch, i);
                let h = (data[idx] - mean[ch]) * inv_std[ch];
                xhat[idx] = h;
                out[idx] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let batch = train.then(|| BatchStats { mean, var, count });
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BnSaved {
            xhat,
            inv_std,
            layout: (n, c, s),
            train,
        },
        batch,
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(saved: &BnSaved<T>, gamma: &[T], dy: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = saved.layout;
    let at = |b: usize, ch: usize, i: usize| (b * c + ch) * s + i;
    let m = T::from_f64((n * s) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for b in 0..n {
            for i in 0..s {
                let idx = at(b, ch, i);
                dgamma[ch] += dy[idx] * saved.xhat[idx];
                dbeta[ch] += dy[idx];
            }
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for ch in 0..c {
        let scale = gamma[ch] * saved.inv_std[ch];
        for b in 0..n {
            for i in 0..s {
                let idx = at(b, ch, i);
                dx[idx] = if saved.train {
                    scale * (dy[idx] - dbeta[ch] / m - saved.xhat[idx] * dgamma[ch] / m)
                } else {
                    scale * dy[idx]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch normalization. Train mode normalizes by batch statistics and folds them
/// into the running estimates; inference mode uses the running estimates only.
pub fn batch_norm<T: Scalar>(input: &Tensor<T>, state: &mut BatchNormState<T>, mode: LayerMode) -> Result<Tensor<T>> {
    state.validate()?;
    let stats = match mode {
        LayerMode::Train => BnStats::Batch,
        LayerMode::Inference => BnStats::Running {
            mean: state.running_mean.data(),
            var: state.running_var.data(),
        },
    };
    let (out, _, batch) = bn_forward(input, state.gamma.data(), state.beta_shift.data(), stats, state.eps)?;
    if let Some(batch) = batch {
        state.absorb(&batch);
    }
    Ok(out)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid("dropout", format!("rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, else `1/(1−rate)`.
pub(crate) fn dropout_mask<T: Scalar, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

pub fn dropout<T: Scalar, R: Rng + ?Sized>(input: &Tensor<T>, rate: f64, mode: LayerMode, rng: &mut R) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if mode == LayerMode::Inference || rate == 0.0 {
        return Ok(input.clone());
    }
    let mask = dropout_mask::<T, R>(input.numel(), rate, rng);
    let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Row-wise softmax with max subtraction. Rows of `[N,K]` logits.
pub(crate) fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    logits.expect_rank("softmax", 2)?;
    let k = logits.shape()[1];
    let mut probs = logits.data().to_vec();
    for row in probs.chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(logits.shape().to_vec(), probs)
}

pub(crate) fn check_labels(op: &'static str, n: usize, classes: usize, labels: &[usize]) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(op, format!("{n} labels"), format!("{} labels", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(op, format!("label {bad} outside 0..{classes}")));
    }
    Ok(())
}

/// Mean cross-entropy of softmax(logits) against integer labels, plus the
/// probability rows. The loss uses the log-sum-exp form so large logits do
/// not overflow.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    check_labels("softmax_cross_entropy", n, k, labels)?;
    let probs = softmax_rows(logits)?;
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        total += lse - row[label];
    }
    Ok((total / T::from_f64(n as f64), probs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn batch_norm_matches_direct_formula() {
        let x = Tensor::new(vec![4, 1], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let mut st = BatchNormState::<f64>::new(1);
        let y = batch_norm(&x, &mut st, LayerMode::Train).unwrap();
        // mean 2.5, biased variance 1.25
        let expect: Vec<f64> = [1.0, 2.0, 3.0, 4.0].iter().map(|v| (v - 2.5) / (1.25f64 + 1e-5).sqrt()).collect();
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((y.data()[0] + 1.3416).abs() < 1e-4);
        assert!((y.data()[1] + 0.4472).abs() < 1e-4);
        // running stats: 0.9·0 + 0.1·2.5 and 0.9·1 + 0.1·(1.25·4/3)
        assert!((st.running_mean.data()[0] - 0.25).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * 1.25 * 4.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_constant_channel_yields_shift() {
        let x = Tensor::<f32>::full(&[3, 2, 2, 2], 7.0);
        let mut st = BatchNormState::new(2);
        st.beta_shift = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let y = batch_norm(&x, &mut st, LayerMode::Train).unwrap();
        for b in 0..3 {
            for i in 0..4 {
                assert!((y.data()[(b * 2) * 4 + i] - 0.5).abs() < 1e-6);
                assert!((y.data()[(b * 2 + 1) * 4 + i] + 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_norm_inference_identity_stats() {
        let x = Tensor::<f32>::from_fn(&[2, 3, 2, 2], |i| i as f32 * 0.3 - 2.0);
        let mut st = BatchNormState::new(3);
        let y = batch_norm(&x, &mut st, LayerMode::Inference).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
        assert_eq!(st.running_mean.data(), &[0.0; 3]);
    }

    #[test]
    fn batch_norm_rejects_single_value_batch() {
        let x = Tensor::<f32>::ones(&[1, 4]);
        let mut st = BatchNormState::new(4);
        assert!(batch_norm(&x, &mut st, LayerMode::Train).is_err());
        let x = Tensor::<f32>::ones(&[1, 4, 1, 1]);
        assert!(batch_norm(&x, &mut st, LayerMode::Train).is_err());
        // Inference is fine.
        assert!(batch_norm(&x, &mut st, LayerMode::Inference).is_ok());
    }

    #[test]
    fn running_stats_converge_on_repeated_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn(&[8, 2, 3, 3], |_| rng.gen_range(-2.0..5.0));
        let mut st = BatchNormState::new(2);
        for _ in 0..1000 {
            batch_norm(&x, &mut st, LayerMode::Train).unwrap();
        }
        let (_, _, batch) = bn_forward(&x, st.gamma.data(), st.beta_shift.data(), BnStats::Batch, st.eps).unwrap();
        let batch = batch.unwrap();
        let m = batch.count as f32;
        for c in 0..2 {
            assert!((st.running_mean.data()[c] - batch.mean[c]).abs() < 1e-3);
            assert!((st.running_var.data()[c] - batch.var[c] * m / (m - 1.0)).abs() < 1e-3);
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu(&Tensor::<f32>::full(&[4], -3.0)).data(), &[0.0; 4]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(&[50], |i| i as f32);
        assert_eq!(dropout(&x, 0.0, LayerMode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, LayerMode::Inference, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.4, LayerMode::Inference, &mut rng).unwrap(), x);
        assert!(dropout(&x, 1.0, LayerMode::Train, &mut rng).is_err());
        assert!(dropout(&x, -0.1, LayerMode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_statistics() {
        let x = Tensor::<f32>::ones(&[100_000]);
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = dropout(&x, 0.4, LayerMode::Train, &mut rng).unwrap();
            let mean = y.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
            let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
            assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
            assert!((zeros - 0.4).abs() < 0.01, "zero fraction {zeros}");
        }
    }

    #[test]
    fn softmax_ce_examples() {
        let logits = Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap();
        let (loss, p) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(p.data(), &[0.5, 0.5]);

        let logits = Tensor::new(vec![1, 2], vec![2.0f64, 0.0]).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!((loss - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.1269).abs() < 1e-4);

        let logits = Tensor::new(vec![1, 2], vec![1000.0f32, 0.0]).unwrap();
        let (loss, p) = softmax_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-6);
        assert!(p.is_finite());
    }

    #[test]
    fn softmax_ce_rejects_bad_labels() {
        let logits = Tensor::<f32>::zeros(&[2, 2]);
        assert!(softmax_cross_entropy(&logits, &[0, 2]).is_err());
        assert!(softmax_cross_entropy(&logits, &[0]).is_err());
    }
}
