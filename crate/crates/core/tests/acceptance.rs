//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Criterion 7 needs the public patch dataset under `IDC_DATASET` and
//! reports SKIP otherwise.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use idcnet_core::data::synth::{blob_source, synthetic_records};
use idcnet_core::data::{make_split, scan_dataset, FileSource, InMemorySource, Normalization, PatchRecord, Split, SplitSizes, SplitUnit};
use idcnet_core::gradcheck::{layer_checks, run_checks, WIDE_TOLERANCE};
use idcnet_core::heatmap::{assemble_slide, default_sigma, gaussian_smooth, write_slide_outputs, Field, HeatmapOptions};
use idcnet_core::metrics::{balanced_accuracy, confusion, f1_score, roc_auc, ConfusionMatrix, EvalReport};
use idcnet_core::model::{read_checkpoint, write_checkpoint, StageShape};
use idcnet_core::nn::{self, BatchNormState, LayerMode};
use idcnet_core::optim::epochs_since_best;
use idcnet_core::train::{accuracy, score_source, Silent};
use idcnet_core::{build_model, early_stop_check, plateau_scheduler_step, train, Model, ModelConfig, Stage, Tensor, TrainConfig};
use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(limit: Duration, started: Instant, what: &str) -> std::result::Result<(), String> {
    let took = started.elapsed();
    ensure(took < limit, || format!("{what} took {:.1}s, limit {}s", took.as_secs_f64(), limit.as_secs()))
}

fn gradient_correctness() -> Check {
    let started = Instant::now();
    let report = ok(run_checks(&layer_checks(), 0, WIDE_TOLERANCE))?;
    let worst = report.results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    ensure(report.passed(), || format!("\n{report}"))?;
    within(Duration::from_secs(60), started, "gradcheck")?;
    Ok(format!("{} checks, worst relative error {worst:.2e}, {:.1}s", report.results.len(), started.elapsed().as_secs_f64()))
}

fn architecture_shape_law() -> Check {
    let cfg = ModelConfig::standard();
    let model: Model = ok(build_model(&cfg, 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[4, 3, 50, 50], |_| rng.gen_range(-1.0f32..1.0));
    let p = ok(model.predict_proba(&x))?;
    ensure(p.shape() == [4, 2], || format!("output shape {:?}", p.shape()))?;
    let mut trace = vec![StageShape { channels: 3, height: 50, width: 50 }];
    trace.extend(ok(cfg.spatial_trace())?);
    let mut pooled = vec![50];
    for (stage, pair) in cfg.stages.iter().zip(trace.windows(2)) {
        match stage {
            Stage::Inception(spec) => ensure(pair[1].channels == 4 * spec.features, || format!("block F={} has {} channels", spec.features, pair[1].channels))?,
            Stage::MaxPool { .. } => pooled.push(pair[1].height),
        }
    }
    ensure(pooled == [50, 25, 12, 6], || format!("pool trace {pooled:?}"))?;
    Ok(format!("(4,3,50,50) -> (4,2), pool trace {pooled:?}, {} parameters", model.trainable_count()))
}

fn channel_moments(y: &Tensor) -> Vec<(f64, f64)> {
    let s = y.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    (0..c)
        .map(|ch| {
            let vals: Vec<f64> = (0..n).flat_map(|b| y.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane].iter().map(|&v| f64::from(v))).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            (mean, vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

fn bn_invariants() -> Check {
    let mut worst_mean: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    let mut worst_affine: f32 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (scale, shift) = (rng.gen_range(0.1f32..10.0), rng.gen_range(-5.0f32..5.0));
        let x = Tensor::from_fn(&[32, 4, 3, 3], |_| shift + scale * rng.gen_range(-1.0f32..1.0));
        let y = ok(nn::batch_norm(&x, &mut BatchNormState::new(4), LayerMode::Train))?;
        for (m, v) in channel_moments(&y) {
            worst_mean = worst_mean.max(m.abs());
            worst_var = worst_var.max((v - 1.0).abs());
        }
        let d = rng.gen_range(-3.0f32..3.0);
        for c in [0.5f32, 3.0] {
            let z = ok(nn::batch_norm(&x.map(|v| c * v + d), &mut BatchNormState::new(4), LayerMode::Train))?;
            worst_affine = y.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(worst_affine, f32::max);
        }
    }
    ensure(worst_mean < 1e-4 && worst_var < 1e-3 && worst_affine < 1e-3, || format!("|mean| {worst_mean:.2e}, |var-1| {worst_var:.2e}, affine {worst_affine:.2e}"))?;
    Ok(format!("|mean| {worst_mean:.1e}, |var-1| {worst_var:.1e}, affine drift {worst_affine:.1e}"))
}

fn reference_schedule(history: &[f64], cfg: &TrainConfig) -> (Vec<f64>, Option<usize>) {
    let (mut best, mut wait_lr, mut wait_stop, mut lr) = (f64::NEG_INFINITY, 0, 0, cfg.lr_init);
    let mut lrs = Vec::new();
    for (i, &acc) in history.iter().enumerate() {
        lrs.push(lr);
        if acc > best {
            best = acc;
            wait_lr = 0;
            wait_stop = 0;
        } else {
            wait_lr += 1;
            wait_stop += 1;
        }
        if wait_stop >= cfg.early_stop_patience {
            return (lrs, Some(i + 1));
        }
        if wait_lr >= cfg.plateau_patience {
            lr = (lr * cfg.lr_factor).max(cfg.lr_min);
            wait_lr = 0;
        }
    }
    (lrs, None)
}

fn library_schedule(history: &[f64], cfg: &TrainConfig) -> (Vec<f64>, Option<usize>) {
    let mut lr = cfg.lr_init;
    let mut lrs = Vec::new();
    for e in 1..=history.len() {
        lrs.push(lr);
        if early_stop_check(&history[..e], cfg) {
            return (lrs, Some(e));
        }
        lr = plateau_scheduler_step(&history[..e], lr, cfg);
    }
    (lrs, None)
}

fn optimizer_protocol() -> Check {
    let cfg = TrainConfig::default();
    let history: Vec<f64> = (1..=1000).map(|e| if e <= 5 { 0.5 + 0.05 * e as f64 } else { 0.7 }).collect();
    let (lrs, stop) = library_schedule(&history, &cfg);
    ensure(stop == Some(55), || format!("stopped at {stop:?}"))?;
    ensure(lrs[14] == 1e-3 && lrs[15] == 5e-4, || format!("rate around epoch 15: {:?}", &lrs[13..17]))?;
    let stale: Vec<f64> = std::iter::once(1.0).chain(std::iter::repeat_n(0.0, 10)).collect();
    ensure(plateau_scheduler_step(&stale, 1.5e-10, &cfg) == 1e-10, || "floor not applied".into())?;
    ensure(epochs_since_best(&history[..55]) == 50, || "staleness count".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for case in 0..1000 {
        let len = rng.gen_range(1..300);
        let levels = rng.gen_range(2..8);
        let h: Vec<f64> = (0..len).map(|_| f64::from(rng.gen_range(0..levels)) / f64::from(levels)).collect();
        let c = TrainConfig {
            plateau_patience: rng.gen_range(1..15),
            early_stop_patience: rng.gen_range(1..60),
            lr_min: 1e-6,
            ..TrainConfig::default()
        };
        let (a, b) = (library_schedule(&h, &c), reference_schedule(&h, &c));
        ensure(a == b, || format!("random history {case} diverges"))?;
    }
    Ok("halving at epoch 15, floor 1e-10, stop at epoch 55; 1000 random histories agree".into())
}

fn tally(scores: &[f32], labels: &[u8], t: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        let called = f64::from(s) >= t;
        *match (called, l) {
            (true, 1) => &mut cm.tp,
            (true, _) => &mut cm.fp,
            (false, 0) => &mut cm.tn,
            (false, _) => &mut cm.fn_,
        } += 1;
    }
    cm
}

fn concordance(scores: &[f32], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs as f64
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_auc: f64 = 0.0;
    for case in 0..200 {
        let n = rng.gen_range(2..=500);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f32> = labels.iter().map(|&l| (rng.gen_range(0..30) + 6 * u32::from(l)) as f32 / 36.0).collect();
        let t = rng.gen_range(0.0..1.0);
        let cm = ok(confusion(&scores, &labels, t))?;
        let want = tally(&scores, &labels, t);
        ensure(cm == want, || format!("case {case}: counts {cm:?} vs {want:?}"))?;
        let sens = want.tp as f64 / (want.tp + want.fn_) as f64;
        let spec = want.tn as f64 / (want.tn + want.fp) as f64;
        ensure(ok(balanced_accuracy(&cm))? == (sens + spec) / 2.0, || format!("case {case}: balanced accuracy"))?;
        let f1 = if want.tp == 0 { 0.0 } else { 2.0 * want.tp as f64 / (2 * want.tp + want.fp + want.fn_) as f64 };
        ensure(f1_score(&cm) == f1, || format!("case {case}: f1"))?;
        let auc = ok(roc_auc(&scores, &labels))?.auc;
        worst_auc = worst_auc.max((auc - concordance(&scores, &labels)).abs());
    }
    ensure(worst_auc <= 1e-9, || format!("AUC deviates by {worst_auc:e}"))?;
    Ok(format!("200 instances, counts exact, AUC deviation {worst_auc:.1e}"))
}

fn learning_capability() -> Check {
    let started = Instant::now();
    let data = ok(blob_source(32, 5, Normalization::Global))?;
    let model = ok(build_model(&ModelConfig::miniature(), 3))?;
    let cfg = TrainConfig {
        max_epochs: 200,
        early_stop_patience: 20,
        seed: 17,
        ..TrainConfig::default()
    };
    let out = ok(train(model, &data, &data, &cfg, &mut Silent))?;
    let acc = ok(accuracy(&out.best, &data))?;
    ensure(acc == 1.0, || format!("train accuracy {acc} after {} epochs", out.log.len()))?;
    within(Duration::from_secs(300), started, "overfit run")?;
    Ok(format!("100% train accuracy at epoch {}, {:.1}s", out.best_epoch, started.elapsed().as_secs_f64()))
}

/// 1,000 positives and 1,000 negatives drawn with a fixed seed.
fn balanced_subset(records: &[PatchRecord], per_class: usize, seed: u64) -> std::result::Result<Vec<PatchRecord>, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * per_class);
    for label in [0u8, 1] {
        let mut class: Vec<&PatchRecord> = records.iter().filter(|r| r.label == label).collect();
        ensure(class.len() >= per_class, || format!("only {} records of class {label}", class.len()))?;
        class.shuffle(&mut rng);
        out.extend(class[..per_class].iter().map(|r| (*r).clone()));
    }
    Ok(out)
}

fn desk_scale_run(root: &Path) -> Check {
    let started = Instant::now();
    let scan = ok(scan_dataset(root))?;
    let subset = balanced_subset(&scan.records, 1000, 0)?;
    let sizes = SplitSizes::Counts {
        train: 1400,
        val: 300,
        test: Some(300),
        test_positives: Some(150),
    };
    let plan = ok(make_split(&subset, 0, sizes, SplitUnit::Patch))?;
    let load = |s| -> std::result::Result<InMemorySource, String> { ok(InMemorySource::preload(&FileSource::new(ok(plan.records(s))?, Normalization::Global))) };
    let (tr, va, te) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    let cfg = TrainConfig {
        max_epochs: 30,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = ok(build_model(&ModelConfig::standard_scaled(8, 64), 0))?;
    let out = ok(train(model, &tr, &va, &cfg, &mut Silent))?;
    let scores = ok(score_source(&out.best, &te))?;
    let (report, _) = ok(EvalReport::compute(&scores, te.labels(), 0.5))?;
    ensure(report.balanced_accuracy > 0.70, || format!("held-out balanced accuracy {:.3}", report.balanced_accuracy))?;
    Ok(format!(
        "held-out balanced accuracy {:.3}, F1 {:.3}, AUC {:.3} after {} epochs, {:.0}s",
        report.balanced_accuracy,
        report.f1,
        report.auc,
        out.log.len(),
        started.elapsed().as_secs_f64()
    ))
}

fn split_fidelity() -> Check {
    let records = synthetic_records(277_525, 78_789, 279);
    let all: BTreeSet<&PathBuf> = records.iter().map(|r| &r.path).collect();
    for seed in [0, 1, 2018] {
        let plan = ok(make_split(&records, seed, SplitSizes::published(), SplitUnit::Patch))?;
        let (tr, va, te) = (plan.counts(Split::Train), plan.counts(Split::Val), plan.counts(Split::Test));
        ensure((tr.total, tr.positive) == (94_543, 47_272), || format!("seed {seed}: train {tr:?}"))?;
        ensure((va.total, va.positive) == (31_514, 15_757), || format!("seed {seed}: val {va:?}"))?;
        ensure((te.total, te.positive) == (151_465, 15_757), || format!("seed {seed}: test {te:?}"))?;
        let mut union = BTreeSet::new();
        let mut listed = 0;
        for s in [Split::Train, Split::Val, Split::Test, Split::Excluded] {
            listed += plan.paths(s).len();
            union.extend(plan.paths(s).iter());
        }
        ensure(listed == union.len(), || format!("seed {seed}: splits overlap"))?;
        ensure(union == all, || format!("seed {seed}: splits do not cover the records"))?;
    }
    Ok("seeds 0, 1, 2018: exact counts, disjoint, covering (3 surplus records excluded)".into())
}

fn heatmap_pipeline() -> Check {
    let flat = ok(gaussian_smooth(&Field::constant(60, 40, 0.62), 25, default_sigma(25)))?;
    let drift = flat.data.iter().map(|v| (v - 0.62).abs()).fold(0.0, f64::max);
    ensure(drift <= 1e-6, || format!("constant field drifts by {drift:e}"))?;
    let mut impulse = Field::constant(61, 61, 0.0);
    impulse.data[30 * 61 + 30] = 1.0;
    let mass: f64 = ok(gaussian_smooth(&impulse, 25, default_sigma(25)))?.data.iter().sum();
    ensure((mass - 1.0).abs() <= 1e-7, || format!("impulse mass {mass}"))?;

    let records: Vec<PatchRecord> = (0..3)
        .flat_map(|r| (0..4).map(move |c| idcnet_core::data::parse_patch_path(format!("77/0/77_idx5_x{}_y{}_class0.png", c * 50, r * 50)).unwrap()))
        .collect();
    let probs: Vec<f32> = (0..12).map(|i| i as f32 / 11.0).collect();
    let render = || -> std::result::Result<Vec<Vec<u8>>, String> {
        let dir = ok(tempfile::tempdir())?;
        let canvas = ok(assemble_slide(&records, &probs, |r| Ok(RgbImage::from_fn(50, 50, |x, y| Rgb([(x + r.x) as u8, (y + r.y) as u8, 128])))))?;
        let (out, _) = ok(write_slide_outputs(&canvas, &HeatmapOptions::default(), dir.path()))?;
        [out.original, out.heatmap, out.overlay, out.summary].iter().map(|p| ok(std::fs::read(p))).collect()
    };
    ensure(render()? == render()?, || "renders differ between runs".into())?;
    Ok(format!("constant drift {drift:.1e}, impulse mass error {:.1e}, renders byte-identical", (mass - 1.0).abs()))
}

fn checkpoint_round_trip() -> Check {
    let data = ok(blob_source(8, 3, Normalization::Global))?;
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 2,
        ..TrainConfig::default()
    };
    // Trained, so running statistics differ from their initial values.
    let model = ok(train(ok(build_model(&ModelConfig::miniature(), 2))?, &data, &data, &cfg, &mut Silent))?.best;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch = Tensor::from_fn(&[5, 3, 50, 50], |_| rng.gen_range(-2.0f32..2.0));
    let before = ok(model.predict_proba(&batch))?;
    let mut bytes = Vec::new();
    ok(write_checkpoint(&model, &mut bytes))?;
    let loaded = ok(read_checkpoint(bytes.as_slice()))?;
    let after = ok(loaded.predict_proba(&batch))?;
    let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same, || "predictions changed across save/load".into())?;
    Ok(format!("{} bytes, predictions bitwise identical", bytes.len()))
}

fn run(check: impl FnOnce() -> Check) -> Outcome {
    match catch_unwind(AssertUnwindSafe(check)) {
        Ok(Ok(detail)) => Outcome::Pass(detail),
        Ok(Err(detail)) => Outcome::Fail(detail),
        Err(panic) => Outcome::Fail(panic.downcast_ref::<String>().cloned().or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let dataset = std::env::var_os("IDC_DATASET").map(PathBuf::from);
    // IDC_CRITERIA=7,10 runs only those criteria; the rest report SKIP.
    let selected: Option<Vec<usize>> = std::env::var("IDC_CRITERIA")
        .ok()
        .map(|v| v.split(',').map(|n| n.trim().parse().expect("IDC_CRITERIA is a comma list of numbers")).collect());
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(|| run(gradient_correctness))),
        ("architecture shape law", Box::new(|| run(architecture_shape_law))),
        ("batch-norm invariants", Box::new(|| run(bn_invariants))),
        ("optimizer and scheduler protocol", Box::new(|| run(optimizer_protocol))),
        ("metric oracle equivalence", Box::new(|| run(metric_oracles))),
        ("learning capability", Box::new(|| run(learning_capability))),
        (
            "desk-scale real-data smoke test",
            Box::new(move || match dataset {
                Some(root) => run(|| desk_scale_run(&root)),
                None => Outcome::Skip("IDC_DATASET not set; this criterion needs a real patch dataset".into()),
            }),
        ),
        ("split fidelity", Box::new(|| run(split_fidelity))),
        ("heatmap pipeline", Box::new(|| run(heatmap_pipeline))),
        ("checkpoint round-trip", Box::new(|| run(checkpoint_round_trip))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if selected.as_ref().is_some_and(|s| !s.contains(&(i + 1))) {
            println!("criterion {:>2} SKIP {name}: not selected by IDC_CRITERIA", i + 1);
            continue;
        }
        let (tag, detail) = match check() {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
