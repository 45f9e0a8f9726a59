use std::time::Instant;

use idcnet_core::data::synth::blob_source;
use idcnet_core::data::Normalization;
use idcnet_core::model::ModelConfig;
use idcnet_core::train::{accuracy, RunArtifacts, Silent};
use idcnet_core::{build_model, train, EpochRecord, TrainConfig};

fn overfit_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 200,
        early_stop_patience: 20,
        seed: 17,
        ..TrainConfig::default()
    }
}

#[test]
fn miniature_network_memorizes_thirty_two_blobs() {
    let data = blob_source(32, 5, Normalization::Global).unwrap();
    let model = build_model(&ModelConfig::miniature(), 3).unwrap();
    let started = Instant::now();
    let out = train(model, &data, &data, &overfit_config(), &mut Silent).unwrap();
    let secs = started.elapsed().as_secs_f64();
    println!("best epoch {} acc {} after {} epochs in {secs:.1}s", out.best_epoch, out.best_val_accuracy, out.log.len());
    assert_eq!(out.best_val_accuracy, 1.0);
    assert_eq!(accuracy(&out.best, &data).unwrap(), 1.0);
    let max = out.log.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
    assert_eq!(out.best_val_accuracy, max);
}

fn without_time(log: &[EpochRecord]) -> Vec<(usize, u64, u64, u64)> {
    log.iter().map(|r| (r.epoch, r.train_loss.to_bits(), r.val_accuracy.to_bits(), r.lr.to_bits())).collect()
}

#[test]
fn fixed_seed_reproduces_the_log() {
    let data = blob_source(12, 1, Normalization::Global).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        max_epochs: 4,
        seed: 2,
        ..TrainConfig::default()
    };
    let run = || train(build_model(&ModelConfig::miniature(), 4).unwrap(), &data, &data, &cfg, &mut Silent).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(without_time(&a.log), without_time(&b.log));
    assert_eq!(a.log.len(), 4);
    let other = train(build_model(&ModelConfig::miniature(), 4).unwrap(), &data, &data, &TrainConfig { seed: 3, ..cfg.clone() }, &mut Silent).unwrap();
    assert_ne!(without_time(&a.log), without_time(&other.log));
}

#[test]
fn learning_rate_never_increases_nor_drops_below_floor() {
    let data = blob_source(8, 9, Normalization::Global).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_epochs: 12,
        plateau_patience: 1,
        lr_min: 2e-4,
        early_stop_patience: 100,
        ..TrainConfig::default()
    };
    let out = train(build_model(&ModelConfig::miniature(), 0).unwrap(), &data, &data, &cfg, &mut Silent).unwrap();
    for pair in out.log.windows(2) {
        assert!(pair[1].lr <= pair[0].lr);
    }
    assert!(out.log.iter().all(|r| r.lr >= cfg.lr_min));
}

#[test]
fn artifacts_hold_log_lines_and_best_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = blob_source(6, 2, Normalization::Global).unwrap();
    let cfg = TrainConfig {
        batch_size: 3,
        max_epochs: 3,
        ..TrainConfig::default()
    };
    let mut obs = RunArtifacts::create(dir.path().join("log.jsonl"), dir.path().join("best.idcn")).unwrap();
    let out = train(build_model(&ModelConfig::miniature(), 0).unwrap(), &data, &data, &cfg, &mut obs).unwrap();
    drop(obs);
    let text = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let lines: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.log);
    let loaded = idcnet_core::model::load_checkpoint(&dir.path().join("best.idcn")).unwrap();
    assert_eq!(accuracy(&loaded, &data).unwrap(), out.best_val_accuracy);
}

#[test]
fn rejects_empty_and_oversized_batches() {
    let data = blob_source(4, 0, Normalization::Global).unwrap();
    let empty = blob_source(0, 0, Normalization::Global).unwrap();
    let model = || build_model(&ModelConfig::miniature(), 0).unwrap();
    assert!(train(model(), &empty, &data, &TrainConfig::default(), &mut Silent).is_err());
    assert!(train(model(), &data, &data, &TrainConfig::default(), &mut Silent).is_err());
    let bad = TrainConfig { lr_min: 1.0, ..TrainConfig::default() };
    assert!(train(model(), &data, &data, &bad, &mut Silent).is_err());
}
