use idcnet_core::optim::epochs_since_best;
use idcnet_core::{early_stop_check, plateau_scheduler_step, TrainConfig};
use proptest::prelude::*;

/// Counter-based loop in the style of common deep-learning callbacks.
struct Reference {
    best: f64,
    wait_lr: usize,
    wait_stop: usize,
    lr: f64,
}

impl Reference {
    fn new(lr: f64) -> Self {
        Reference {
            best: f64::NEG_INFINITY,
            wait_lr: 0,
            wait_stop: 0,
            lr,
        }
    }

    /// Returns `true` when training should stop.
    fn epoch_end(&mut self, acc: f64, cfg: &TrainConfig) -> bool {
        if acc > self.best {
            self.best = acc;
            self.wait_lr = 0;
            self.wait_stop = 0;
        } else {
            self.wait_lr += 1;
            self.wait_stop += 1;
        }
        if self.wait_stop >= cfg.early_stop_patience {
            return true;
        }
        if self.wait_lr >= cfg.plateau_patience {
            self.lr = (self.lr * cfg.lr_factor).max(cfg.lr_min);
            self.wait_lr = 0;
        }
        false
    }
}

/// Drives the pure functions the way the training loop does.
fn replay(history: &[f64], cfg: &TrainConfig) -> (Vec<f64>, Option<usize>) {
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

fn replay_reference(history: &[f64], cfg: &TrainConfig) -> (Vec<f64>, Option<usize>) {
    let mut r = Reference::new(cfg.lr_init);
    let mut lrs = Vec::new();
    for (i, &acc) in history.iter().enumerate() {
        lrs.push(r.lr);
        if r.epoch_end(acc, cfg) {
            return (lrs, Some(i + 1));
        }
    }
    (lrs, None)
}

#[test]
fn best_at_epoch_five_stops_at_fifty_five() {
    let cfg = TrainConfig::default();
    let history: Vec<f64> = (1..=200).map(|e| if e <= 5 { 0.5 + 0.05 * e as f64 } else { 0.7 }).collect();
    let (lrs, stop) = replay(&history, &cfg);
    assert_eq!(stop, Some(55));
    assert_eq!(lrs[14], 1e-3);
    assert_eq!(lrs[15], 5e-4);
    assert_eq!(lrs[25], 2.5e-4);
    assert_eq!(lrs[45], 6.25e-5);
    assert_eq!(lrs.len(), 55);
}

#[test]
fn improvement_inside_the_window_keeps_the_rate() {
    let cfg = TrainConfig::default();
    let mut history = vec![0.5; 9];
    history.push(0.6);
    history.extend([0.55; 9]);
    assert_eq!(plateau_scheduler_step(&history, 1e-3, &cfg), 1e-3);
    history.push(0.55);
    assert_eq!(plateau_scheduler_step(&history, 1e-3, &cfg), 5e-4);
}

#[test]
fn rate_clamps_at_the_floor() {
    let cfg = TrainConfig::default();
    let history = [0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
    assert_eq!(plateau_scheduler_step(&history, 1.5e-10, &cfg), 1e-10);
}

#[test]
fn early_stop_boundaries() {
    let cfg = TrainConfig::default();
    let rising: Vec<f64> = (0..80).map(f64::from).collect();
    assert!(!early_stop_check(&rising, &cfg));
    let mut flat = vec![1.0];
    flat.extend([0.0; 49]);
    assert!(!early_stop_check(&flat, &cfg));
    flat.push(1.0);
    assert!(early_stop_check(&flat, &cfg));
    assert!(!early_stop_check(&[], &cfg));
}

fn histories() -> impl Strategy<Value = Vec<f64>> {
    // Few distinct values so ties and long plateaus are common.
    prop::collection::vec(0u8..6, 1..400).prop_map(|v| v.into_iter().map(|a| f64::from(a) / 5.0).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pure_functions_agree_with_the_stateful_loop(
        history in histories(),
        plateau in 1usize..15,
        stop in 1usize..60,
    ) {
        let cfg = TrainConfig {
            plateau_patience: plateau,
            early_stop_patience: stop,
            lr_min: 1e-5,
            ..TrainConfig::default()
        };
        prop_assert_eq!(replay(&history, &cfg), replay_reference(&history, &cfg));
    }

    #[test]
    fn rate_is_non_increasing_and_floored(history in histories()) {
        let cfg = TrainConfig { lr_min: 1e-5, plateau_patience: 2, early_stop_patience: 1000, ..TrainConfig::default() };
        let (lrs, _) = replay(&history, &cfg);
        for w in lrs.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(lrs.iter().all(|&lr| lr >= cfg.lr_min));
    }

    #[test]
    fn staleness_counts_from_the_first_best(history in histories()) {
        let best = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = history.iter().position(|&a| a == best).unwrap();
        prop_assert_eq!(epochs_since_best(&history), history.len() - 1 - first);
    }
}
