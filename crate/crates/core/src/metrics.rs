//! Binary classification metrics with IDC (label 1) as the positive class.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold on the positive-class probability.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total().max(1) as f64
    }
}

fn check_inputs(op: &'static str, scores: &[f32], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::shape(op, format!("{} labels", scores.len()), format!("{} labels", labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(op, format!("score {i} is {}", scores[i])));
    }
    if let Some(i) = labels.iter().position(|&l| l > 1) {
        return Err(Error::invalid(op, format!("label {i} is {}, not 0 or 1", labels[i])));
    }
    Ok(())
}

/// Tallies predictions `score >= threshold` against `labels`.
pub fn confusion(scores: &[f32], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs("confusion", scores, labels)?;
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (f64::from(s) >= threshold, l == 1) {
            (true, true) => cm.tp += 1,
            (true, false) => cm.fp += 1,
            (false, false) => cm.tn += 1,
            (false, true) => cm.fn_ += 1,
        }
    }
    Ok(cm)
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.positives() == 0 || cm.negatives() == 0 {
        return Err(Error::invalid("balanced_accuracy", format!("undefined with {} positives and {} negatives", cm.positives(), cm.negatives())));
    }
    let sensitivity = cm.tp as f64 / cm.positives() as f64;
    let specificity = cm.tn as f64 / cm.negatives() as f64;
    Ok((sensitivity + specificity) / 2.0)
}

/// Harmonic mean of precision and recall; 0 when there is no true positive.
pub fn f1_score(cm: &ConfusionMatrix) -> f64 {
    if cm.tp == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = tp/(tp+fp), R = tp/(tp+fn).
    2.0 * cm.tp as f64 / (2 * cm.tp + cm.fp + cm.fn_) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores at or above this value are called positive; +inf at the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From (0, 0) to (1, 1), one point per distinct score.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// ROC curve over every distinct score, AUC by the trapezoid rule.
pub fn roc_auc(scores: &[f32], labels: &[u8]) -> Result<RocCurve> {
    check_inputs("roc_auc", scores, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc", format!("needs both classes, got {pos} positives and {neg} negatives")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    // Twice the area in units of one (1/neg × 1/pos) cell; exact in integers.
    let mut area2: u128 = 0;
    for group in order.chunk_by(|&a, &b| scores[a] == scores[b]) {
        let (tp_prev, fp_prev) = (tp, fp);
        for &i in group {
            if labels[i] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        area2 += u128::from(fp - fp_prev) * u128::from(tp + tp_prev);
        points.push(RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: f64::from(scores[group[0]]),
        });
    }
    let auc = area2 as f64 / (2 * u128::from(pos) * u128::from(neg)) as f64;
    Ok(RocCurve { points, auc })
}

/// The evaluation summary written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub threshold: f64,
}

impl EvalReport {
    /// Requires both classes among `labels`.
    pub fn compute(scores: &[f32], labels: &[u8], threshold: f64) -> Result<(EvalReport, RocCurve)> {
        let cm = confusion(scores, labels, threshold)?;
        let roc = roc_auc(scores, labels)?;
        let report = EvalReport {
            n: cm.total(),
            tp: cm.tp,
            fp: cm.fp,
            tn: cm.tn,
            fn_: cm.fn_,
            balanced_accuracy: balanced_accuracy(&cm)?,
            f1: f1_score(&cm),
            auc: roc.auc,
            threshold,
        };
        Ok((report, roc))
    }

    pub fn confusion(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp,
            fp: self.fp,
            tn: self.tn,
            fn_: self.fn_,
        }
    }
}

/// One `fpr,tpr,threshold` row per curve point, with a header.
pub fn write_roc_csv<W: Write>(curve: &RocCurve, mut w: W) -> std::io::Result<()> {
    writeln!(w, "fpr,tpr,threshold")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    Ok(())
}
