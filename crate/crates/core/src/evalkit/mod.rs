//! Detection metrics and the evaluation campaign.
//!
//! The positive class is `unsafe`: a sample is predicted unsafe when its
//! reconstruction error is at or above the threshold.

mod experiment;

pub use experiment::{
    collect_firmware, collect_suite, config_digest, device_seed, firmware_profile, mutants, run_experiment, train_seed, write_artifacts, AverageMetrics,
    DeviceRole, ExperimentConfig, ExperimentError, ExperimentReport, FirmwareResult, FirmwareTraces, MutantDetection,
    Provenance, Suite, TwinResult,
};

use serde::Serialize;

use crate::trace::Label;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("no samples to score")]
    Empty,
    #[error("{errors} errors but {labels} labels")]
    LengthMismatch { errors: usize, labels: usize },
    #[error("error {0} is not finite")]
    NonFinite(usize),
    #[error("ROC-AUC needs both classes present")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> usize {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> usize {
        self.tn + self.fp
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub counts: Counts,
    pub accuracy: f64,
    pub precision: f64,
    pub tpr: f64,
    pub tnr: f64,
    pub fpr: f64,
    pub fnr: f64,
    /// F1 of the unsafe class.
    pub f1: f64,
    /// F1 of the safe class.
    pub f1_safe: f64,
    /// `None` when only one class is present.
    pub roc_auc: Option<f64>,
}

impl MetricsReport {
    /// Derived metrics from counts alone. Undefined ratios are reported as 0.
    pub fn from_counts(c: Counts, roc_auc: Option<f64>) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let tpr = ratio(c.tp, c.positives());
        let tnr = ratio(c.tn, c.negatives());
        let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_);
        let f1_safe = ratio(2 * c.tn, 2 * c.tn + c.fn_ + c.fp);
        MetricsReport {
            counts: c,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            tpr,
            tnr,
            fpr: ratio(c.fp, c.negatives()),
            fnr: ratio(c.fn_, c.positives()),
            f1,
            f1_safe,
            roc_auc,
        }
    }
}

fn check(errors: &[f64], labels: &[Label]) -> Result<(), EvalError> {
    if errors.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            errors: errors.len(),
            labels: labels.len(),
        });
    }
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(i) = errors.iter().position(|e| !e.is_finite()) {
        return Err(EvalError::NonFinite(i));
    }
    Ok(())
}

/// Confusion counts at threshold `t`.
pub fn confusion(errors: &[f64], labels: &[Label], t: f64) -> Result<Counts, EvalError> {
    check(errors, labels)?;
    let mut c = Counts::default();
    for (&e, &l) in errors.iter().zip(labels) {
        match (e >= t, l.is_unsafe()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Score reconstruction errors against labels at threshold `t`.
pub fn score(errors: &[f64], labels: &[Label], t: f64) -> Result<MetricsReport, EvalError> {
    let c = confusion(errors, labels, t)?;
    let auc = match roc_auc(errors, labels) {
        Ok(a) => Some(a),
        Err(EvalError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport::from_counts(c, auc))
}

/// Probability that a random unsafe error exceeds a random safe error,
/// ties counting one half. Computed from mid-ranks in `O(n log n)`.
pub fn roc_auc(errors: &[f64], labels: &[Label]) -> Result<f64, EvalError> {
    check(errors, labels)?;
    let n_pos = labels.iter().filter(|l| l.is_unsafe()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && errors[order[j + 1]] == errors[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; a tie group shares the mean of its ranks.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k].is_unsafe()).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Equal-width histogram of `errors` over `[lo, hi]`; the last bin is closed.
pub fn histogram(errors: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut h = vec![0; bins];
    if bins == 0 {
        return h;
    }
    let width = (hi - lo) / bins as f64;
    for &e in errors {
        if !(e >= lo && e <= hi) {
            continue;
        }
        let b = if width > 0.0 { ((e - lo) / width) as usize } else { 0 };
        h[b.min(bins - 1)] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Safe as S, Unsafe as U};

    #[test]
    fn perfectly_separated() {
        let m = score(&[0.1, 0.2, 0.8, 0.9], &[S, S, U, U], 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.roc_auc, Some(1.0));
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn everything_called_safe() {
        let m = score(&[0.1, 0.1, 0.1, 0.1], &[S, U, S, U], 1.0).unwrap();
        assert_eq!((m.tpr, m.tnr, m.accuracy), (0.0, 1.0, 0.5));
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.roc_auc, Some(0.5));
    }

    #[test]
    fn hand_counted_ten_samples() {
        // Six unsafe, four safe; one unsafe below and one safe above t = 0.5.
        let e = [0.9, 0.8, 0.7, 0.6, 0.55, 0.3, 0.1, 0.2, 0.4, 0.65];
        let l = [U, U, U, U, U, U, S, S, S, S];
        let m = score(&e, &l, 0.5).unwrap();
        assert_eq!(m.counts, Counts { tp: 5, fp: 1, tn: 3, fn_: 1 });
        assert_eq!(m.accuracy, 0.8);
        assert_eq!(m.precision, 5.0 / 6.0);
        assert_eq!(m.tpr, 5.0 / 6.0);
        assert_eq!(m.tnr, 0.75);
        assert_eq!(m.fpr, 0.25);
        assert_eq!(m.fnr, 1.0 / 6.0);
        assert_eq!(m.f1, 10.0 / 12.0);
        assert_eq!(m.f1_safe, 6.0 / 8.0);
        // Unsafe-over-safe pairs: 0.9, 0.8, 0.7 beat all four safe errors,
        // 0.6 and 0.55 beat three, 0.3 beats two.
        assert!((m.roc_auc.unwrap() - 20.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn auc_single_pair_and_ties() {
        assert_eq!(roc_auc(&[0.1, 0.9], &[S, U]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[S, U]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.1], &[S, U]).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert_eq!(score(&[], &[], 0.0), Err(EvalError::Empty));
        assert_eq!(roc_auc(&[0.1, 0.2], &[S, S]), Err(EvalError::SingleClass));
        assert!(matches!(score(&[0.1], &[S, U], 0.0), Err(EvalError::LengthMismatch { .. })));
        assert_eq!(score(&[f64::NAN], &[S], 0.0), Err(EvalError::NonFinite(0)));
        assert_eq!(score(&[0.1, 0.2], &[S, S], 0.15).unwrap().roc_auc, None);
    }

    #[test]
    fn identical_distributions_give_half() {
        use rand::Rng;
        let mut r = crate::rng::chacha(3);
        let e: Vec<f64> = (0..10_000).map(|_| r.gen()).collect();
        let l: Vec<Label> = (0..10_000).map(|i| if i % 2 == 0 { S } else { U }).collect();
        assert!((roc_auc(&e, &l).unwrap() - 0.5).abs() < 0.02);
    }

    #[test]
    fn histogram_bins() {
        assert_eq!(histogram(&[0.0, 0.25, 0.5, 1.0, 2.0], 0.0, 1.0, 4), vec![1, 1, 1, 1]);
        assert_eq!(histogram(&[0.3; 3], 0.3, 0.3, 2), vec![3, 0]);
    }
}
