//! Adaptive threshold calibration over validation reconstruction errors.
//!
//! A sample is classified safe iff its error is strictly below the threshold.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Minimum number of validation errors accepted by [`gap_ratio`].
pub const MIN_ERRORS: usize = 20;
/// Acceptable gap between achieved and target TNR.
pub const TOLERANCE: f64 = 0.005;
pub const MAX_ITERATIONS: usize = 64;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ThresholdError {
    #[error("need at least {need} validation errors, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("validation errors must be finite and non-negative (index {0})")]
    InvalidError(usize),
    #[error("95th percentile is zero; the error distribution is degenerate, widen the validation data")]
    Degenerate,
    #[error("TNR target {0} outside (0, 1)")]
    BadTarget(f64),
    #[error("malformed calibration record: {0}")]
    Record(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapRatio {
    pub gamma: f64,
    pub p95: f64,
    pub p99: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchResult {
    pub t_opt: f64,
    pub achieved_tnr: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub gamma: f64,
    pub p95: f64,
    pub p99: f64,
    pub tnr_target: f64,
    pub t_opt: f64,
    pub achieved_tnr_val: f64,
    pub exact: bool,
}

fn check(errors: &[f64]) -> Result<Vec<f64>, ThresholdError> {
    if let Some(i) = errors.iter().position(|e| !e.is_finite() || *e < 0.0) {
        return Err(ThresholdError::InvalidError(i));
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Linear-interpolated percentile of an ascending slice (`p` in [0, 100]).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Relative spread of the tail: (P99 - P95) / P95.
pub fn gap_ratio(errors: &[f64]) -> Result<GapRatio, ThresholdError> {
    if errors.len() < MIN_ERRORS {
        return Err(ThresholdError::TooFew {
            need: MIN_ERRORS,
            got: errors.len(),
        });
    }
    let sorted = check(errors)?;
    let p95 = percentile(&sorted, 95.0);
    let p99 = percentile(&sorted, 99.0);
    if p95 <= 0.0 {
        return Err(ThresholdError::Degenerate);
    }
    Ok(GapRatio {
        gamma: (p99 - p95) / p95,
        p95,
        p99,
    })
}

pub fn select_tnr_target(gamma: f64) -> f64 {
    if gamma < 0.2 {
        0.99
    } else if gamma < 0.5 {
        0.97
    } else {
        0.95
    }
}

/// Fraction of `sorted` strictly below `t`.
pub fn tnr_at(sorted: &[f64], t: f64) -> f64 {
    sorted.partition_point(|e| *e < t) as f64 / sorted.len() as f64
}

/// Smallest threshold with exactly `k` of `sorted` strictly below it.
/// `k` must be an achievable count (0, n, or a position where the order
/// statistics change value).
fn threshold_for_count(sorted: &[f64], k: usize) -> f64 {
    if k == 0 {
        0.0
    } else {
        sorted[k - 1].next_up()
    }
}

/// Bisect `[0, 2 max]` for the smallest threshold reaching `target` and
/// accept it (or the step just below) if within [`TOLERANCE`]. When the
/// discrete set of achievable TNRs has no such value, fall back to the
/// largest achievable TNR not above `target` (excluding zero), else the
/// smallest above it.
pub fn binary_search_threshold(errors: &[f64], target: f64) -> Result<SearchResult, ThresholdError> {
    if errors.is_empty() {
        return Err(ThresholdError::TooFew { need: 1, got: 0 });
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(ThresholdError::BadTarget(target));
    }
    let sorted = check(errors)?;
    let n = sorted.len();
    let max = sorted[n - 1];

    // Invariant: TNR(lo) < target <= TNR(hi).
    let mut lo = 0.0;
    let mut hi = if max > 0.0 { 2.0 * max } else { f64::MIN_POSITIVE };
    for _ in 0..MAX_ITERATIONS {
        let mid = lo + (hi - lo) / 2.0;
        if mid <= lo || mid >= hi {
            break;
        }
        if tnr_at(&sorted, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    for t in [hi, lo] {
        let tnr = tnr_at(&sorted, t);
        if t > 0.0 && (tnr - target).abs() < TOLERANCE {
            return Ok(SearchResult {
                t_opt: t,
                achieved_tnr: tnr,
                exact: true,
            });
        }
    }

    let achievable: Vec<usize> = (1..=n).filter(|&k| k == n || sorted[k - 1] < sorted[k]).collect();
    let frac = |k: usize| k as f64 / n as f64;
    if let Some(&k) = achievable.iter().find(|&&k| (frac(k) - target).abs() < TOLERANCE) {
        return Ok(SearchResult {
            t_opt: threshold_for_count(&sorted, k),
            achieved_tnr: frac(k),
            exact: true,
        });
    }
    let k = achievable
        .iter()
        .rev()
        .find(|&&k| frac(k) <= target)
        .or_else(|| achievable.iter().find(|&&k| frac(k) > target))
        .copied()
        .unwrap_or(n);
    Ok(SearchResult {
        t_opt: threshold_for_count(&sorted, k),
        achieved_tnr: frac(k),
        exact: false,
    })
}

/// Gap ratio, adaptive TNR target and threshold search in one step.
pub fn calibrate(val_errors: &[f64]) -> Result<CalibrationResult, ThresholdError> {
    let g = gap_ratio(val_errors)?;
    let tnr_target = select_tnr_target(g.gamma);
    let s = binary_search_threshold(val_errors, tnr_target)?;
    Ok(CalibrationResult {
        gamma: g.gamma,
        p95: g.p95,
        p99: g.p99,
        tnr_target,
        t_opt: s.t_opt,
        achieved_tnr_val: s.achieved_tnr,
        exact: s.exact,
    })
}

impl CalibrationResult {
    /// `key=value` lines; floats are written with round-trip precision.
    pub fn to_record(&self) -> String {
        format!(
            "gamma={:?}\np95={:?}\np99={:?}\ntnr_target={:?}\nt_opt={:?}\nachieved_tnr_val={:?}\nexact={}\n",
            self.gamma, self.p95, self.p99, self.tnr_target, self.t_opt, self.achieved_tnr_val, self.exact
        )
    }

    pub fn from_record(text: &str) -> Result<Self, ThresholdError> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ThresholdError::Record(format!("no '=' in {line:?}")))?;
            fields.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| ThresholdError::Record(format!("missing {k}")))
        };
        let num = |k: &str| -> Result<f64, ThresholdError> {
            get(k)?.parse().map_err(|_| ThresholdError::Record(format!("bad number for {k}")))
        };
        Ok(CalibrationResult {
            gamma: num("gamma")?,
            p95: num("p95")?,
            p99: num("p99")?,
            tnr_target: num("tnr_target")?,
            t_opt: num("t_opt")?,
            achieved_tnr_val: num("achieved_tnr_val")?,
            exact: get("exact")?
                .parse()
                .map_err(|_| ThresholdError::Record("bad flag for exact".into()))?,
        })
    }
}

impl fmt::Display for CalibrationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gamma={:.4} p95={:.6e} p99={:.6e} tnr_target={:.2} t_opt={:.6e} achieved_tnr={:.4} exact={}",
            self.gamma, self.p95, self.p99, self.tnr_target, self.t_opt, self.achieved_tnr_val, self.exact
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn percentile_linear_interpolation() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 95.0) - 95.05).abs() < 1e-12);
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 100.0), 100.0);
    }

    #[test]
    fn gap_ratio_examples() {
        assert_eq!(gap_ratio(&[0.3; 50]).unwrap().gamma, 0.0);
        // 101 points: P95 and P99 land exactly on order statistics 95 and 99.
        let mut v = vec![0.001; 101];
        v[95] = 0.010;
        v[96..99].iter_mut().for_each(|x| *x = 0.0105);
        v[99] = 0.011;
        v[100] = 0.02;
        let g = gap_ratio(&v).unwrap();
        assert!((g.p95 - 0.010).abs() < 1e-15 && (g.p99 - 0.011).abs() < 1e-15);
        assert!((g.gamma - 0.1).abs() < 1e-9);
    }

    #[test]
    fn gap_ratio_uniform_sample() {
        let mut r = crate::rng::chacha(4);
        let v: Vec<f64> = (0..10_000).map(|_| r.gen::<f64>()).collect();
        let g = gap_ratio(&v).unwrap();
        assert!((g.gamma - 0.04 / 0.95).abs() < 0.01, "{}", g.gamma);
    }

    #[test]
    fn gap_ratio_errors() {
        assert_eq!(gap_ratio(&[1.0; 19]), Err(ThresholdError::TooFew { need: 20, got: 19 }));
        assert_eq!(gap_ratio(&[0.0; 40]), Err(ThresholdError::Degenerate));
        let mut v = vec![1.0; 30];
        v[3] = f64::NAN;
        assert_eq!(gap_ratio(&v), Err(ThresholdError::InvalidError(3)));
    }

    #[test]
    fn target_bands() {
        assert_eq!(select_tnr_target(0.1), 0.99);
        assert_eq!(select_tnr_target(0.2), 0.97);
        assert_eq!(select_tnr_target(0.4999), 0.97);
        assert_eq!(select_tnr_target(0.5), 0.95);
        assert_eq!(select_tnr_target(0.0), 0.99);
    }

    #[test]
    fn search_thousand_grid() {
        let v: Vec<f64> = (1..=1000).map(|k| 0.001 * k as f64).collect();
        let s = binary_search_threshold(&v, 0.97).unwrap();
        assert!(s.exact);
        assert_eq!(v.iter().filter(|e| **e < s.t_opt).count(), 970);
        assert_eq!(s.achieved_tnr, 0.97);
    }

    #[test]
    fn search_small_set_falls_back_below() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = binary_search_threshold(&v, 0.97).unwrap();
        assert!(!s.exact);
        assert_eq!(s.achieved_tnr, 0.9);
        assert_eq!(v.iter().filter(|e| **e < s.t_opt).count(), 9);
    }

    #[test]
    fn search_constant_set_falls_back_above() {
        let v = vec![0.25; 30];
        let s = binary_search_threshold(&v, 0.99).unwrap();
        assert!(!s.exact);
        assert_eq!(s.achieved_tnr, 1.0);
        assert!(s.t_opt > 0.25);
    }

    #[test]
    fn search_all_zero_errors() {
        let s = binary_search_threshold(&[0.0; 10], 0.95).unwrap();
        assert_eq!(s.achieved_tnr, 1.0);
        assert!(s.t_opt > 0.0);
    }

    #[test]
    fn calibrate_clustered_and_dispersed() {
        let clustered: Vec<f64> = (0..500).map(|i| 1.0 + 0.0001 * i as f64).collect();
        assert_eq!(calibrate(&clustered).unwrap().tnr_target, 0.99);
        let mut dispersed: Vec<f64> = (0..500).map(|i| 1.0 + 0.0001 * i as f64).collect();
        dispersed[480..].iter_mut().enumerate().for_each(|(i, e)| *e = 2.0 + i as f64);
        let c = calibrate(&dispersed).unwrap();
        assert!(c.gamma >= 0.5);
        assert_eq!(c.tnr_target, 0.95);
        assert!(c.exact);
    }

    #[test]
    fn record_round_trip() {
        let v: Vec<f64> = (0..400).map(|i| ((i * 37) % 400) as f64 * 1e-4 + 1e-3).collect();
        let c = calibrate(&v).unwrap();
        assert_eq!(CalibrationResult::from_record(&c.to_record()).unwrap(), c);
        assert!(CalibrationResult::from_record("gamma=1").is_err());
    }
}
