use rand::seq::SliceRandom;
use rand::Rng;

use super::{AggregatedTrace, TraceError};
use crate::matrix::Matrix;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.5,
            val: 0.25,
            test: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub ratios: SplitRatios,
    pub seed: u64,
    pub noise_factor: f64,
    pub n_safe: usize,
    pub n_unsafe: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Matrix,
    pub train_noisy: Matrix,
    pub val: Matrix,
    pub test_safe: Matrix,
    pub test_unsafe: Matrix,
    pub meta: DatasetMeta,
}

/// Add `noise_factor * U[0,1)` to every entry. The input is left untouched.
pub fn inject_noise(m: &Matrix, noise_factor: f64, seed: u64) -> Result<Matrix, TraceError> {
    if !(noise_factor >= 0.0) {
        return Err(TraceError::InvalidArgument(format!(
            "noise factor must be non-negative, got {noise_factor}"
        )));
    }
    let mut out = m.clone();
    if noise_factor == 0.0 {
        return Ok(out);
    }
    let mut r = rng::chacha(rng::derive(seed, rng::tag("noise")));
    for x in out.as_mut_slice() {
        *x += noise_factor * r.gen::<f64>();
    }
    Ok(out)
}

/// Shuffle safe aggregates with `seed`, split them train/val/test, and put
/// every unsafe aggregate in the unsafe test set.
pub fn build_dataset(
    safe: &[AggregatedTrace],
    unsafe_: &[AggregatedTrace],
    ratios: SplitRatios,
    noise_factor: f64,
    seed: u64,
) -> Result<Dataset, TraceError> {
    if safe.is_empty() {
        return Err(TraceError::InvalidArgument("no safe traces supplied".into()));
    }
    if safe.len() < 8 {
        return Err(TraceError::InvalidArgument(format!(
            "need at least 8 safe traces, got {}",
            safe.len()
        )));
    }
    let parts = [ratios.train, ratios.val, ratios.test];
    if parts.iter().any(|r| !(*r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TraceError::InvalidArgument("split ratios must be non-negative and sum to 1".into()));
    }
    let l = safe[0].features.len();
    if safe.iter().chain(unsafe_).any(|t| t.features.len() != l) {
        return Err(TraceError::InvalidArgument("aggregates have inconsistent lengths".into()));
    }

    let n = safe.len();
    let n_train = (n as f64 * ratios.train).round() as usize;
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::chacha(rng::derive(seed, rng::tag("split"))));

    let rows = |idx: &[usize]| Matrix::from_rows(l, idx.iter().map(|&i| safe[i].features.as_slice()));
    let train = rows(&order[..n_train]);
    let val = rows(&order[n_train..n_train + n_val]);
    let test_safe = rows(&order[n_train + n_val..]);
    let test_unsafe = Matrix::from_rows(l, unsafe_.iter().map(|t| t.features.as_slice()));
    let train_noisy = inject_noise(&train, noise_factor, seed)?;

    Ok(Dataset {
        train,
        train_noisy,
        val,
        test_safe,
        test_unsafe,
        meta: DatasetMeta {
            ratios,
            seed,
            noise_factor,
            n_safe: n,
            n_unsafe: unsafe_.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::Label;

    fn agg(i: usize, label: Label) -> AggregatedTrace {
        AggregatedTrace {
            features: vec![i as f64 / 1000.0, 0.5],
            device_id: "d".into(),
            firmware_id: "f".into(),
            time_step: i as u64,
            label,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let m = Matrix::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(inject_noise(&m, 0.0, 1).unwrap(), m);
        assert!(inject_noise(&m, -0.1, 1).is_err());
    }

    #[test]
    fn uniform_noise_statistics() {
        let m = Matrix::from_vec(100, 100, vec![0.5; 10_000]);
        let out = inject_noise(&m, 0.1, 42).unwrap();
        let mut sum = 0.0;
        for (o, i) in out.as_slice().iter().zip(m.as_slice()) {
            let d = o - i;
            assert!((0.0..0.1).contains(&d));
            sum += d;
        }
        let mean = sum / 10_000.0;
        assert!((mean - 0.05).abs() <= 0.005, "mean {mean}");
        assert_eq!(out, inject_noise(&m, 0.1, 42).unwrap());
        assert_eq!(m.as_slice()[0], 0.5);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let safe: Vec<_> = (0..100).map(|i| agg(i, Label::Safe)).collect();
        let d = build_dataset(&safe, &[], SplitRatios::default(), 0.05, 3).unwrap();
        assert_eq!((d.train.rows(), d.val.rows(), d.test_safe.rows()), (50, 25, 25));
        assert!(d.test_unsafe.is_empty());
        let e = build_dataset(&safe, &[], SplitRatios::default(), 0.05, 3).unwrap();
        assert_eq!(d.train, e.train);
        assert_eq!(d.val, e.val);
        assert_eq!(d.train_noisy, e.train_noisy);

        // Splits are disjoint and cover all rows.
        let mut seen: Vec<f64> = d
            .train
            .iter_rows()
            .chain(d.val.iter_rows())
            .chain(d.test_safe.iter_rows())
            .map(|r| r[0])
            .collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 100);
    }

    #[test]
    fn unsafe_rows_go_to_test() {
        let safe: Vec<_> = (0..20).map(|i| agg(i, Label::Safe)).collect();
        let bad: Vec<_> = (0..7).map(|i| agg(i, Label::Unsafe)).collect();
        let d = build_dataset(&safe, &bad, SplitRatios::default(), 0.0, 1).unwrap();
        assert_eq!(d.test_unsafe.rows(), 7);
        assert_eq!(d.train, d.train_noisy);
    }

    #[test]
    fn rejects_empty_and_tiny_safe_sets() {
        assert!(build_dataset(&[], &[], SplitRatios::default(), 0.0, 1).is_err());
        let safe: Vec<_> = (0..5).map(|i| agg(i, Label::Safe)).collect();
        assert!(build_dataset(&safe, &[], SplitRatios::default(), 0.0, 1).is_err());
    }
}
