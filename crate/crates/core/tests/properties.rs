use proptest::prelude::*;

use liteatt::evalkit::{confusion, roc_auc, MetricsReport};
use liteatt::quantize::{dequantize_weights, quantize_weights};
use liteatt::secure_channel::{dec, enc, hmac, verify, Clock, NonceSource};
use liteatt::threshold::{binary_search_threshold, select_tnr_target};
use liteatt::trace::{aggregate_bytes, Label};

fn band(g: f64) -> f64 {
    if g >= 0.5 {
        0.95
    } else if g >= 0.2 {
        0.97
    } else {
        0.99
    }
}

fn labels_from(bits: &[bool]) -> Vec<Label> {
    bits.iter().map(|&b| if b { Label::Unsafe } else { Label::Safe }).collect()
}

/// Error sets with a controllable amount of ties.
fn error_set() -> impl Strategy<Value = Vec<f64>> {
    (1u32..=1000, 20usize..300).prop_flat_map(|(levels, n)| prop::collection::vec((0..levels).prop_map(move |v| v as f64 / levels as f64), n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn target_bands_piecewise(g in prop_oneof![0.0..1.0f64, 0.19..0.21f64, 0.49..0.51f64, 0.0..1e6f64]) {
        let t = select_tnr_target(g);
        prop_assert_eq!(t, band(g));
    }

    #[test]
    fn search_matches_brute_force_scan(errors in error_set(), target in prop_oneof![Just(0.95), Just(0.97), Just(0.99), 0.5..0.999f64]) {
        let s = binary_search_threshold(&errors, target).unwrap();
        let n = errors.len() as f64;
        // Every distinct TNR the data can produce, with a threshold producing it.
        let mut values = errors.clone();
        values.sort_by(f64::total_cmp);
        values.dedup();
        let scan: Vec<f64> = values.iter().map(|v| errors.iter().filter(|e| *e <= v).count() as f64 / n).collect();
        let below = errors.iter().filter(|&&e| e < s.t_opt).count() as f64 / n;
        prop_assert_eq!(below, s.achieved_tnr);
        let near: Vec<f64> = scan.iter().copied().filter(|f| (f - target).abs() < 0.005).collect();
        if near.is_empty() {
            let want = scan.iter().copied().filter(|&f| f <= target).fold(None, |m: Option<f64>, f| Some(m.map_or(f, |m| m.max(f))))
                .or_else(|| scan.iter().copied().filter(|&f| f > target).reduce(f64::min));
            prop_assert!(!s.exact);
            prop_assert_eq!(Some(s.achieved_tnr), want);
        } else {
            prop_assert!(s.exact);
            prop_assert!(near.contains(&s.achieved_tnr));
        }
    }

    #[test]
    fn auc_equals_pair_counting(errors in prop::collection::vec(0u8..20, 2..200), bits in prop::collection::vec(any::<bool>(), 200)) {
        let e: Vec<f64> = errors.iter().map(|&v| v as f64).collect();
        let labels = labels_from(&bits[..e.len()]);
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if li.is_unsafe() && !lj.is_unsafe() {
                    pairs += 1.0;
                    wins += if e[i] > e[j] { 1.0 } else if e[i] == e[j] { 0.5 } else { 0.0 };
                }
            }
        }
        match roc_auc(&e, &labels) {
            Ok(a) => prop_assert!((a - wins / pairs).abs() < 1e-12),
            Err(_) => prop_assert_eq!(pairs, 0.0),
        }
    }

    #[test]
    fn metric_identities(errors in prop::collection::vec(0.0..1.0f64, 1..300), bits in prop::collection::vec(any::<bool>(), 300), t in 0.0..1.0f64) {
        let labels = labels_from(&bits[..errors.len()]);
        let c = confusion(&errors, &labels, t).unwrap();
        prop_assert_eq!(c.total(), errors.len());
        prop_assert_eq!(c.positives(), labels.iter().filter(|l| l.is_unsafe()).count());
        let m = MetricsReport::from_counts(c, None);
        if c.positives() > 0 {
            prop_assert!((m.tpr + m.fnr - 1.0).abs() < 1e-12);
        }
        if c.negatives() > 0 {
            prop_assert!((m.tnr + m.fpr - 1.0).abs() < 1e-12);
        }
        let n = c.total() as f64;
        let weighted = m.tpr * c.positives() as f64 / n + m.tnr * c.negatives() as f64 / n;
        prop_assert!((m.accuracy - weighted).abs() < 1e-12);
        for v in [m.accuracy, m.precision, m.f1, m.f1_safe] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn aggregation_bounds(bytes in prop::collection::vec(any::<u8>(), 1..512), block in 1usize..9) {
        let used = bytes.len() / block * block;
        prop_assume!(used > 0);
        let s = aggregate_bytes(&bytes, block, used).unwrap();
        prop_assert_eq!(s.len(), used / block);
        for (i, v) in s.iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(v));
            let chunk = &bytes[i * block..(i + 1) * block];
            let lo = *chunk.iter().min().unwrap() as f64 / 255.0;
            let hi = *chunk.iter().max().unwrap() as f64 / 255.0;
            prop_assert!(*v >= lo - 1e-12 && *v <= hi + 1e-12);
        }
    }

    #[test]
    fn weight_quantization_error_bounded(w in prop::collection::vec(-4.0..4.0f64, 1..200)) {
        let (q, scale) = quantize_weights(&w);
        prop_assert!(q.iter().all(|&v| v >= -127));
        let back = dequantize_weights(&q, scale);
        for (a, b) in w.iter().zip(&back) {
            prop_assert!((a - b).abs() <= scale as f64 / 2.0 + 1e-6);
        }
    }

    #[test]
    fn tag_rejects_any_single_bit_flip(m in prop::collection::vec(any::<u8>(), 1..128), bit in any::<prop::sample::Index>(), key in any::<[u8; 16]>()) {
        let tag = hmac(&m, &key);
        prop_assert!(verify(&m, &tag, &key));
        let mut flipped = m.clone();
        let i = bit.index(m.len() * 8);
        flipped[i / 8] ^= 1 << (i % 8);
        prop_assert!(!verify(&flipped, &tag, &key));
    }

    #[test]
    fn clock_is_monotone(steps in prop::collection::vec(0u64..10_000, 1..50)) {
        let c = Clock::simulated(0);
        let mut last = c.now();
        for s in steps {
            c.advance(s);
            let now = c.now();
            prop_assert_eq!(now, last + s);
            last = now;
        }
    }
}

#[test]
fn cipher_round_trip_all_lengths() {
    let mut rng = NonceSource::seeded(42);
    let key = rng.key();
    for len in 0..=256usize {
        let plain: Vec<u8> = (0..len).map(|i| (i * 31 + len) as u8).collect();
        let c = enc(&plain, &key, &mut rng);
        assert_eq!(c.len(), 16 + (len / 16 + 1) * 16);
        assert_eq!(dec(&c, &key).unwrap(), plain);
    }
}
