use proptest::prelude::*;
use spikecp::conformal::{cm_pool, p_value, pm_pool, predictive_set, stopping_index};

proptest! {
    #[test]
    fn p_value_lies_on_the_rank_grid(
        cal in prop::collection::vec(-5.0f64..5.0, 1..60),
        test in -5.0f64..5.0,
    ) {
        let n = cal.len() as f64;
        let p = p_value(test, &cal).unwrap();
        let k = p * (n + 1.0);
        prop_assert!((k - k.round()).abs() < 1e-9);
        prop_assert!(k.round() >= 1.0 && k.round() <= n + 1.0);
    }

    #[test]
    fn larger_alpha_never_grows_the_set(
        p in prop::collection::vec(0.0f64..=1.0, 1..10),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let wide = predictive_set(&p, lo);
        let narrow = predictive_set(&p, hi);
        prop_assert!(narrow.iter().all(|c| wide.contains(c)));
    }

    #[test]
    fn power_merge_dominates_max(
        p in prop::collection::vec(1e-6f64..=1.0, 1..8),
        r in prop::sample::select(vec![0.5, 1.0, 2.0, 10.0, 45.0, 200.0]),
    ) {
        let hi = p.iter().copied().fold(0.0, f64::max);
        prop_assert!(pm_pool(&p, r).unwrap() >= hi);
        prop_assert_eq!(pm_pool(&p, f64::INFINITY).unwrap(), hi);
        let lo = p.iter().copied().fold(1.0, f64::min);
        prop_assert_eq!(pm_pool(&p, f64::NEG_INFINITY).unwrap(), (p.len() as f64 * lo).min(1.0));
    }

    #[test]
    fn arithmetic_confidence_merge_is_the_member_mean(
        members in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 1..7),
    ) {
        let pooled = cm_pool(&members, 1.0);
        for c in 0..3 {
            let mean = members.iter().map(|m| m[c]).sum::<f64>() / members.len() as f64;
            prop_assert!((pooled[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn stopping_is_the_first_small_set(sizes in prop::collection::vec(0usize..6, 1..6), th in 0usize..6) {
        let i = stopping_index(&sizes, th);
        prop_assert!(i < sizes.len());
        prop_assert!(sizes[..i].iter().all(|&s| s > th));
        prop_assert!(sizes[i] <= th || i == sizes.len() - 1);
    }
}
