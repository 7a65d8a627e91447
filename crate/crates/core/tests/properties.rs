//! Structural properties of the alignment, metric, and loss components:
//! randomized invariants that need no training.

#[path = "support/mod.rs"]
mod support;

use mvid_core::synthgen::stream_rng;
use proptest::prelude::*;
use support::checks;

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn sinkhorn_output_is_doubly_stochastic(
        d in 2usize..=12,
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 910);
        let (dev, nonneg) = checks::sinkhorn_case(d, &mut rng);
        prop_assert!(dev < 1e-6, "deviation {} at d={}", dev, d);
        prop_assert!(nonneg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 500, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn binarize_matches_exhaustive_search(
        d in 2usize..=6,
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 911);
        let (margin, valid) = checks::binarize_case(d, &mut rng);
        prop_assert!(valid, "binarize did not return a permutation");
        prop_assert!(margin >= -1e-12, "binarize sum {} below optimum", margin);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn mcc_is_one_under_signed_scaled_permutation(
        d in 2usize..=8,
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 912);
        let err = checks::mcc_case(d, 200, &mut rng);
        prop_assert!(err <= 1e-9, "mcc off by {}", err);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]
    #[test]
    fn r2_is_one_under_invertible_linear_maps(
        d in 2usize..=6,
        n in 50usize..150,
        seed in any::<u64>(),
    ) {
        let mut rng = stream_rng(seed, 913);
        let err = checks::r2_case(d, n, &mut rng);
        prop_assert!(err <= 1e-6, "r2 off by {}", err);
    }
}

/// With a fixed random representation, the contrastive objective grows
/// like the log of the negative count; the remainder stabilizes as the
/// negatives multiply.
#[test]
fn contrastive_gap_stabilizes_in_the_negative_count() {
    let (gaps, d1, d2) = checks::contrastive_gap_differences();
    println!("gaps {:?} successive differences {:.4} {:.4}", gaps, d1, d2);
    assert!(d2 < d1, "differences must shrink: {} vs {}", d2, d1);
    assert!(d2 < 0.05, "final difference {} too large", d2);
}

/// The permutation phase alone, driven only by the merge loss, must find
/// a planted channel shuffle between two fully overlapping views.
#[test]
fn planted_permutation_recovered_by_merge_descent() {
    for &(d, seed) in &[(3usize, 5u64), (5, 6), (8, 7)] {
        let recovered_at = checks::planted_recovery(d, seed, 500);
        println!("d={} planted shuffle recovered at step {:?}", d, recovered_at);
        assert!(
            recovered_at.is_some(),
            "d={} seed={}: shuffle not recovered in 500 steps",
            d,
            seed
        );
    }
}
