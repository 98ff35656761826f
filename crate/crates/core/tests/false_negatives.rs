//! Which tampered messages a partial copy of a layer can and cannot see.

mod common;

use proptest::prelude::*;

use sheath::attack::NoiseConfig;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noise_outside_compared_filters_is_never_flagged(
        p in 1usize..64, seed in any::<u64>(), np in 0.0f64..=1.0, sp in 0.0f64..8.0,
        polarity in any::<bool>(), image in 0u64..4,
    ) {
        let f = common::fn_fixture(p, image);
        let cfg = if polarity { NoiseConfig::polarity(np, seed) } else { NoiseConfig::gaussian(np, sp, seed) };
        prop_assert!(common::outside_case(&f, p, cfg).is_ok());
    }

    #[test]
    fn gaussian_noise_inside_compared_filters_is_always_flagged(
        p in 1usize..=64, seed in any::<u64>(), np in 0.001f64..=1.0, sp in 0.1f64..8.0, image in 0u64..4,
    ) {
        let f = common::fn_fixture(p, image);
        let r = common::inside_case(&f, p, NoiseConfig::gaussian(np, sp, seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

#[test]
fn clean_message_is_not_flagged_at_any_p() {
    for p in [1, 5, 32, 64] {
        let f = common::fn_fixture(p, 0);
        assert_eq!(f.detector.score(&f.message, &f.input), 0.0);
        assert!(!f.flagged(&f.message));
    }
}
