mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use specmon::baselines::enumerate_prior;
use specmon::env_sim::{presets, sample_environment, BandVector, EnvSpec};
use specmon::metrics::{iou_block, iou_cumulative, iou_diff_block, iou_instant, IouCounts};

fn mask_vector(row: &[bool]) -> BandVector {
    BandVector::Binary(row.iter().map(|&v| u8::from(v)).collect())
}

fn grid(bits: u64, t: usize, n: usize) -> Vec<Vec<bool>> {
    (0..t).map(|s| (0..n).map(|b| bits >> (s * n + b) & 1 == 1).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn simulator_invariants_hold(spec_seed in any::<u64>(), seed in any::<u64>()) {
        let spec = common::random_spec(&mut ChaCha8Rng::seed_from_u64(spec_seed));
        prop_assert!(spec.validate().is_empty(), "{:?}", spec.validate());
        let v = common::simulator_violations(&spec, seed, 60);
        prop_assert!(v.is_empty(), "{:?}", v);
    }

    #[test]
    fn spec_files_round_trip(spec_seed in any::<u64>()) {
        let spec = common::random_spec(&mut ChaCha8Rng::seed_from_u64(spec_seed));
        prop_assert_eq!(EnvSpec::parse(&spec.to_file_string()).unwrap(), spec);
    }

    #[test]
    fn observations_agree_with_truth(seed in any::<u64>(), t in 0usize..200, band in 0usize..20) {
        let spec = presets::spec_b2();
        let mut env = sample_environment(&spec, seed).unwrap();
        let truth = env.labels_at(t)[band];
        prop_assert_eq!(env.observe(t, band).unwrap().detection, u8::from(truth > 0));
    }

    #[test]
    fn metrics_match_set_oracle(pred_bits in any::<u64>(), truth_bits in any::<u64>(), n in 1usize..=3) {
        let (t_len, bands) = (6, 8);
        let p = grid(pred_bits, t_len, bands);
        let y = grid(truth_bits, t_len, bands);
        let window: Vec<(BandVector, BandVector)> =
            p.iter().zip(&y).map(|(a, b)| (mask_vector(a), mask_vector(b))).collect();
        for t in 0..t_len {
            let want = common::oracle_iou(&p[t..=t], &y[t..=t]);
            prop_assert_eq!(iou_instant(&window[t].0, &window[t].1).unwrap(), want);
        }
        prop_assert_eq!(iou_cumulative(&window).unwrap(), common::oracle_iou(&p, &y));
        prop_assert_eq!(iou_block(&window, n).unwrap(), common::oracle_iou(&p[t_len - n..], &y[t_len - n..]));
        for t in n..t_len {
            let want = common::oracle_iou(&p[t - n..=t], &y[t - n..=t])
                - common::oracle_iou(&p[t + 1 - n..=t], &y[t + 1 - n..=t]);
            prop_assert!((iou_diff_block(&window, t, n).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_is_bounded_and_symmetric(a in prop::collection::vec(any::<bool>(), 12), b in prop::collection::vec(any::<bool>(), 12)) {
        let ab = IouCounts::from_masks(&a, &b).unwrap().score();
        let ba = IouCounts::from_masks(&b, &a).unwrap().score();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn elimination_never_loses_the_true_tuple(seed in 0u64..100_000, expert in any::<bool>(), prior_ix in 0usize..4) {
        let prior = [presets::spec_a(), presets::spec_b1(), presets::spec_c1(), presets::spec_c2()][prior_ix].clone();
        let tuples = enumerate_prior(&prior, 1_000_000).unwrap();
        let out = common::soundness_run(&prior, &tuples, seed, 80, expert, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(!out.lost_true_tuple);
        prop_assert!(!out.mispredicted);
    }
}
