//! Property tests over randomized inputs.

use proptest::prelude::*;

use earlycrop_core::criteria::{build_mask, pruned_count_for, Criterion, ScoreVector};
use earlycrop_core::data::parse_idx;
use earlycrop_core::lifecycle::DetectorNorm;
use earlycrop_core::lifecycle::DetectorState;
use earlycrop_core::model::{Activation, Head, Model};
use earlycrop_core::rng::Rng;
use earlycrop_core::tensor::Tensor;

fn model_with_weight_counts(hidden: usize) -> Model {
    let mut rng = Rng::seed_from_u64(0);
    Model::mlp(3, &[hidden], 2, Activation::Relu, Head::Classification, &mut rng).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_count_exact_and_layers_protected(
        hidden in 2usize..12,
        rho in 0.0f64..0.99,
        seed in any::<u64>(),
    ) {
        let model = model_with_weight_counts(hidden);
        let map = model.param_index_map(false);
        let mut rng = Rng::seed_from_u64(seed);
        let scores = ScoreVector {
            values: (0..map.rankable_len()).map(|_| rng.uniform()).collect(),
            criterion: Criterion::Random,
            batch_id: String::new(),
            degenerate: false,
        };
        let mask = build_mask(&scores, rho, &map, 0).unwrap();
        if !mask.capped {
            prop_assert_eq!(mask.pruned_count(), pruned_count_for(rho, map.rankable_len()));
        }
        for li in 0..model.layers.len() {
            let kept = (0..map.rankable_len())
                .filter(|&r| map.rankable_layer(r) == li && mask.keep[r] == 1)
                .count();
            prop_assert!(kept >= 1, "layer {} fully pruned", li);
        }
    }

    #[test]
    fn mask_kept_sets_nest(
        rho_lo in 0.0f64..0.5,
        gap in 0.01f64..0.49,
        seed in any::<u64>(),
    ) {
        let model = model_with_weight_counts(7);
        let map = model.param_index_map(false);
        let mut rng = Rng::seed_from_u64(seed);
        let scores = ScoreVector {
            values: (0..map.rankable_len()).map(|_| rng.uniform()).collect(),
            criterion: Criterion::Random,
            batch_id: String::new(),
            degenerate: false,
        };
        let rho_hi = rho_lo + gap;
        let lo = build_mask(&scores, rho_lo, &map, 0).unwrap();
        let hi = build_mask(&scores, rho_hi, &map, 0).unwrap();
        for i in 0..map.rankable_len() {
            if hi.keep[i] == 1 {
                prop_assert_eq!(lo.keep[i], 1);
            }
        }
    }

    #[test]
    fn detector_score_respects_triangle_bound(
        steps in prop::collection::vec(-0.5f64..0.5, 8..40),
        th in 0.0f64..0.2,
    ) {
        // 1-D trajectory from accumulated steps.
        let mut d = DetectorState::new(vec![0.0], -1.0, DetectorNorm::Delta1);
        let mut pos = 0.0;
        for (t, s) in steps.iter().enumerate() {
            pos += s;
            let dec = d.update(&[pos], t + 1).unwrap();
            prop_assert!(dec.score <= dec.bound + 1e-9 * (1.0 + dec.score.abs()));
        }
        let _ = th;
    }

    #[test]
    fn parameter_flatten_scatter_roundtrip(seed in any::<u64>()) {
        let mut rng = Rng::seed_from_u64(seed);
        let mut model =
            Model::mlp(2, &[5, 4], 3, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        let flat = model.flatten_params();
        model.set_params(&flat).unwrap();
        let again = model.flatten_params();
        prop_assert_eq!(flat, again);
    }

    #[test]
    fn idx_roundtrip_u8(values in prop::collection::vec(any::<u8>(), 1..200)) {
        let mut bytes = vec![0, 0, 0x08, 1];
        bytes.extend_from_slice(&(values.len() as u32).to_be_bytes());
        bytes.extend_from_slice(&values);
        let t = parse_idx(&bytes).unwrap();
        prop_assert_eq!(t.shape, vec![values.len()]);
        for (a, b) in t.values.iter().zip(values.iter()) {
            prop_assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn forward_deterministic_bitwise(seed in any::<u64>(), n in 1usize..6) {
        let mut rng = Rng::seed_from_u64(seed);
        let model =
            Model::mlp(3, &[4], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        let inputs = Tensor::from_fn(&[n, 3], |i| ((i as f64) * 0.37).sin());
        let a = model.forward(&inputs).unwrap();
        let b = model.forward(&inputs).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
