mod common;

use prema_core::tinynn::{softmax, Mlp, Scaler};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn softmax_sums_to_one_and_ignores_shift(v in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences(seed in any::<u64>()) {
        let (model, batch, loss) = common::random_problem(seed);
        let check = common::gradient_check(&model, &batch, loss, common::FD_STEP);
        prop_assert!(check.worst <= 1e-4 && check.checked == check.total, "{check:?}");
    }

    #[test]
    fn joint_feature_scaling_leaves_outputs(seed in any::<u64>(), factor in 0.01f64..100.0, j in 0usize..2) {
        let (mut model, batch, _) = common::random_problem(seed);
        prop_assume!(j < model.input_dim());
        model.input_scaler = (0..model.input_dim()).map(|i| Scaler { mean: 0.1 * i as f64, std: 1.5 }).collect();
        let mut scaled = model.clone();
        scaled.input_scaler[j].mean *= factor;
        scaled.input_scaler[j].std *= factor;
        for ex in &batch {
            let mut x = ex.x.clone();
            x[j] *= factor;
            let a = model.infer(&ex.x).unwrap();
            let b = scaled.infer(&x).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{u} vs {v}");
            }
        }
    }

    #[test]
    fn save_restore_is_identity(seed in any::<u64>()) {
        let (mut model, _, _) = common::random_problem(seed);
        model.quantize_to_f32();
        model.input_scaler = (0..model.input_dim()).map(|i| Scaler { mean: i as f64 * 0.3, std: 2.0 + i as f64 }).collect();
        let bytes = model.to_bytes();
        let back = Mlp::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn any_flipped_byte_is_rejected(seed in any::<u64>(), pos in any::<prop::sample::Index>(), bit in 0u8..8) {
        let (mut model, _, _) = common::random_problem(seed);
        model.quantize_to_f32();
        let mut bytes = model.to_bytes();
        let i = pos.index(bytes.len());
        bytes[i] ^= 1 << bit;
        prop_assert!(Mlp::from_bytes(&bytes).is_err());
    }
}

#[test]
fn gradient_check_covers_every_parameter() {
    let (mut checked, mut total) = (0, 0);
    for seed in 0..500 {
        let (model, batch, loss) = common::random_problem(seed);
        let g = common::gradient_check(&model, &batch, loss, common::FD_STEP);
        assert!(g.worst <= 1e-4, "seed {seed}: {g:?}");
        checked += g.checked;
        total += g.total;
    }
    assert_eq!(checked, total);
}
