mod common;

use co4::complexity::{closed_form_report, measure, MacQuery};
use co4::modulation::{cooperate, transfer};
use co4::{Arch, Co4BlockConfig, InputSpec, Model, ModulationKind, Tensor};
use common::*;
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = ModulationKind> {
    prop::sample::select(ModulationKind::ALL.to_vec())
}

fn matrix(max_rows: usize, max_cols: usize, scale: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-scale..scale, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_are_distributions(x in matrix(6, 9, 50.0)) {
        let s = x.softmax_rows();
        for i in 0..s.rows() {
            let row = s.row(i);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_standardises_rows(x in matrix(5, 12, 10.0)) {
        prop_assume!(x.cols() >= 2);
        let c = x.cols();
        let y = x.layer_norm(&Tensor::full(&[c], 1.0), &Tensor::zeros(&[c]), 0.0).unwrap();
        for i in 0..x.rows() {
            let src = x.row(i);
            let spread = src.iter().cloned().fold(f64::MIN, f64::max) - src.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn cooperation_is_bounded(r in -1e3f64..1e3, c in -1e3f64..1e3) {
        let y = ModulationKind::Cooperation.eval(r, c);
        prop_assert!((0.0..=6.0).contains(&y));
    }

    #[test]
    fn cooperation_is_monotone_in_context(r in -10f64..10.0, c in -10f64..10.0, dc in 0f64..5.0) {
        let k = ModulationKind::Cooperation;
        prop_assert!(k.eval(r, c + dc) >= k.eval(r, c));
    }

    #[test]
    fn zero_drive_contrast(c in -20f64..20.0, kind in kind()) {
        let y = kind.eval(0.0, c);
        if kind == ModulationKind::Cooperation {
            prop_assert_eq!(y, c.clamp(0.0, 6.0));
        } else {
            prop_assert_eq!(y, 0.0);
        }
    }

    #[test]
    fn context_overrides_negative_drive(c in -10f64..10.0) {
        prop_assume!((c - 0.5).abs() > 1e-12);
        prop_assert_eq!(ModulationKind::Cooperation.eval(-1.0, c) > 0.0, c > 0.5);
    }

    #[test]
    fn tensor_transfer_matches_scalar(r in matrix(3, 4, 3.0), kind in kind()) {
        let c = r.map(|v| 0.7 - v).unwrap();
        let y = transfer(kind, &r, &c).unwrap();
        for ((&a, &b), &out) in r.data().iter().zip(c.data()).zip(y.data()) {
            prop_assert_eq!(out, kind.eval(a, b));
        }
        if kind == ModulationKind::Cooperation {
            prop_assert_eq!(cooperate(&r, &c).unwrap(), y);
        }
    }

    #[test]
    fn triadic_cooperation_is_bounded(seed in any::<u64>()) {
        let (q, k, v, w) = triadic_case(seed, ModulationKind::Cooperation);
        for t in [&q, &k, &v] {
            prop_assert!(t.data().iter().all(|x| (0.0..=6.0).contains(x)));
        }
        prop_assert_eq!(w.rows(), q.rows());
        prop_assert_eq!(w.cols(), k.rows());
    }

    #[test]
    fn mac_terms_match_measurement(
        n in 1u64..24, e_h in 1u64..5, heads in 1u64..3, lq in 1u64..6, layers in 1u64..3, co4 in any::<bool>()
    ) {
        let e = e_h * heads;
        prop_assume!(e >= 2);
        let q = if co4 { MacQuery::co4(n, e, layers, lq) } else { MacQuery::standard(n, e, layers) };
        let q = MacQuery { heads, ..q };
        let closed = closed_form_report(q).unwrap();
        let measured = measure(q, 7).unwrap();
        let expected: u64 = closed.breakdown.values().map(|t| t.expected).sum();
        prop_assert_eq!(measured.measured, Some(expected));
        for (name, t) in &measured.breakdown {
            prop_assert_eq!(Some(t.expected), t.measured, "{}", name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn co4_ignores_token_order(seed in any::<u64>()) {
        prop_assert!(co4_permutation_diff(seed) <= 1e-9);
    }

    #[test]
    fn sensory_layer_ignores_sensor_order(seed in any::<u64>()) {
        prop_assert!(pi_permutation_diff(seed) <= 1e-9);
    }

    #[test]
    fn block_variants_have_equal_parameters(
        e_h in 1usize..9, heads in 1usize..4, lq in 1usize..9, layers in 1usize..4, n in 1usize..20, positional in any::<bool>()
    ) {
        prop_assume!(e_h * heads >= 2);
        let cfg = Co4BlockConfig {
            embed_dim: e_h * heads,
            latents: lq,
            heads,
            layers,
            modulation: ModulationKind::Cooperation,
            dropout_p: 0.0,
            use_positional: positional,
            num_classes: 4,
        };
        let input = InputSpec::Patches { patch_dim: 3, num_patches: n };
        let co4 = Model::<f64>::new(cfg.clone(), Arch::Co4, input, 0).unwrap();
        let std = Model::<f64>::new(cfg, Arch::Standard, input, 0).unwrap();
        prop_assert_eq!(co4.layer_parameters(), std.layer_parameters());
    }
}
