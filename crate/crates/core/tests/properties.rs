mod common;

use proptest::prelude::*;

use common::{directional_error, ulp_distance, Quadratic};
use qzo_core::models::{make_synthetic, build_model, ModelSpec, QuantSettings, QuantizerKind, Split, SyntheticKind};
use qzo_core::optim::{min_scale, zo_sgd_step};
use qzo_core::quant::format::{decode, encode};
use qzo_core::quant::{quantize_codebook, quantize_scalar, QuantLayer};
use qzo_core::rng::SeededNormalStream;
use qzo_core::tensor::Matrix;
use qzo_core::zo::{clip_directional, perturb, qspsa_estimate, spsa_estimate, Parameters, PerturbSpec, Scales};

fn matrix_strategy() -> impl Strategy<Value = (Matrix, usize)> {
    (1usize..6, prop::sample::select(vec![1usize, 2, 4, 8]), 1usize..4).prop_flat_map(|(rows, group, groups)| {
        let cols = group * groups;
        prop::collection::vec(-50.0f64..50.0, rows * cols)
            .prop_map(move |data| (Matrix::new(rows, cols, data).unwrap(), group))
    })
}

proptest! {
    #[test]
    fn normal_stream_replays(seed in any::<u64>(), n in 1usize..500, split in 0usize..500) {
        let split = split.min(n);
        let a = SeededNormalStream::new(seed).normals(n);
        let mut s = SeededNormalStream::new(seed);
        let mut b = s.normals(split);
        b.extend(s.normals(n - split));
        prop_assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        prop_assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn scalar_quantization_error_is_half_a_step(
        (w, group) in matrix_strategy(),
        bits in prop::sample::select(vec![2u8, 3, 4, 8]),
    ) {
        let layer = quantize_scalar(&w, bits, group).unwrap();
        let recon = layer.dequantize();
        for r in 0..w.rows() {
            for c in 0..w.cols() {
                let delta = layer.scales()[layer.scale_index(r, c)];
                let err = (w.get(r, c) - recon.get(r, c)).abs();
                prop_assert!(err <= delta / 2.0, "({r},{c}) err {err} > Δ/2 = {}", delta / 2.0);
            }
        }
        prop_assert!(layer.scales().iter().all(|s| *s >= 0.0));
    }

    #[test]
    fn layer_files_round_trip_bit_exactly(
        (w, group) in matrix_strategy(),
        bits in prop::sample::select(vec![2u8, 3, 4, 8]),
        with_bias in any::<bool>(),
    ) {
        let mut layer: QuantLayer = quantize_scalar(&w, bits, group).unwrap().into();
        if with_bias {
            layer = layer.with_bias((0..w.rows()).map(|i| i as f64 - 0.5).collect()).unwrap();
        }
        let bytes = encode(&layer);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        prop_assert_eq!(back, layer);
    }

    #[test]
    fn codebook_files_round_trip(seed in any::<u64>(), code_bits in 1u8..3) {
        let data = SeededNormalStream::new(seed).normals(8 * 8);
        let w = Matrix::new(8, 8, data).unwrap();
        let layer: QuantLayer = quantize_codebook(&w, code_bits, 2, 5).unwrap().into();
        let bytes = encode(&layer);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(encode(&back), bytes);
        prop_assert_eq!(back, layer);
    }

    #[test]
    fn quadratic_losses_are_differenced_exactly(seed in any::<u64>(), eps_exp in -3i32..0) {
        let q = Quadratic::random(seed);
        let eps = 10f64.powi(eps_exp);
        let mut theta = q.theta.clone();
        let spec = PerturbSpec::new(seed.rotate_left(17), eps).unwrap();
        let est = spsa_estimate(&mut theta, spec, |t: &Vec<f64>| q.loss(t)).unwrap();
        let z = spec.direction(theta.len());
        let err = directional_error(est.d, &z, &q.gradient());
        prop_assert!(err <= 1e-12, "relative error {err:e} at ε = {eps}");
        prop_assert_eq!(theta, q.theta.clone());
    }

    #[test]
    fn telescoping_stays_within_four_ulps(
        seed in any::<u64>(),
        log_eps in -6.0f64..-3.0,
        n in 1usize..512,
    ) {
        let eps = 10f64.powf(log_eps);
        let mut rng = qzo_core::rng::SplitMix64::new(seed ^ 1);
        let original: Vec<f64> = (0..n).map(|_| 0.01 + 0.99 * rng.next_f64()).collect();
        let mut v = Scales(original.clone());
        let spec = PerturbSpec::new(seed, eps).unwrap();
        perturb(&mut v, spec, 1.0);
        perturb(&mut v, spec, -2.0);
        perturb(&mut v, spec, 1.0);
        for (a, b) in v.0.iter().zip(&original) {
            prop_assert!(ulp_distance(*a, *b) <= 4, "{a} vs {b}");
        }
    }

    #[test]
    fn updates_keep_scales_non_negative(
        seed in any::<u64>(),
        start in prop::collection::vec(0.0f64..1.0, 1..64),
        ds in prop::collection::vec(-1e3f64..1e3, 1..20),
        lr in 1e-6f64..1.0,
    ) {
        let mut scales = Scales(start);
        for (t, d) in ds.iter().enumerate() {
            let spec = PerturbSpec::new(seed.wrapping_add(t as u64), 1e-3).unwrap();
            zo_sgd_step(&mut scales, *d, spec, lr).unwrap();
            prop_assert!(min_scale(&mut scales) >= 0.0);
        }
    }

    #[test]
    fn clipping_is_a_bounded_clamp(d in -1e6f64..1e6, c in 0.0f64..1e4) {
        let dc = clip_directional(d, c).unwrap();
        prop_assert!(dc.abs() <= c);
        if d.abs() <= c {
            prop_assert_eq!(dc, d);
        } else {
            prop_assert_eq!(dc, d.signum() * c);
        }
        prop_assert_eq!(clip_directional(d, f64::INFINITY).unwrap(), d);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn qspsa_is_exact_on_quadratic_scale_losses(seed in any::<u64>(), eps_exp in -3i32..0) {
        let ds = make_synthetic(SyntheticKind::LinearRegression, 40, 0.3, seed).unwrap();
        let q = QuantSettings { kind: QuantizerKind::Scalar, bits: 4, group_size: 2 };
        let mut model = build_model(ModelSpec::Linear, &ds, q, 0).unwrap();
        let batch = ds.split_batch(Split::Train);
        let g = model.analytic_gradient(&batch).unwrap();
        let spec = PerturbSpec::new(seed ^ 0xFEED, 10f64.powi(eps_exp)).unwrap();
        let est = qspsa_estimate(&mut model, spec, |m| m.probe_loss(&batch)).unwrap();
        let n = model.param_count();
        let err = directional_error(est.d, &spec.direction(n), &g);
        prop_assert!(err <= 1e-12, "relative error {err:e}");
    }
}
