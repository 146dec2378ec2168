//! Property tests for structural invariants of the ops, modules and head.

use cac_core::accounting;
use cac_core::baselines::*;
use cac_core::cac::*;
use cac_core::head::{global_pool_branch, HeadConfig, HeadKind, Reweighter};
use cac_core::ops;
use cac_core::rng::SplitMix64;
use cac_core::{PaddingMode, Tensor};
use proptest::prelude::*;

fn rand_t(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn rel(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.data().iter().chain(b.data()).fold(1.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

/// Cyclic shift of every channel by (dy, dx).
fn shift(x: &Tensor, dy: usize, dx: usize) -> Tensor {
    let (nb, c, h, w) = x.dims4().unwrap();
    Tensor::from_fn(&[nb, c, h, w], |i| {
        let xx = i % w;
        let y = (i / w) % h;
        let plane = i / (h * w);
        let sy = (y + h - dy % h) % h;
        let sx = (xx + w - dx % w) % w;
        x.data()[plane * h * w + sy * w + sx]
    })
}

/// Applies one spatial permutation to every channel.
fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let (_, _, h, w) = x.dims4().unwrap();
    let n = h * w;
    Tensor::from_fn(x.shape(), |i| x.data()[(i / n) * n + perm[i % n]])
}

fn per_channel_spatial_std(t: &Tensor) -> Vec<f64> {
    let (_, _, h, w) = t.dims4().unwrap();
    let n = h * w;
    t.data()
        .chunks(n)
        .map(|p| {
            if p.iter().all(|&v| v == p[0]) {
                return 0.0;
            }
            let m = p.iter().sum::<f64>() / n as f64;
            (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        })
        .collect()
}

fn pad_strategy() -> impl Strategy<Value = PaddingMode> {
    prop_oneof![Just(PaddingMode::Zero), Just(PaddingMode::Circular)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn depthwise_delta_kernel_is_identity(seed in any::<u64>(), c in 1usize..5, h in 1usize..7, w in 1usize..7, s in prop_oneof![Just(1usize), Just(3), Just(5)], d in 1usize..4, pad in pad_strategy()) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[2, c, h, w], &mut rng);
        let mut k = Tensor::zeros(&[s, s, c]);
        for ch in 0..c {
            k.data_mut()[((s / 2) * s + s / 2) * c + ch] = 1.0;
        }
        prop_assert_eq!(ops::conv2d_depthwise_dilated(&x, &k, d, pad).unwrap(), x);
    }

    #[test]
    fn conv_ops_are_linear(seed in any::<u64>(), c in 1usize..5, h in 1usize..6, w in 1usize..6, a in -2.0f64..2.0, b in -2.0f64..2.0, pad in pad_strategy()) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[1, c, h, w], &mut rng);
        let y = rand_t(&[1, c, h, w], &mut rng);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let k = rand_t(&[3, 3, c], &mut rng);
        let pw = rand_t(&[3, c], &mut rng);
        let full = rand_t(&[2, c, 3, 3], &mut rng);
        let ops_list: Vec<Box<dyn Fn(&Tensor) -> Tensor>> = vec![
            Box::new(|t| ops::conv2d_depthwise_dilated(t, &k, 2, pad).unwrap()),
            Box::new(|t| ops::conv2d_pointwise(t, &pw, None).unwrap()),
            Box::new(|t| ops::conv2d(t, &full, None).unwrap()),
        ];
        for op in &ops_list {
            let lhs = op(&mix);
            let rhs = op(&x).scale(a).add(&op(&y).scale(b)).unwrap();
            prop_assert!(rel(&lhs, &rhs) < 1e-10);
        }
    }

    #[test]
    fn same_padded_shapes_are_preserved(seed in any::<u64>(), nb in 1usize..3, c in 1usize..5, co in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[nb, c, h, w], &mut rng);
        let dw = ops::conv2d_depthwise_dilated(&x, &rand_t(&[3, 3, c], &mut rng), 3, PaddingMode::Zero).unwrap();
        prop_assert_eq!(dw.shape(), &[nb, c, h, w]);
        let pw = ops::conv2d_pointwise(&x, &rand_t(&[co, c], &mut rng), None).unwrap();
        prop_assert_eq!(pw.shape(), &[nb, co, h, w]);
        let full = ops::conv2d(&x, &rand_t(&[co, c, 3, 3], &mut rng), None).unwrap();
        prop_assert_eq!(full.shape(), &[nb, co, h, w]);
        let cfg = CacConfig::new(c);
        let p = CacParams::init(&cfg, &mut rng);
        let out = cac_forward(&x, &p, &cfg).unwrap();
        prop_assert_eq!(out.shape(), &[nb, c, h, w]);
    }

    #[test]
    fn depthwise_commutes_with_cyclic_shift(seed in any::<u64>(), c in 1usize..4, h in 1usize..8, w in 1usize..8, dy in 0usize..8, dx in 0usize..8, d in 1usize..4) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[1, c, h, w], &mut rng);
        let k = rand_t(&[3, 3, c], &mut rng);
        let a = ops::conv2d_depthwise_dilated(&shift(&x, dy, dx), &k, d, PaddingMode::Circular).unwrap();
        let b = shift(&ops::conv2d_depthwise_dilated(&x, &k, d, PaddingMode::Circular).unwrap(), dy, dx);
        prop_assert!(rel(&a, &b) < 1e-10);
    }

    #[test]
    fn cac_commutes_with_cyclic_shift(seed in any::<u64>(), c in 1usize..6, h in 2usize..8, w in 2usize..8, dy in 0usize..8, dx in 0usize..8) {
        let mut rng = SplitMix64::new(seed);
        let mut cfg = CacConfig::new(c);
        cfg.padding = PaddingMode::Circular;
        let p = CacParams::init(&cfg, &mut rng);
        let x = rand_t(&[1, c, h, w], &mut rng);
        let a = cac_forward(&shift(&x, dy, dx), &p, &cfg).unwrap();
        let b = shift(&cac_forward(&x, &p, &cfg).unwrap(), dy, dx);
        prop_assert!(rel(&a, &b) < 1e-9);
    }

    #[test]
    fn kernel_prediction_is_permutation_invariant(seed in any::<u64>(), c in 1usize..9, h in 1usize..7, w in 1usize..7, s in prop_oneof![Just(3usize), Just(5)]) {
        let mut rng = SplitMix64::new(seed);
        let mut cfg = CacConfig::new(c);
        cfg.kernel_size = s;
        let p = CacParams::init(&cfg, &mut rng);
        let x = rand_t(&[1, c, h, w], &mut rng);
        let mut perm: Vec<usize> = (0..h * w).collect();
        rng.shuffle(&mut perm);
        let (a, _) = predict_cac_kernels(&x, &p, &cfg).unwrap();
        let (b, _) = predict_cac_kernels(&permute(&x, &perm), &p, &cfg).unwrap();
        prop_assert!(rel(&a.kernels, &b.kernels) < 1e-10);
        let gap = GapKernelParams::init(c, s, &mut rng);
        prop_assert_eq!(gap_kernels(&x, &gap).unwrap().kernels.data().len(), s * s * c);
        let ga = gap_kernels(&x, &gap).unwrap();
        let gb = gap_kernels(&permute(&x, &perm), &gap).unwrap();
        prop_assert!(rel(&ga.kernels, &gb.kernels) < 1e-12);
    }

    #[test]
    fn weight_map_is_strictly_inside_unit_interval(seed in any::<u64>(), c in 1usize..6, h in 1usize..7, w in 1usize..7, scale in 0.1f64..3.0) {
        let mut rng = SplitMix64::new(seed);
        let cfg = CacConfig::new(c);
        let p = CacParams::init(&cfg, &mut rng);
        let x = rand_t(&[2, c, h, w], &mut rng).scale(scale);
        let (k, _) = predict_cac_kernels(&x, &p, &cfg).unwrap();
        let wm = generate_weight_map(&x, &k, &cfg.dilations, cfg.padding).unwrap();
        prop_assert!(wm.weights.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let out = reweight(&x, &wm).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            let ok = if *i == 0.0 { *o == 0.0 } else { o.abs() < i.abs() };
            prop_assert!(ok);
        }
    }

    #[test]
    fn se_weighting_is_spatially_constant(seed in any::<u64>(), h in 1usize..7, w in 1usize..7) {
        let mut rng = SplitMix64::new(seed);
        let cfg = HeadConfig { kind: HeadKind::Se, cac: CacConfig::new(8), se_reduction: 4, feature_hw: (h, w), num_classes: 3 };
        let se = Reweighter::init(&cfg, &mut rng).unwrap();
        let x = rand_t(&[2, 8, h, w], &mut rng);
        let map = se.weight_map(&x, &cfg.cac).unwrap();
        prop_assert!(per_channel_spatial_std(&map).iter().all(|&s| s == 0.0));
        let out = se.forward(&x, &cfg.cac).unwrap().0;
        prop_assert_eq!(out, x.mul(&map).unwrap());
    }

    #[test]
    fn pool_branch_has_zero_spatial_variance(seed in any::<u64>(), c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[2, c, h, w], &mut rng);
        let g = global_pool_branch(&x).unwrap();
        let m = ops::global_avg_pool(&x).unwrap();
        for (i, plane) in g.data().chunks(h * w).enumerate() {
            prop_assert!(plane.iter().all(|&v| v == m.data()[i]));
        }
    }

    #[test]
    fn parameter_counts_match_formulas(c in 1u64..70, s in prop_oneof![Just(3u64), Just(5), Just(7)]) {
        let mut rng = SplitMix64::new(c * 31 + s);
        let cfg = CacConfig { kernel_size: s as usize, ..CacConfig::new(c as usize) };
        let p = CacParams::init(&cfg, &mut rng);
        prop_assert_eq!(p.projection_param_count() as u64, c * c + s * s * c);
        prop_assert_eq!(p.param_count() as u64, c * c + s * s * c + 2 * c);
        prop_assert_eq!(accounting::cac_projection_params(c, s), c * c + s * s * c);
        prop_assert_eq!(FixedKernelParams::init(c as usize, s as usize, &mut rng).param_count() as u64, s * s * c);
    }
}

#[test]
fn saturated_weight_map_stays_in_closed_unit_interval() {
    let mut rng = SplitMix64::new(12);
    let cfg = CacConfig::new(4);
    let p = CacParams::init(&cfg, &mut rng);
    let x = rand_t(&[1, 4, 5, 5], &mut rng).scale(1e3);
    let (k, _) = predict_cac_kernels(&x, &p, &cfg).unwrap();
    let wm = generate_weight_map(&x, &k, &cfg.dilations, cfg.padding).unwrap();
    assert!(wm.weights.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn cac_weighting_varies_spatially_where_se_cannot() {
    let mut rng = SplitMix64::new(5);
    for _ in 0..10 {
        let cfg = CacConfig::new(8);
        let p = CacParams::init(&cfg, &mut rng);
        let x = rand_t(&[1, 8, 6, 6], &mut rng);
        let (k, _) = predict_cac_kernels(&x, &p, &cfg).unwrap();
        let wm = generate_weight_map(&x, &k, &cfg.dilations, cfg.padding).unwrap();
        let max_std = per_channel_spatial_std(&wm.weights).into_iter().fold(0.0, f64::max);
        assert!(max_std > 1e-3, "{max_std}");
    }
}

#[test]
fn constant_input_with_circular_padding_stays_constant() {
    let mut rng = SplitMix64::new(8);
    let mut cfg = CacConfig::new(3);
    cfg.padding = PaddingMode::Circular;
    let p = CacParams::init(&cfg, &mut rng);
    let x = Tensor::from_fn(&[1, 3, 5, 4], |i| [0.3, -1.2, 2.0][i / 20]);
    let out = cac_forward(&x, &p, &cfg).unwrap();
    assert!(per_channel_spatial_std(&out).iter().all(|&s| s < 1e-12));
}

#[test]
fn parameter_ordering_at_matched_size() {
    let (c, s, h, w) = (64, 3, 16, 16);
    let fixed = accounting::fixed_params(c, s);
    let cac = accounting::cac_projection_params(c, s);
    let gap = accounting::gap_params(c, s);
    let dwfc = accounting::dwfc_params(c, s, h, w);
    assert_eq!((fixed, cac, gap, dwfc), (576, 4672, 36_864, 147_456));
    assert!(fixed < cac && cac < gap && gap < dwfc);
    assert_eq!(accounting::cac_projection_params(512, 3), 266_752);
    assert_eq!(accounting::full_fc_dynamic_params(8, 3), 9 * 512);
}
