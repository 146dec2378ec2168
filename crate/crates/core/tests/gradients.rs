//! Central-difference checks of every hand-written backward pass.

use cac_core::baselines::*;
use cac_core::cac::*;
use cac_core::gradcheck::grad_check;
use cac_core::head::{HeadConfig, HeadKind, SegHead};
use cac_core::model::{Backbone, BackboneConfig, SegModel};
use cac_core::ops;
use cac_core::rng::SplitMix64;
use cac_core::{PaddingMode, Tensor};

const EPS: f64 = 1e-5;
const OP_TOL: f64 = 1e-5;
const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn rand_t(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape(), data.to_vec()).unwrap()
}

/// Checks d/dθ Σ R ⊙ f(θ) where `grad_fn` maps (θ, R) to the analytic gradient.
fn check(
    name: &str,
    theta: &Tensor,
    out_shape: &[usize],
    rng: &mut SplitMix64,
    f: impl Fn(&Tensor) -> Tensor,
    grad_fn: impl Fn(&Tensor, &Tensor) -> Tensor,
) {
    let r = rand_t(out_shape, rng);
    let report = grad_check(
        |p| {
            let t = with_data(theta, p);
            Ok((f(&t).dot(&r).unwrap(), grad_fn(&t, &r).into_data()))
        },
        theta.data(),
        EPS,
        OP_TOL,
    )
    .unwrap();
    assert!(report.passed(), "{name}: {report:?}");
}

#[test]
fn matmul_grads() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[4, 2], &mut rng);
        check("matmul dA", &a, &[3, 2], &mut rng, |a| ops::matmul(a, &b).unwrap(), |a, g| ops::matmul_backward(a, &b, g).unwrap().0);
        check("matmul dB", &b, &[3, 2], &mut rng, |b| ops::matmul(&a, b).unwrap(), |b, g| ops::matmul_backward(&a, b, g).unwrap().1);
    }
}

#[test]
fn pointwise_conv_grads() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[2, 3, 4, 5], &mut rng);
        let w = rand_t(&[4, 3], &mut rng);
        let b = rand_t(&[4], &mut rng);
        let out = [2, 4, 4, 5];
        check("pw dX", &x, &out, &mut rng, |x| ops::conv2d_pointwise(x, &w, Some(&b)).unwrap(), |x, g| ops::conv2d_pointwise_backward(x, &w, true, g).unwrap().0);
        check("pw dW", &w, &out, &mut rng, |w| ops::conv2d_pointwise(&x, w, Some(&b)).unwrap(), |w, g| ops::conv2d_pointwise_backward(&x, w, true, g).unwrap().1);
        check("pw dB", &b, &out, &mut rng, |b| ops::conv2d_pointwise(&x, &w, Some(b)).unwrap(), |_, g| ops::conv2d_pointwise_backward(&x, &w, true, g).unwrap().2.unwrap());
    }
}

#[test]
fn depthwise_dilated_grads() {
    for seed in SEEDS {
        for pad in [PaddingMode::Zero, PaddingMode::Circular] {
            for (dil, kshape) in [(1, vec![3, 3, 2]), (2, vec![2, 3, 3, 2]), (3, vec![5, 5, 2])] {
                let mut rng = SplitMix64::new(seed);
                let x = rand_t(&[2, 2, 5, 4], &mut rng);
                let k = rand_t(&kshape, &mut rng);
                let out = [2, 2, 5, 4];
                check("dw dX", &x, &out, &mut rng, |x| ops::conv2d_depthwise_dilated(x, &k, dil, pad).unwrap(), |x, g| ops::conv2d_depthwise_dilated_backward(x, &k, dil, pad, g).unwrap().0);
                check("dw dK", &k, &out, &mut rng, |k| ops::conv2d_depthwise_dilated(&x, k, dil, pad).unwrap(), |k, g| ops::conv2d_depthwise_dilated_backward(&x, k, dil, pad, g).unwrap().1);
            }
        }
    }
}

#[test]
fn pooling_upsample_sigmoid_relu_grads() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[2, 3, 4, 4], &mut rng);
        check("gap", &x, &[2, 3], &mut rng, |x| ops::global_avg_pool(x).unwrap(), |x, g| ops::global_avg_pool_backward(x.shape(), g).unwrap());
        check("upsample", &x, &[2, 3, 8, 8], &mut rng, |x| ops::bilinear_upsample(x, 2).unwrap(), |x, g| ops::bilinear_upsample_backward(x.shape(), 2, g).unwrap());
        check("upsample3", &x, &[2, 3, 12, 12], &mut rng, |x| ops::bilinear_upsample(x, 3).unwrap(), |x, g| ops::bilinear_upsample_backward(x.shape(), 3, g).unwrap());
        check("sigmoid", &x, &[2, 3, 4, 4], &mut rng, ops::sigmoid, |x, g| ops::sigmoid_backward(&ops::sigmoid(x), g).unwrap());
        check("relu", &x, &[2, 3, 4, 4], &mut rng, ops::relu, |x, g| ops::relu_backward(x, g).unwrap());
        check("avgpool", &x, &[2, 3, 2, 2], &mut rng, |x| ops::avg_pool2d(x, 2).unwrap(), |x, g| ops::avg_pool2d_backward(x.shape(), 2, g).unwrap());
        let v = rand_t(&[2, 3], &mut rng);
        check("broadcast", &v, &[2, 3, 3, 2], &mut rng, |v| ops::broadcast_spatial(v, 3, 2).unwrap(), |_, g| ops::broadcast_spatial_backward(g).unwrap());
    }
}

#[test]
fn full_conv_grads() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[1, 2, 4, 5], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let b = rand_t(&[3], &mut rng);
        let out = [1, 3, 4, 5];
        check("conv dX", &x, &out, &mut rng, |x| ops::conv2d(x, &w, Some(&b)).unwrap(), |x, g| ops::conv2d_backward(x, &w, true, g).unwrap().0);
        check("conv dW", &w, &out, &mut rng, |w| ops::conv2d(&x, w, Some(&b)).unwrap(), |w, g| ops::conv2d_backward(&x, w, true, g).unwrap().1);
    }
}

#[test]
fn softmax_cross_entropy_grads() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let logits = rand_t(&[2, 3, 3, 2], &mut rng).scale(3.0);
        let labels: Vec<usize> = (0..12).map(|_| rng.below(3) as usize).collect();
        let report = grad_check(
            |p| {
                let (l, g) = ops::softmax_cross_entropy(&with_data(&logits, p), &labels, Some(7))?;
                Ok((l, g.into_data()))
            },
            logits.data(),
            EPS,
            OP_TOL,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

/// Flattens a set of tensors into one vector and back.
fn flatten(ts: &[&Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(ts: Vec<&mut Tensor>, flat: &[f64]) {
    let mut off = 0;
    for t in ts {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

fn cac_cfg(c: usize, batching: KernelBatching, pad: PaddingMode) -> CacConfig {
    let mut cfg = CacConfig::new(c);
    cfg.dilations = vec![1, 2];
    cfg.kernel_batching = batching;
    cfg.padding = pad;
    cfg
}

#[test]
fn cac_module_grads() {
    for seed in SEEDS {
        for batching in [KernelBatching::PerSample, KernelBatching::BatchMean] {
            for bias in [false, true] {
                let mut rng = SplitMix64::new(seed);
                let mut cfg = cac_cfg(4, batching, PaddingMode::Zero);
                cfg.projection_bias = bias;
                let mut params = CacParams::init(&cfg, &mut rng);
                params.norm_gamma = rand_t(&[4], &mut rng);
                params.norm_beta = rand_t(&[4], &mut rng).scale(0.3);
                if bias {
                    params.query_bias = Some(rand_t(&[9], &mut rng).scale(0.1));
                    params.key_bias = Some(rand_t(&[4], &mut rng).scale(0.1));
                }
                let x = rand_t(&[2, 4, 5, 5], &mut rng);
                let r = rand_t(&[2, 4, 5, 5], &mut rng);
                // input gradient
                let rep = grad_check(
                    |p| {
                        let xx = with_data(&x, p);
                        let (o, cache) = cac_forward_cached(&xx, &params, &cfg)?;
                        let (gx, _) = cac_backward(&xx, &params, &cfg, &cache, &r)?;
                        Ok((o.dot(&r)?, gx.into_data()))
                    },
                    x.data(),
                    EPS,
                    1e-4,
                )
                .unwrap();
                assert!(rep.passed(), "cac dX {batching:?} bias={bias}: {rep:?}");
                // parameter gradients
                let theta = flatten(&params.named_params().iter().map(|(_, t)| *t).collect::<Vec<_>>());
                let rep = grad_check(
                    |p| {
                        let mut pp = params.clone();
                        unflatten(pp.params_mut(), p);
                        let (o, cache) = cac_forward_cached(&x, &pp, &cfg)?;
                        let (_, g) = cac_backward(&x, &pp, &cfg, &cache, &r)?;
                        Ok((o.dot(&r)?, flatten(&g.iter().collect::<Vec<_>>())))
                    },
                    &theta,
                    EPS,
                    1e-4,
                )
                .unwrap();
                assert!(rep.passed(), "cac dθ {batching:?} bias={bias}: {rep:?}");
            }
        }
    }
}

fn head_cfg(kind: HeadKind, c: usize, h: usize, w: usize) -> HeadConfig {
    let mut cac = cac_cfg(c, KernelBatching::PerSample, PaddingMode::Zero);
    cac.heads = 2;
    HeadConfig {
        kind,
        cac,
        se_reduction: 2,
        feature_hw: (h, w),
        num_classes: 3,
    }
}

/// grad_check of CE(head(X)) with respect to all head parameters and X.
fn head_loss_check(kind: HeadKind, seed: u64) -> (f64, f64) {
    let mut rng = SplitMix64::new(seed);
    let head = SegHead::init(head_cfg(kind, 4, 5, 5), &mut rng).unwrap();
    let x = rand_t(&[1, 4, 5, 5], &mut rng);
    let labels: Vec<usize> = (0..25).map(|_| rng.below(3) as usize).collect();
    let loss = |hd: &SegHead, xx: &Tensor| -> cac_core::Result<(f64, Tensor, Vec<Tensor>)> {
        let (logits, cache) = hd.forward_cached(xx)?;
        let (l, gl) = ops::softmax_cross_entropy(&logits, &labels, None)?;
        let (gx, gp) = hd.backward(xx, &cache, &gl)?;
        Ok((l, gx, gp))
    };
    let theta = flatten(&head.named_params().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let rp = grad_check(
        |p| {
            let mut hd = head.clone();
            unflatten(hd.params_mut(), p);
            let (l, _, gp) = loss(&hd, &x)?;
            Ok((l, flatten(&gp.iter().collect::<Vec<_>>())))
        },
        &theta,
        EPS,
        1e-4,
    )
    .unwrap();
    let rx = grad_check(
        |p| {
            let (l, gx, _) = loss(&head, &with_data(&x, p))?;
            Ok((l, gx.into_data()))
        },
        x.data(),
        EPS,
        1e-4,
    )
    .unwrap();
    (rp.max_rel_err, rx.max_rel_err)
}

#[test]
fn head_and_loss_grads_for_every_kind() {
    for kind in HeadKind::ALL {
        for seed in SEEDS {
            let (p, x) = head_loss_check(kind, seed);
            assert!(p < 1e-4 && x < 1e-4, "{kind} seed {seed}: params {p:e}, input {x:e}");
        }
    }
}

#[test]
fn baseline_module_grads() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let x = rand_t(&[2, 4, 4, 3], &mut rng);
        let r = rand_t(&[2, 4, 4, 3], &mut rng);
        let dil = [1, 2];
        let pad = PaddingMode::Circular;
        let gap = GapKernelParams::init(4, 3, &mut rng);
        check("gap dF", &gap.fc, x.shape(), &mut rng,
            |f| gap_kernel_forward(&x, &GapKernelParams { fc: f.clone(), kernel_size: 3 }, &dil, pad).unwrap(),
            |f, g| {
                let p = GapKernelParams { fc: f.clone(), kernel_size: 3 };
                let (_, c) = gap_kernel_forward_cached(&x, &p, &dil, pad).unwrap();
                gap_kernel_backward(&x, &p, &dil, pad, &c, g).unwrap().1.remove(0)
            });
        let dw = DwFcKernelParams::init(4, 3, 4, 3, &mut rng);
        check("dwfc dP", &dw.weights, x.shape(), &mut rng,
            |w| dwfc_kernel_forward(&x, &DwFcKernelParams { weights: w.clone() }, &dil, pad).unwrap(),
            |w, g| {
                let p = DwFcKernelParams { weights: w.clone() };
                let (_, c) = dwfc_kernel_forward_cached(&x, &p, &dil, pad).unwrap();
                dwfc_kernel_backward(&x, &p, &dil, pad, &c, g).unwrap().1.remove(0)
            });
        let rep = grad_check(
            |p| {
                let xx = with_data(&x, p);
                let (o, c) = dwfc_kernel_forward_cached(&xx, &dw, &dil, pad)?;
                Ok((o.dot(&r)?, dwfc_kernel_backward(&xx, &dw, &dil, pad, &c, &r)?.0.into_data()))
            },
            x.data(), EPS, 1e-4).unwrap();
        assert!(rep.passed(), "dwfc dX {rep:?}");
        let se = SeParams::init(4, 2, &mut rng).unwrap();
        let rep = grad_check(
            |p| {
                let xx = with_data(&x, p);
                let (o, c) = se_forward_cached(&xx, &se)?;
                Ok((o.dot(&r)?, se_backward(&xx, &se, &c, &r)?.0.into_data()))
            },
            x.data(), EPS, 1e-4).unwrap();
        assert!(rep.passed(), "se dX {rep:?}");
    }
}

#[test]
fn full_model_loss_grads_with_trainable_backbone() {
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let bb = Backbone::init(BackboneConfig::Shallow { channels: 4, depth: 2, stride: 2 }, 3, &mut rng).unwrap();
        let head = SegHead::init(head_cfg(HeadKind::Cac, 4, 3, 3), &mut rng).unwrap();
        let mut model = SegModel::new(bb, head, 3, false, &mut rng).unwrap();
        let img = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.next_f64());
        let labels: Vec<usize> = (0..72).map(|_| rng.below(3) as usize).collect();
        let theta: Vec<f64> = model.trainable_params_mut().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        let rep = grad_check(
            |p| {
                let mut m = model.clone();
                unflatten(m.trainable_params_mut().into_iter().map(|(_, t)| t).collect(), p);
                let bout = m.backbone.forward(&img)?;
                let out = m.loss_and_grads(&bout, &labels, 0.4)?;
                Ok((out.loss, flatten(&out.grads.iter().collect::<Vec<_>>())))
            },
            &theta,
            EPS,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed(), "seed {seed}: {rep:?}");
    }
}
