//! Self-contained verification suites: loop oracles, finite-difference
//! gradient checks and structural invariants. Each check yields one
//! `PASS/FAIL name value tolerance` line.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use cac_core::accounting;
use cac_core::baselines::*;
use cac_core::cac::*;
use cac_core::gradcheck::grad_check;
use cac_core::head::{global_pool_branch, HeadConfig, HeadKind, Reweighter, SegHead};
use cac_core::metrics::ConfusionMatrix;
use cac_core::model::{Backbone, BackboneConfig, SegModel};
use cac_core::ops;
use cac_core::rng::SplitMix64;
use cac_core::train::{poly_lr, sgd_step, OptimizerState, TrainConfig};
use cac_core::{PaddingMode, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Grads,
    Invariants,
    All,
}

impl FromStr for Suite {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "oracles" => Suite::Oracles,
            "grads" => Suite::Grads,
            "invariants" => Suite::Invariants,
            "all" => Suite::All,
            _ => bail!("unknown suite `{s}` (oracles, grads, invariants, all)"),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bound {
    /// value < tol
    Below(f64),
    /// value ≤ tol
    AtMost(f64),
    /// value > tol
    Above(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    bound: Bound,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { name: name.into(), value, bound: Bound::Below(tol) }
    }

    fn at_most(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { name: name.into(), value, bound: Bound::AtMost(tol) }
    }

    fn above(name: impl Into<String>, value: f64, tol: f64) -> Self {
        Self { name: name.into(), value, bound: Bound::Above(tol) }
    }

    /// 1 when `ok`, else 0, against an exact requirement.
    fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self::at_most(name, if ok { 0.0 } else { 1.0 }, 0.0)
    }

    pub fn passed(&self) -> bool {
        match self.bound {
            Bound::Below(t) => self.value < t,
            Bound::AtMost(t) => self.value <= t,
            Bound::Above(t) => self.value > t,
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let tol = match self.bound {
            Bound::Below(t) => format!("<{t:e}"),
            Bound::AtMost(t) => format!("<={t:e}"),
            Bound::Above(t) => format!(">{t:e}"),
        };
        write!(f, "{status} {} {:.3e} {tol}", self.name, self.value)
    }
}

/// Runs `suite`. `fault` names a gradient check whose analytic gradient is
/// corrupted on purpose.
pub fn run_suite(suite: Suite, fault: Option<&str>) -> Vec<Check> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Oracles | Suite::All) {
        out.extend(oracles());
    }
    if matches!(suite, Suite::Grads | Suite::All) {
        out.extend(grads(fault));
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        out.extend(invariants());
    }
    out
}

fn rand_t(shape: &[usize], rng: &mut SplitMix64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- oracles

/// Raw kernels by explicit per-(tap, channel) dot products over positions,
/// then per-channel standardization.
pub fn kernel_oracle(x: &Tensor, p: &CacParams, s: usize, eps: f64) -> Vec<f64> {
    let (nb, c, h, w) = x.dims4().expect("rank-4 input");
    let (taps, n) = (s * s, h * w);
    let xv = |b: usize, k: usize, q: usize| x.data()[(b * c + k) * n + q];
    let mut out = vec![0.0; nb * taps * c];
    for b in 0..nb {
        let mut raw = vec![0.0; taps * c];
        for i in 0..taps {
            for j in 0..c {
                let mut acc = 0.0;
                for q in 0..n {
                    let qv: f64 = (0..c).map(|k| p.query.data()[i * c + k] * xv(b, k, q)).sum();
                    let kv: f64 = (0..c).map(|k| p.key.data()[j * c + k] * xv(b, k, q)).sum();
                    acc += qv * kv;
                }
                raw[i * c + j] = acc;
            }
        }
        for j in 0..c {
            let mean = (0..taps).map(|i| raw[i * c + j]).sum::<f64>() / taps as f64;
            let var = (0..taps).map(|i| (raw[i * c + j] - mean).powi(2)).sum::<f64>() / taps as f64;
            for i in 0..taps {
                out[b * taps * c + i * c + j] =
                    p.norm_gamma.data()[j] * (raw[i * c + j] - mean) / (var + eps).sqrt() + p.norm_beta.data()[j];
            }
        }
    }
    out
}

/// Depth-wise dilated correlation by direct indexing, shared `[s, s, c]` kernel.
pub fn depthwise_oracle(x: &Tensor, k: &Tensor, d: usize, pad: PaddingMode) -> Vec<f64> {
    let (nb, c, h, w) = x.dims4().expect("rank-4 input");
    let s = k.shape()[0];
    let r = (s / 2) as isize;
    let mut out = vec![0.0; x.len()];
    for b in 0..nb {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for ky in 0..s {
                        for kx in 0..s {
                            let sy = y as isize + (ky as isize - r) * d as isize;
                            let sx = xx as isize + (kx as isize - r) * d as isize;
                            let (Some(sy), Some(sx)) = (pad.resolve(sy, h), pad.resolve(sx, w)) else {
                                continue;
                            };
                            acc += k.data()[(ky * s + kx) * c + ch] * x.data()[((b * c + ch) * h + sy) * w + sx];
                        }
                    }
                    out[((b * c + ch) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

fn oracles() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = SplitMix64::new(0x0AC1E);

    let mut worst = 0.0f64;
    for inst in 0..24 {
        let c = 1 + rng.below(16) as usize;
        let s = if inst % 2 == 0 { 3 } else { 5 };
        let (h, w) = (1 + rng.below(8) as usize, 1 + rng.below(8) as usize);
        let mut cfg = CacConfig::new(c);
        cfg.kernel_size = s;
        let mut p = CacParams::init(&cfg, &mut rng);
        p.norm_gamma = rand_t(&[c], &mut rng);
        p.norm_beta = rand_t(&[c], &mut rng);
        let x = rand_t(&[2, c, h, w], &mut rng);
        let got = predict_cac_kernels(&x, &p, &cfg).map(|(k, _)| k.kernels.into_data());
        worst = worst.max(got.map_or(f64::INFINITY, |g| max_rel(&g, &kernel_oracle(&x, &p, s, cfg.norm_eps))));
    }
    checks.push(Check::below("oracle.kernel_prediction.rel (24 instances)", worst, 1e-10));

    let mut worst = 0.0f64;
    for inst in 0..30 {
        let c = 1 + rng.below(6) as usize;
        let s = [1, 3, 5][inst % 3];
        let d = 1 + rng.below(4) as usize;
        let pad = if inst % 2 == 0 { PaddingMode::Zero } else { PaddingMode::Circular };
        let x = rand_t(&[2, c, 1 + rng.below(9) as usize, 1 + rng.below(9) as usize], &mut rng);
        let k = rand_t(&[s, s, c], &mut rng);
        let got = ops::conv2d_depthwise_dilated(&x, &k, d, pad).map(Tensor::into_data);
        worst = worst.max(got.map_or(f64::INFINITY, |g| max_abs(&g, &depthwise_oracle(&x, &k, d, pad))));
    }
    checks.push(Check::below("oracle.conv2d_depthwise_dilated.abs (30 instances)", worst, 1e-12));

    let a = rand_t(&[4, 6], &mut rng);
    let b = rand_t(&[6, 5], &mut rng);
    let want: Vec<f64> = (0..20)
        .map(|ij| (0..6).map(|k| a.data()[(ij / 5) * 6 + k] * b.data()[k * 5 + ij % 5]).sum())
        .collect();
    let got = ops::matmul(&a, &b).map_or(vec![f64::INFINITY; 20], Tensor::into_data);
    checks.push(Check::below("oracle.matmul.abs", max_abs(&got, &want), 1e-12));

    let x = rand_t(&[2, 3, 4, 2], &mut rng);
    let wt = rand_t(&[5, 3], &mut rng);
    let bias = rand_t(&[5], &mut rng);
    let want: Vec<f64> = (0..2 * 5 * 8)
        .map(|i| {
            let (n, o, p) = (i / 40, (i / 8) % 5, i % 8);
            bias.data()[o] + (0..3).map(|k| wt.data()[o * 3 + k] * x.data()[(n * 3 + k) * 8 + p]).sum::<f64>()
        })
        .collect();
    let got = ops::conv2d_pointwise(&x, &wt, Some(&bias)).map_or(vec![f64::INFINITY; 80], Tensor::into_data);
    checks.push(Check::below("oracle.conv2d_pointwise.abs", max_abs(&got, &want), 1e-12));

    let want: Vec<f64> = x.data().chunks(8).map(|p| p.iter().sum::<f64>() / 8.0).collect();
    let got = ops::global_avg_pool(&x).map_or(vec![f64::INFINITY; 6], Tensor::into_data);
    checks.push(Check::below("oracle.global_avg_pool.abs", max_abs(&got, &want), 1e-12));

    let ramp = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).expect("ramp");
    let got = ops::bilinear_upsample(&ramp, 2).map_or(vec![f64::INFINITY; 8], Tensor::into_data);
    checks.push(Check::below("oracle.bilinear_upsample.ramp", max_abs(&got[..4], &[0.0, 0.25, 0.75, 1.0]), 1e-15));

    let z = rand_t(&[64], &mut rng).scale(10.0);
    let want: Vec<f64> = z.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
    checks.push(Check::below("oracle.sigmoid.abs", max_abs(ops::sigmoid(&z).data(), &want), 1e-15));

    let mut worst = 0.0f64;
    for k in [2usize, 3, 7] {
        let logits = Tensor::full(&[1, k, 2, 2], 0.3);
        let l = ops::softmax_cross_entropy(&logits, &[0, 1, 1, 0], None).map_or(f64::INFINITY, |r| r.0);
        worst = worst.max((l - (k as f64).ln()).abs());
    }
    checks.push(Check::below("oracle.cross_entropy.uniform_ln_k", worst, 1e-12));

    let (c, s, h, w) = (3, 3, 4, 5);
    let x = rand_t(&[1, c, h, w], &mut rng);
    let gap = GapKernelParams::init(c, s, &mut rng);
    let v = ops::global_avg_pool(&x).expect("pool");
    let want: Vec<f64> = (0..s * s * c)
        .map(|t| (0..c).map(|i| v.data()[i] * gap.fc.data()[i * s * s * c + t]).sum())
        .collect();
    let got = gap_kernels(&x, &gap).map_or(vec![f64::INFINITY; 27], |k| k.kernels.into_data());
    checks.push(Check::below("oracle.gap_kernels.abs", max_abs(&got, &want), 1e-12));

    let dw = DwFcKernelParams::init(c, s, h, w, &mut rng);
    let want: Vec<f64> = (0..s * s * c)
        .map(|tj| {
            let (t, j) = (tj / c, tj % c);
            (0..h * w).map(|p| dw.weights.data()[(p * s * s + t) * c + j] * x.data()[j * h * w + p]).sum()
        })
        .collect();
    let got = dwfc_kernels(&x, &dw).map_or(vec![f64::INFINITY; 27], |k| k.kernels.into_data());
    checks.push(Check::below("oracle.dwfc_kernels.abs", max_abs(&got, &want), 1e-12));

    let se = SeParams::init(4, 2, &mut rng).expect("se params");
    let x4 = rand_t(&[1, 4, 3, 3], &mut rng);
    let v = ops::global_avg_pool(&x4).expect("pool");
    let hid: Vec<f64> = (0..2)
        .map(|i| (0..4).map(|j| se.reduce.data()[i * 4 + j] * v.data()[j]).sum::<f64>().max(0.0))
        .collect();
    let want: Vec<f64> = (0..4)
        .map(|j| 1.0 / (1.0 + (-(0..2).map(|i| se.expand.data()[j * 2 + i] * hid[i]).sum::<f64>()).exp()))
        .collect();
    let got = se_gate(&x4, &se).map_or(vec![f64::INFINITY; 4], Tensor::into_data);
    checks.push(Check::below("oracle.se_gate.abs", max_abs(&got, &want), 1e-12));

    let cfg = CacConfig::new(4);
    let p = CacParams::init(&cfg, &mut rng);
    let x = rand_t(&[2, 4, 5, 6], &mut rng);
    let composed = predict_cac_kernels(&x, &p, &cfg)
        .and_then(|(k, _)| generate_weight_map(&x, &k, &cfg.dilations, cfg.padding))
        .and_then(|wm| reweight(&x, &wm));
    let ok = matches!((cac_forward(&x, &p, &cfg), composed), (Ok(a), Ok(b)) if a == b);
    checks.push(Check::holds("oracle.cac_forward.composition", ok));
    checks
}

// ------------------------------------------------------------------ grads

const EPS: f64 = 1e-5;
const SEEDS: [u64; 5] = [11, 22, 33, 44, 55];

fn with_data(t: &Tensor, data: &[f64]) -> Tensor {
    Tensor::new(t.shape(), data.to_vec()).expect("same length")
}

fn flatten<'a>(ts: impl IntoIterator<Item = &'a Tensor>) -> Vec<f64> {
    ts.into_iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(ts: Vec<&mut Tensor>, flat: &[f64]) {
    let mut off = 0;
    for t in ts {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    }
}

/// Gradient checker over `n` seeds that records the worst relative error.
struct GradSuite<'f> {
    fault: Option<&'f str>,
    checks: Vec<Check>,
}

impl GradSuite<'_> {
    /// `loss(θ) -> (L, ∂L/∂θ)` checked at `theta`; worst error over calls to
    /// this name is reported once by [`GradSuite::finish`].
    fn probe(&self, name: &str, theta: &[f64], mut loss: impl FnMut(&[f64]) -> cac_core::Result<(f64, Vec<f64>)>) -> f64 {
        let corrupt = self.fault.is_some_and(|f| name.starts_with(f));
        let report = grad_check(
            |p| {
                let (l, mut g) = loss(p)?;
                if corrupt {
                    g[0] += 0.1;
                }
                Ok((l, g))
            },
            theta,
            EPS,
            1e-4,
        );
        report.map_or(f64::INFINITY, |r| r.max_rel_err)
    }

    /// Checks d/dθ Σ R ⊙ f(θ) for a random projection R.
    fn linear(
        &self,
        name: &str,
        theta: &Tensor,
        out_shape: &[usize],
        rng: &mut SplitMix64,
        f: impl Fn(&Tensor) -> cac_core::Result<Tensor>,
        grad: impl Fn(&Tensor, &Tensor) -> cac_core::Result<Tensor>,
    ) -> f64 {
        let r = rand_t(out_shape, rng);
        self.probe(name, theta.data(), |p| {
            let t = with_data(theta, p);
            Ok((f(&t)?.dot(&r)?, grad(&t, &r)?.into_data()))
        })
    }

    fn record(&mut self, name: &str, errs: impl IntoIterator<Item = f64>, tol: f64) {
        let worst = errs.into_iter().fold(0.0, f64::max);
        self.checks.push(Check::below(format!("{name} (rel, 5 seeds)"), worst, tol));
    }
}

fn grads(fault: Option<&str>) -> Vec<Check> {
    let mut g = GradSuite { fault, checks: Vec::new() };
    let op_tol = 1e-5;
    let module_tol = 1e-4;

    let mut errs = vec![Vec::new(); 16];
    for seed in SEEDS {
        let mut rng = SplitMix64::new(seed);
        let a = rand_t(&[3, 4], &mut rng);
        let b = rand_t(&[4, 2], &mut rng);
        errs[0].push(g.linear("grad.matmul", &a, &[3, 2], &mut rng, |a| ops::matmul(a, &b), |a, r| Ok(ops::matmul_backward(a, &b, r)?.0)));
        errs[0].push(g.linear("grad.matmul", &b, &[3, 2], &mut rng, |b| ops::matmul(&a, b), |b, r| Ok(ops::matmul_backward(&a, b, r)?.1)));

        let x = rand_t(&[2, 3, 4, 5], &mut rng);
        let w = rand_t(&[4, 3], &mut rng);
        let bias = rand_t(&[4], &mut rng);
        let out = [2, 4, 4, 5];
        errs[1].push(g.linear("grad.conv2d_pointwise", &x, &out, &mut rng, |x| ops::conv2d_pointwise(x, &w, Some(&bias)), |x, r| Ok(ops::conv2d_pointwise_backward(x, &w, true, r)?.0)));
        errs[1].push(g.linear("grad.conv2d_pointwise", &w, &out, &mut rng, |w| ops::conv2d_pointwise(&x, w, Some(&bias)), |w, r| Ok(ops::conv2d_pointwise_backward(&x, w, true, r)?.1)));
        errs[1].push(g.linear("grad.conv2d_pointwise", &bias, &out, &mut rng, |b| ops::conv2d_pointwise(&x, &w, Some(b)), |_, r| Ok(ops::conv2d_pointwise_backward(&x, &w, true, r)?.2.expect("bias grad"))));

        for pad in [PaddingMode::Zero, PaddingMode::Circular] {
            for (d, kshape) in [(1, vec![3, 3, 2]), (2, vec![2, 3, 3, 2])] {
                let x = rand_t(&[2, 2, 5, 4], &mut rng);
                let k = rand_t(&kshape, &mut rng);
                let out = [2, 2, 5, 4];
                errs[2].push(g.linear("grad.conv2d_depthwise_dilated", &x, &out, &mut rng, |x| ops::conv2d_depthwise_dilated(x, &k, d, pad), |x, r| Ok(ops::conv2d_depthwise_dilated_backward(x, &k, d, pad, r)?.0)));
                errs[2].push(g.linear("grad.conv2d_depthwise_dilated", &k, &out, &mut rng, |k| ops::conv2d_depthwise_dilated(&x, k, d, pad), |k, r| Ok(ops::conv2d_depthwise_dilated_backward(&x, k, d, pad, r)?.1)));
            }
        }

        let x = rand_t(&[2, 3, 4, 4], &mut rng);
        errs[3].push(g.linear("grad.global_avg_pool", &x, &[2, 3], &mut rng, ops::global_avg_pool, |x, r| ops::global_avg_pool_backward(x.shape(), r)));
        errs[4].push(g.linear("grad.bilinear_upsample", &x, &[2, 3, 8, 8], &mut rng, |x| ops::bilinear_upsample(x, 2), |x, r| ops::bilinear_upsample_backward(x.shape(), 2, r)));
        errs[5].push(g.linear("grad.sigmoid", &x, x.shape(), &mut rng, |x| Ok(ops::sigmoid(x)), |x, r| ops::sigmoid_backward(&ops::sigmoid(x), r)));
        errs[6].push(g.linear("grad.relu", &x, x.shape(), &mut rng, |x| Ok(ops::relu(x)), |x, r| ops::relu_backward(x, r)));
        errs[7].push(g.linear("grad.avg_pool2d", &x, &[2, 3, 2, 2], &mut rng, |x| ops::avg_pool2d(x, 2), |x, r| ops::avg_pool2d_backward(x.shape(), 2, r)));
        let v = rand_t(&[2, 3], &mut rng);
        errs[8].push(g.linear("grad.broadcast_spatial", &v, &[2, 3, 3, 2], &mut rng, |v| ops::broadcast_spatial(v, 3, 2), |_, r| ops::broadcast_spatial_backward(r)));

        let x = rand_t(&[1, 2, 4, 5], &mut rng);
        let w = rand_t(&[3, 2, 3, 3], &mut rng);
        let out = [1, 3, 4, 5];
        errs[9].push(g.linear("grad.conv2d", &x, &out, &mut rng, |x| ops::conv2d(x, &w, None), |x, r| Ok(ops::conv2d_backward(x, &w, false, r)?.0)));
        errs[9].push(g.linear("grad.conv2d", &w, &out, &mut rng, |w| ops::conv2d(&x, w, None), |w, r| Ok(ops::conv2d_backward(&x, w, false, r)?.1)));

        let logits = rand_t(&[2, 3, 3, 2], &mut rng).scale(3.0);
        let labels: Vec<usize> = (0..12).map(|_| rng.below(3) as usize).collect();
        errs[10].push(g.probe("grad.softmax_cross_entropy", logits.data(), |p| {
            let (l, gr) = ops::softmax_cross_entropy(&with_data(&logits, p), &labels, None)?;
            Ok((l, gr.into_data()))
        }));

        for batching in [KernelBatching::PerSample, KernelBatching::BatchMean] {
            let mut cfg = CacConfig::new(4);
            cfg.dilations = vec![1, 2];
            cfg.kernel_batching = batching;
            let mut params = CacParams::init(&cfg, &mut rng);
            params.norm_gamma = rand_t(&[4], &mut rng);
            params.norm_beta = rand_t(&[4], &mut rng).scale(0.3);
            let x = rand_t(&[2, 4, 5, 5], &mut rng);
            let r = rand_t(&[2, 4, 5, 5], &mut rng);
            errs[11].push(g.probe("grad.cac_module", x.data(), |p| {
                let xx = with_data(&x, p);
                let (o, cache) = cac_forward_cached(&xx, &params, &cfg)?;
                Ok((o.dot(&r)?, cac_backward(&xx, &params, &cfg, &cache, &r)?.0.into_data()))
            }));
            let theta = flatten(params.named_params().into_iter().map(|(_, t)| t));
            errs[11].push(g.probe("grad.cac_module", &theta, |p| {
                let mut pp = params.clone();
                unflatten(pp.params_mut(), p);
                let (o, cache) = cac_forward_cached(&x, &pp, &cfg)?;
                let (_, gr) = cac_backward(&x, &pp, &cfg, &cache, &r)?;
                Ok((o.dot(&r)?, flatten(&gr)))
            }));
        }

        for (slot, kind) in [(12, HeadKind::Fixed), (13, HeadKind::Gap), (14, HeadKind::DwFc), (15, HeadKind::Se)] {
            let cfg = module_cfg(kind, 4, 4, 3);
            let m = Reweighter::init(&cfg, &mut rng).expect("module init");
            let x = rand_t(&[2, 4, 4, 3], &mut rng);
            let r = rand_t(&[2, 4, 4, 3], &mut rng);
            let name = format!("grad.{kind}_module");
            errs[slot].push(g.probe(&name, x.data(), |p| {
                let xx = with_data(&x, p);
                let (o, cache) = m.forward(&xx, &cfg.cac)?;
                Ok((o.dot(&r)?, m.backward(&xx, &cfg.cac, &cache, &r)?.0.into_data()))
            }));
            let theta = flatten(m.named_params().into_iter().map(|(_, t)| t));
            errs[slot].push(g.probe(&name, &theta, |p| {
                let mut mm = m.clone();
                unflatten(mm.params_mut(), p);
                let (o, cache) = mm.forward(&x, &cfg.cac)?;
                let (_, gr) = mm.backward(&x, &cfg.cac, &cache, &r)?;
                Ok((o.dot(&r)?, flatten(&gr)))
            }));
        }
    }
    let names = [
        ("grad.matmul", op_tol),
        ("grad.conv2d_pointwise", op_tol),
        ("grad.conv2d_depthwise_dilated", op_tol),
        ("grad.global_avg_pool", op_tol),
        ("grad.bilinear_upsample", op_tol),
        ("grad.sigmoid", op_tol),
        ("grad.relu", op_tol),
        ("grad.avg_pool2d", op_tol),
        ("grad.broadcast_spatial", op_tol),
        ("grad.conv2d", op_tol),
        ("grad.softmax_cross_entropy", op_tol),
        ("grad.cac_module", module_tol),
        ("grad.fixed_module", module_tol),
        ("grad.gap_module", module_tol),
        ("grad.dwfc_module", module_tol),
        ("grad.se_module", module_tol),
    ];
    for ((name, tol), e) in names.into_iter().zip(errs) {
        g.record(name, e, tol);
    }

    for kind in HeadKind::ALL {
        let name = format!("grad.head_loss.{kind}");
        let errs: Vec<f64> = SEEDS.iter().map(|&s| head_loss_err(&g, &name, kind, s)).collect();
        g.record(&name, errs, module_tol);
    }

    let errs: Vec<f64> = SEEDS.iter().map(|&s| model_loss_err(&g, s)).collect();
    g.record("grad.model_loss", errs, module_tol);
    g.checks
}

fn module_cfg(kind: HeadKind, c: usize, h: usize, w: usize) -> HeadConfig {
    let mut cac = CacConfig::new(c);
    cac.dilations = vec![1, 2];
    cac.heads = 2;
    cac.padding = PaddingMode::Circular;
    HeadConfig {
        kind,
        cac,
        se_reduction: 2,
        feature_hw: (h, w),
        num_classes: 3,
    }
}

/// Worst of the parameter and input checks of CE(head(X)) on a (1, 4, 5, 5)
/// instance, s = 3, dilations {1, 2}, H = 2.
fn head_loss_err(g: &GradSuite, name: &str, kind: HeadKind, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let mut cfg = module_cfg(kind, 4, 5, 5);
    cfg.cac.padding = PaddingMode::Zero;
    let Ok(head) = SegHead::init(cfg, &mut rng) else {
        return f64::INFINITY;
    };
    let x = rand_t(&[1, 4, 5, 5], &mut rng);
    let labels: Vec<usize> = (0..25).map(|_| rng.below(3) as usize).collect();
    let loss = |hd: &SegHead, xx: &Tensor| -> cac_core::Result<(f64, Tensor, Vec<Tensor>)> {
        let (logits, cache) = hd.forward_cached(xx)?;
        let (l, gl) = ops::softmax_cross_entropy(&logits, &labels, None)?;
        let (gx, gp) = hd.backward(xx, &cache, &gl)?;
        Ok((l, gx, gp))
    };
    let theta = flatten(head.named_params().into_iter().map(|(_, t)| t));
    let ep = g.probe(name, &theta, |p| {
        let mut hd = head.clone();
        unflatten(hd.params_mut(), p);
        let (l, _, gp) = loss(&hd, &x)?;
        Ok((l, flatten(&gp)))
    });
    let ex = g.probe(name, x.data(), |p| {
        let (l, gx, _) = loss(&head, &with_data(&x, p))?;
        Ok((l, gx.into_data()))
    });
    ep.max(ex)
}

/// Main + auxiliary loss through a trainable shallow backbone.
fn model_loss_err(g: &GradSuite, seed: u64) -> f64 {
    let mut rng = SplitMix64::new(seed);
    let build = || -> cac_core::Result<SegModel> {
        let mut rng = SplitMix64::new(seed);
        let bb = Backbone::init(BackboneConfig::Shallow { channels: 4, depth: 2, stride: 2 }, 3, &mut rng)?;
        let mut cfg = module_cfg(HeadKind::Cac, 4, 3, 3);
        cfg.cac.padding = PaddingMode::Zero;
        SegModel::new(bb, SegHead::init(cfg, &mut rng)?, 3, false, &mut rng)
    };
    let Ok(mut model) = build() else {
        return f64::INFINITY;
    };
    let img = Tensor::from_fn(&[2, 3, 6, 6], |_| rng.next_f64());
    let labels: Vec<usize> = (0..72).map(|_| rng.below(3) as usize).collect();
    let theta: Vec<f64> = model.trainable_params_mut().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    g.probe("grad.model_loss", &theta, |p| {
        let mut m = model.clone();
        unflatten(m.trainable_params_mut().into_iter().map(|(_, t)| t).collect(), p);
        let bout = m.backbone.forward(&img)?;
        let out = m.loss_and_grads(&bout, &labels, 0.4)?;
        Ok((out.loss, flatten(&out.grads)))
    })
}

// ------------------------------------------------------------- invariants

fn shift(x: &Tensor, dy: usize, dx: usize) -> Tensor {
    let (_, _, h, w) = x.dims4().expect("rank-4");
    Tensor::from_fn(x.shape(), |i| {
        let (xx, y, plane) = (i % w, (i / w) % h, i / (h * w));
        x.data()[plane * h * w + ((y + h - dy % h) % h) * w + (xx + w - dx % w) % w]
    })
}

fn spatial_std(t: &Tensor) -> Vec<f64> {
    let (_, _, h, w) = t.dims4().expect("rank-4");
    t.data()
        .chunks(h * w)
        .map(|p| {
            if p.iter().all(|&v| v == p[0]) {
                return 0.0;
            }
            let m = p.iter().sum::<f64>() / p.len() as f64;
            (p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / p.len() as f64).sqrt()
        })
        .collect()
}

fn rel_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    let scale = a.data().iter().chain(b.data()).fold(1.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b) / scale
}

fn invariants() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = SplitMix64::new(0x1A7A);

    let (mut in_range, mut contracts) = (true, true);
    let (mut cac_std_min, mut se_std_max) = (f64::INFINITY, 0.0f64);
    let (mut perm_worst, mut shift_worst, mut dw_shift_worst) = (0.0f64, 0.0f64, 0.0f64);
    let mut shapes = true;
    for _ in 0..20 {
        let c = 4 * (1 + rng.below(3) as usize);
        let (h, w) = (2 + rng.below(7) as usize, 2 + rng.below(7) as usize);
        let nb = 1 + rng.below(2) as usize;
        let mut cfg = CacConfig::new(c);
        cfg.padding = PaddingMode::Circular;
        let p = CacParams::init(&cfg, &mut rng);
        let x = rand_t(&[nb, c, h, w], &mut rng);
        let Ok((k, _)) = predict_cac_kernels(&x, &p, &cfg) else {
            shapes = false;
            continue;
        };
        shapes &= k.kernels.shape() == [nb, 3, 3, c];
        let Ok(wm) = generate_weight_map(&x, &k, &cfg.dilations, cfg.padding) else {
            shapes = false;
            continue;
        };
        in_range &= wm.weights.data().iter().all(|&v| v > 0.0 && v < 1.0);
        let out = reweight(&x, &wm).expect("same shape");
        shapes &= out.shape() == x.shape();
        contracts &= out.data().iter().zip(x.data()).all(|(o, i)| if *i == 0.0 { *o == 0.0 } else { o.abs() < i.abs() });
        cac_std_min = cac_std_min.min(spatial_std(&wm.weights).into_iter().fold(0.0, f64::max));

        let se_cfg = HeadConfig { kind: HeadKind::Se, cac: cfg.clone(), se_reduction: 4, feature_hw: (h, w), num_classes: 3 };
        let se = Reweighter::init(&se_cfg, &mut rng).expect("se init");
        let map = se.weight_map(&x, &cfg).expect("se map");
        se_std_max = spatial_std(&map).into_iter().fold(se_std_max, f64::max);

        let mut perm: Vec<usize> = (0..h * w).collect();
        rng.shuffle(&mut perm);
        let n = h * w;
        let xp = Tensor::from_fn(x.shape(), |i| x.data()[(i / n) * n + perm[i % n]]);
        let kp = predict_cac_kernels(&xp, &p, &cfg).map(|r| r.0.kernels);
        perm_worst = perm_worst.max(kp.map_or(f64::INFINITY, |kp| max_rel(kp.data(), k.kernels.data())));

        let (dy, dx) = (rng.below(h as u64) as usize, rng.below(w as u64) as usize);
        let a = cac_forward(&shift(&x, dy, dx), &p, &cfg);
        let b = cac_forward(&x, &p, &cfg).map(|o| shift(&o, dy, dx));
        shift_worst = shift_worst.max(match (a, b) {
            (Ok(a), Ok(b)) => rel_diff(&a, &b),
            _ => f64::INFINITY,
        });
        let kd = rand_t(&[3, 3, c], &mut rng);
        let a = ops::conv2d_depthwise_dilated(&shift(&x, dy, dx), &kd, 2, PaddingMode::Circular);
        let b = ops::conv2d_depthwise_dilated(&x, &kd, 2, PaddingMode::Circular).map(|o| shift(&o, dy, dx));
        dw_shift_worst = dw_shift_worst.max(match (a, b) {
            (Ok(a), Ok(b)) => rel_diff(&a, &b),
            _ => f64::INFINITY,
        });
    }
    checks.push(Check::holds("inv.weight_map_in_open_unit_interval", in_range));
    checks.push(Check::holds("inv.reweight_contracts_magnitude", contracts));
    checks.push(Check::at_most("inv.se_weight_spatial_std", se_std_max, 0.0));
    checks.push(Check::above("inv.cac_weight_spatial_std (min over instances)", cac_std_min, 1e-3));
    checks.push(Check::below("inv.kernel_permutation_invariance.rel", perm_worst, 1e-10));
    checks.push(Check::below("inv.cac_translation_equivariance.rel", shift_worst, 1e-9));
    checks.push(Check::below("inv.depthwise_translation_equivariance.rel", dw_shift_worst, 1e-10));
    checks.push(Check::holds("inv.cac_shape_contracts", shapes));

    let mut ok = true;
    for d in 1..4 {
        for pad in [PaddingMode::Zero, PaddingMode::Circular] {
            let x = rand_t(&[2, 3, 5, 4], &mut rng);
            let k = Tensor::from_fn(&[3, 3, 3], |i| if i / 3 == 4 { 1.0 } else { 0.0 });
            ok &= ops::conv2d_depthwise_dilated(&x, &k, d, pad).is_ok_and(|y| y == x);
        }
    }
    checks.push(Check::holds("inv.depthwise_delta_identity", ok));

    let mut worst = 0.0f64;
    for _ in 0..10 {
        let x = rand_t(&[1, 3, 4, 5], &mut rng);
        let y = rand_t(&[1, 3, 4, 5], &mut rng);
        let (a, b) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let k = rand_t(&[3, 3, 3], &mut rng);
        let mix = x.scale(a).add(&y.scale(b)).expect("same shape");
        let op = |t: &Tensor| ops::conv2d_depthwise_dilated(t, &k, 2, PaddingMode::Zero).expect("valid op");
        worst = worst.max(rel_diff(&op(&mix), &op(&x).scale(a).add(&op(&y).scale(b)).expect("same shape")));
    }
    checks.push(Check::below("inv.depthwise_linearity.rel", worst, 1e-10));

    let x = rand_t(&[2, 3, 4, 5], &mut rng);
    let pooled = global_pool_branch(&x).map(|t| spatial_std(&t).into_iter().fold(0.0, f64::max));
    checks.push(Check::at_most("inv.pool_branch_spatial_std", pooled.unwrap_or(f64::INFINITY), 0.0));

    let mut counts_ok = true;
    for c in [4u64, 8, 16, 64] {
        for s in [3u64, 5, 7] {
            let cfg = CacConfig { kernel_size: s as usize, ..CacConfig::new(c as usize) };
            let p = CacParams::init(&cfg, &mut rng);
            counts_ok &= p.projection_param_count() as u64 == c * c + s * s * c;
            counts_ok &= p.param_count() as u64 == c * c + s * s * c + 2 * c;
        }
    }
    checks.push(Check::holds("inv.cac_param_counts", counts_ok));
    let (f, c, gp, d) = (
        accounting::fixed_params(64, 3),
        accounting::cac_projection_params(64, 3),
        accounting::gap_params(64, 3),
        accounting::dwfc_params(64, 3, 16, 16),
    );
    checks.push(Check::holds("inv.param_ordering_fixed<cac<gap<dwfc", f < c && c < gp && gp < d));

    let tc = TrainConfig { initial_lr: 0.3, total_iters: 50, ..TrainConfig::default() };
    let lrs: Vec<f64> = (0..=50).map(|i| poly_lr(i, &tc).unwrap_or(f64::NAN)).collect();
    checks.push(Check::holds("inv.poly_lr_endpoints", lrs[0] == 0.3 && lrs[50] == 0.0));
    checks.push(Check::holds("inv.poly_lr_non_increasing", lrs.windows(2).all(|w| w[1] <= w[0])));

    let gd = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..TrainConfig::default() };
    let mut p = rand_t(&[7], &mut rng);
    let grad = rand_t(&[7], &mut rng);
    let want: Vec<f64> = p.data().iter().zip(grad.data()).map(|(a, g)| a - 0.05 * g).collect();
    p.set_grad(grad.into_data()).expect("grad length");
    let mut params = vec![("p".to_string(), &mut p)];
    let mut state = OptimizerState::new(&params);
    let stepped = sgd_step(&mut params, &mut state, 0.05, &gd).is_ok();
    let bitwise = stepped && p.data().iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits());
    checks.push(Check::holds("inv.sgd_reduces_to_gd_bitwise", bitwise));

    let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]);
    let ok = m.is_ok_and(|m| {
        m.pix_acc().ok() == Some(0.7) && m.mean_iou().is_ok_and(|v| (v - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15)
    });
    checks.push(Check::holds("inv.metrics_hand_case", ok));
    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_injection_fails_the_named_check_only() {
        let checks = grads(Some("grad.sigmoid"));
        for c in &checks {
            assert_eq!(c.passed(), c.name != "grad.sigmoid (rel, 5 seeds)", "{c}");
        }
    }

    #[test]
    fn display_format() {
        let c = Check::below("x", 1e-12, 1e-10);
        assert_eq!(c.to_string(), "PASS x 1.000e-12 <1e-10");
        assert!(!Check::above("y", 0.0, 1e-3).passed());
    }
}
