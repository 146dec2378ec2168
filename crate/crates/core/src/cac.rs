//! Context-adaptive convolution: kernels predicted from the whole feature map,
//! turned into spatially-varying channel weights by multi-dilation depth-wise
//! convolution.
//!
//! For a feature map `X` with `n = h·w` positions the module computes
//!
//! ```text
//! Q = Wq·X  (s² × n)      K = Wk·X  (c × n)
//! D̄ = Q·Kᵀ  (s² × c)      D = γ ⊙ standardize(D̄) + β
//! W = mean_d σ(depthwise(X, D, dilation d))
//! X* = X ⊙ W
//! ```

use crate::error::{dim_err, CacError, Result};
use crate::ops::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::rng::SplitMix64;
use crate::tensor::{PaddingMode, Tensor};

/// How predicted kernels are formed for a batch with more than one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelBatching {
    /// Each item gets the kernels predicted from its own context.
    #[default]
    PerSample,
    /// `D̄` is averaged over the batch and one normalized kernel stack is shared.
    BatchMean,
}

impl KernelBatching {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelBatching::PerSample => "per_sample",
            KernelBatching::BatchMean => "batch_mean",
        }
    }
}

impl std::str::FromStr for KernelBatching {
    type Err = CacError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_sample" => Ok(Self::PerSample),
            "batch_mean" => Ok(Self::BatchMean),
            other => Err(CacError::Config(format!("unknown kernel batching `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CacConfig {
    pub channels: usize,
    pub kernel_size: usize,
    /// Strictly increasing dilation rates sharing one predicted kernel stack.
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub padding: PaddingMode,
    pub projection_bias: bool,
    pub kernel_batching: KernelBatching,
    pub norm_eps: f64,
}

impl CacConfig {
    /// Two heads of 3×3 kernels at dilations {1, 2, 3}.
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel_size: 3,
            dilations: vec![1, 2, 3],
            heads: 2,
            padding: PaddingMode::Zero,
            projection_bias: false,
            kernel_batching: KernelBatching::default(),
            norm_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.channels == 0 {
            problems.push("channels must be positive".to_string());
        }
        if self.kernel_size % 2 == 0 {
            problems.push(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.dilations.is_empty() {
            problems.push("dilation set must be nonempty".to_string());
        }
        if self.dilations.first() == Some(&0) {
            problems.push("dilations must be positive".to_string());
        }
        if self.dilations.windows(2).any(|p| p[0] >= p[1]) {
            problems.push(format!("dilations {:?} must be strictly increasing", self.dilations));
        }
        if self.heads == 0 {
            problems.push("head count must be at least 1".to_string());
        }
        if !(self.norm_eps > 0.0) {
            problems.push("normalization eps must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CacError::Config(problems.join("; ")))
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }
}

/// Learnable parameters of one CaC module.
#[derive(Debug, Clone, PartialEq)]
pub struct CacParams {
    /// Query projection, `s² × c`.
    pub query: Tensor,
    /// Key projection, `c × c`.
    pub key: Tensor,
    pub query_bias: Option<Tensor>,
    pub key_bias: Option<Tensor>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
}

impl CacParams {
    pub fn init(cfg: &CacConfig, rng: &mut SplitMix64) -> Self {
        let c = cfg.channels;
        let taps = cfg.taps();
        let a = 1.0 / (c as f64).sqrt();
        let query = Tensor::from_fn(&[taps, c], |_| rng.uniform(-a, a));
        let key = Tensor::from_fn(&[c, c], |_| rng.uniform(-a, a));
        let (query_bias, key_bias) = if cfg.projection_bias {
            (Some(Tensor::zeros(&[taps])), Some(Tensor::zeros(&[c])))
        } else {
            (None, None)
        };
        Self {
            query,
            key,
            query_bias,
            key_bias,
            norm_gamma: Tensor::full(&[c], 1.0),
            norm_beta: Tensor::zeros(&[c]),
        }
    }

    /// Entries of the two projections (including biases when enabled).
    pub fn projection_param_count(&self) -> usize {
        self.query.len()
            + self.key.len()
            + self.query_bias.as_ref().map_or(0, Tensor::len)
            + self.key_bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn param_count(&self) -> usize {
        self.projection_param_count() + self.norm_gamma.len() + self.norm_beta.len()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("query".to_string(), &self.query), ("key".to_string(), &self.key)];
        if let Some(b) = &self.query_bias {
            v.push(("query_bias".into(), b));
        }
        if let Some(b) = &self.key_bias {
            v.push(("key_bias".into(), b));
        }
        v.push(("norm_gamma".into(), &self.norm_gamma));
        v.push(("norm_beta".into(), &self.norm_beta));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.query, &mut self.key];
        if let Some(b) = &mut self.query_bias {
            v.push(b);
        }
        if let Some(b) = &mut self.key_bias {
            v.push(b);
        }
        v.push(&mut self.norm_gamma);
        v.push(&mut self.norm_beta);
        v
    }

    fn check(&self, cfg: &CacConfig) -> Result<()> {
        let (c, taps) = (cfg.channels, cfg.taps());
        if self.query.shape() != [taps, c] {
            return dim_err("CacParams.query", self.query.shape(), &[taps, c]);
        }
        if self.key.shape() != [c, c] {
            return dim_err("CacParams.key", self.key.shape(), &[c, c]);
        }
        if self.norm_gamma.len() != c || self.norm_beta.len() != c {
            return dim_err("CacParams.norm", self.norm_gamma.shape(), &[c]);
        }
        Ok(())
    }
}

/// Gradients for [`CacParams`], in [`CacParams::named_params`] order.
pub type ParamGrads = Vec<Tensor>;

/// Predicted kernel stack: `[s, s, c]` when shared, `[n_b, s, s, c]` per item.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedKernels {
    pub kernels: Tensor,
    pub kernel_size: usize,
    pub channels: usize,
}

impl PredictedKernels {
    pub fn new(kernels: Tensor) -> Result<Self> {
        let (s, c) = match *kernels.shape() {
            [s1, s2, c] | [_, s1, s2, c] if s1 == s2 => (s1, c),
            _ => return dim_err("PredictedKernels", kernels.shape(), &[0, 0, 0]),
        };
        Ok(Self {
            kernels,
            kernel_size: s,
            channels: c,
        })
    }

    /// Kernel stack of batch item `b` as an `s²×c` row-major slice.
    pub fn item(&self, b: usize) -> &[f64] {
        let size = self.kernel_size * self.kernel_size * self.channels;
        if self.kernels.rank() == 3 {
            self.kernels.data()
        } else {
            &self.kernels.data()[b * size..(b + 1) * size]
        }
    }
}

/// Intermediates of kernel prediction, kept for inspection and backward.
#[derive(Debug, Clone)]
pub struct KernelPredictionTrace {
    /// `n_b × s² × h × w`
    pub query: Tensor,
    /// `n_b × c × h × w`
    pub key: Tensor,
    /// `D̄` per item, `n_b × s² × c`.
    pub raw: Tensor,
    norm: NormCache,
}

#[derive(Debug, Clone)]
struct NormCache {
    /// standardized values, same layout as the normalized output
    x_hat: Vec<f64>,
    /// 1/√(var+eps) per (group, channel)
    inv_std: Vec<f64>,
    groups: usize,
}

fn normalize_forward(raw: &[f64], groups: usize, taps: usize, c: usize, gamma: &[f64], beta: &[f64], eps: f64) -> (Vec<f64>, NormCache) {
    let mut out = vec![0.0; raw.len()];
    let mut x_hat = vec![0.0; raw.len()];
    let mut inv_std = vec![0.0; groups * c];
    let m = taps as f64;
    for g in 0..groups {
        let base = g * taps * c;
        for j in 0..c {
            let mean = (0..taps).map(|i| raw[base + i * c + j]).sum::<f64>() / m;
            let var = (0..taps)
                .map(|i| {
                    let d = raw[base + i * c + j] - mean;
                    d * d
                })
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[g * c + j] = is;
            for i in 0..taps {
                let idx = base + i * c + j;
                let xh = (raw[idx] - mean) * is;
                x_hat[idx] = xh;
                out[idx] = gamma[j] * xh + beta[j];
            }
        }
    }
    (out, NormCache { x_hat, inv_std, groups })
}

/// Returns `(d raw, d gamma, d beta)`.
fn normalize_backward(cache: &NormCache, taps: usize, c: usize, gamma: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut graw = vec![0.0; grad.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    let m = taps as f64;
    for g in 0..cache.groups {
        let base = g * taps * c;
        for j in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..taps {
                let idx = base + i * c + j;
                ggamma[j] += grad[idx] * cache.x_hat[idx];
                gbeta[j] += grad[idx];
                let gxh = grad[idx] * gamma[j];
                sum_g += gxh;
                sum_gx += gxh * cache.x_hat[idx];
            }
            let is = cache.inv_std[g * c + j];
            for i in 0..taps {
                let idx = base + i * c + j;
                let gxh = grad[idx] * gamma[j];
                graw[idx] = is / m * (m * gxh - sum_g - cache.x_hat[idx] * sum_gx);
            }
        }
    }
    (graw, ggamma, gbeta)
}

/// Per-channel standardization of raw kernels over their `s²` positions
/// followed by the affine `gamma·x̂ + beta`.
///
/// `raw` is `[s, s, c]`, `[s², c]` or batched `[n_b, s, s, c]`; batched input
/// is standardized per item. The output has `raw`'s shape.
pub fn normalize_kernels(raw: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (groups, taps, c) = match *raw.shape() {
        [s1, s2, c] => (1, s1 * s2, c),
        [taps, c] => (1, taps, c),
        [nb, s1, s2, c] => (nb, s1 * s2, c),
        _ => return dim_err("normalize_kernels", raw.shape(), &[0, 0, 0]),
    };
    if gamma.len() != c || beta.len() != c {
        return dim_err("normalize_kernels", gamma.shape(), &[c]);
    }
    if !(eps > 0.0) {
        return Err(CacError::Config("normalization eps must be positive".into()));
    }
    let (out, _) = normalize_forward(raw.data(), groups, taps, c, gamma.data(), beta.data(), eps);
    Tensor::new(raw.shape(), out)
}

/// Predicts the context-adaptive kernels of `x`.
pub fn predict_cac_kernels(x: &Tensor, params: &CacParams, cfg: &CacConfig) -> Result<(PredictedKernels, KernelPredictionTrace)> {
    let (nb, c, h, w) = x.dims4()?;
    if c != cfg.channels {
        return Err(CacError::Config(format!(
            "input has {c} channels, CaC module configured for {}",
            cfg.channels
        )));
    }
    params.check(cfg)?;
    let query = ops::conv2d_pointwise(x, &params.query, params.query_bias.as_ref())?;
    let key = ops::conv2d_pointwise(x, &params.key, params.key_bias.as_ref())?;
    let (taps, n, s) = (cfg.taps(), h * w, cfg.kernel_size);
    let mut raw = vec![0.0; nb * taps * c];
    for b in 0..nb {
        gemm_nt(
            &query.data()[b * taps * n..(b + 1) * taps * n],
            &key.data()[b * c * n..(b + 1) * c * n],
            taps,
            n,
            c,
            &mut raw[b * taps * c..(b + 1) * taps * c],
        );
    }
    let (kernel_data, shape, norm) = match cfg.kernel_batching {
        KernelBatching::PerSample => {
            let (d, cache) = normalize_forward(&raw, nb, taps, c, params.norm_gamma.data(), params.norm_beta.data(), cfg.norm_eps);
            (d, vec![nb, s, s, c], cache)
        }
        KernelBatching::BatchMean => {
            let mut mean = vec![0.0; taps * c];
            for item in raw.chunks(taps * c) {
                for (m, v) in mean.iter_mut().zip(item) {
                    *m += v;
                }
            }
            let inv = 1.0 / nb as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
            let (d, cache) = normalize_forward(&mean, 1, taps, c, params.norm_gamma.data(), params.norm_beta.data(), cfg.norm_eps);
            (d, vec![s, s, c], cache)
        }
    };
    let kernels = PredictedKernels::new(Tensor::new(&shape, kernel_data)?)?;
    let trace = KernelPredictionTrace {
        query,
        key,
        raw: Tensor::new(&[nb, taps, c], raw)?,
        norm,
    };
    Ok((kernels, trace))
}

/// Backward of [`predict_cac_kernels`]: `(dX, param grads)`.
fn predict_backward(x: &Tensor, params: &CacParams, cfg: &CacConfig, trace: &KernelPredictionTrace, grad_kernels: &Tensor) -> Result<(Tensor, ParamGrads)> {
    let (nb, c, h, w) = x.dims4()?;
    let (taps, n) = (cfg.taps(), h * w);
    let (graw_norm, ggamma, gbeta) = normalize_backward(&trace.norm, taps, c, params.norm_gamma.data(), grad_kernels.data());
    let graw: Vec<f64> = match cfg.kernel_batching {
        KernelBatching::PerSample => graw_norm,
        KernelBatching::BatchMean => {
            let inv = 1.0 / nb as f64;
            let shared: Vec<f64> = graw_norm.iter().map(|g| g * inv).collect();
            shared.iter().cycle().take(nb * taps * c).copied().collect()
        }
    };
    let mut gq = vec![0.0; nb * taps * n];
    let mut gk = vec![0.0; nb * c * n];
    for b in 0..nb {
        let gd = &graw[b * taps * c..(b + 1) * taps * c];
        gemm_nn(gd, &trace.key.data()[b * c * n..(b + 1) * c * n], taps, c, n, &mut gq[b * taps * n..(b + 1) * taps * n]);
        gemm_tn(gd, &trace.query.data()[b * taps * n..(b + 1) * taps * n], c, taps, n, &mut gk[b * c * n..(b + 1) * c * n]);
    }
    let gq = Tensor::new(&[nb, taps, h, w], gq)?;
    let gk = Tensor::new(&[nb, c, h, w], gk)?;
    let (gx_q, gwq, gbq) = ops::conv2d_pointwise_backward(x, &params.query, params.query_bias.is_some(), &gq)?;
    let (gx_k, gwk, gbk) = ops::conv2d_pointwise_backward(x, &params.key, params.key_bias.is_some(), &gk)?;
    let mut grads = vec![gwq, gwk];
    grads.extend(gbq);
    grads.extend(gbk);
    grads.push(Tensor::new(&[c], ggamma)?);
    grads.push(Tensor::new(&[c], gbeta)?);
    Ok((gx_q.add(&gx_k)?, grads))
}

/// Spatially-varying weights with every entry in (0, 1), plus the per-dilation
/// branches they average.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub weights: Tensor,
    pub branches: Vec<Tensor>,
}

/// `W = (1/|dilations|) Σ_d σ(depthwise(X, D, d))`.
pub fn generate_weight_map(x: &Tensor, kernels: &PredictedKernels, dilations: &[usize], pad: PaddingMode) -> Result<WeightMap> {
    if dilations.is_empty() {
        return Err(CacError::Config("dilation set must be nonempty".into()));
    }
    let mut branches = Vec::with_capacity(dilations.len());
    for &d in dilations {
        branches.push(ops::sigmoid(&ops::conv2d_depthwise_dilated(x, &kernels.kernels, d, pad)?));
    }
    let inv = 1.0 / dilations.len() as f64;
    let mut acc = vec![0.0; x.len()];
    for br in &branches {
        for (a, v) in acc.iter_mut().zip(br.data()) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(WeightMap {
        weights: Tensor::new(x.shape(), acc)?,
        branches,
    })
}

/// `X ⊙ W`.
pub fn reweight(x: &Tensor, weights: &WeightMap) -> Result<Tensor> {
    x.mul(&weights.weights)
}

/// Backward of `reweight(x, generate_weight_map(x, kernels))` with respect
/// to both `x` and the kernels: `(dX, dKernels)`.
pub fn reweight_backward(x: &Tensor, kernels: &PredictedKernels, wm: &WeightMap, dilations: &[usize], pad: PaddingMode, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut gx = grad_out.mul(&wm.weights)?;
    let gw = grad_out.mul(x)?;
    let inv = 1.0 / dilations.len() as f64;
    let mut gk = vec![0.0; kernels.kernels.len()];
    for (&d, br) in dilations.iter().zip(&wm.branches) {
        let gy = ops::sigmoid_backward(br, &gw.scale(inv))?;
        let (gxd, gkd) = ops::conv2d_depthwise_dilated_backward(x, &kernels.kernels, d, pad, &gy)?;
        gx = gx.add(&gxd)?;
        for (a, v) in gk.iter_mut().zip(gkd.data()) {
            *a += v;
        }
    }
    Ok((gx, Tensor::new(kernels.kernels.shape(), gk)?))
}

/// Everything the CaC backward pass needs from a forward evaluation.
#[derive(Debug, Clone)]
pub struct CacCache {
    pub kernels: PredictedKernels,
    pub trace: KernelPredictionTrace,
    pub weights: WeightMap,
}

/// Full CaC module: predict kernels, generate the weight map, re-weight.
pub fn cac_forward(x: &Tensor, params: &CacParams, cfg: &CacConfig) -> Result<Tensor> {
    cac_forward_cached(x, params, cfg).map(|(out, _)| out)
}

pub fn cac_forward_cached(x: &Tensor, params: &CacParams, cfg: &CacConfig) -> Result<(Tensor, CacCache)> {
    let (kernels, trace) = predict_cac_kernels(x, params, cfg)?;
    let weights = generate_weight_map(x, &kernels, &cfg.dilations, cfg.padding)?;
    let out = reweight(x, &weights)?;
    Ok((out, CacCache { kernels, trace, weights }))
}

/// Backward of [`cac_forward`]: `(dX, param grads in named_params order)`.
pub fn cac_backward(x: &Tensor, params: &CacParams, cfg: &CacConfig, cache: &CacCache, grad_out: &Tensor) -> Result<(Tensor, ParamGrads)> {
    let (gx, gk) = reweight_backward(x, &cache.kernels, &cache.weights, &cfg.dilations, cfg.padding, grad_out)?;
    let (gx_pred, grads) = predict_backward(x, params, cfg, &cache.trace, &gk)?;
    Ok((gx.add(&gx_pred)?, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
    }

    #[test]
    fn config_validation_lists_problems() {
        let mut cfg = CacConfig::new(4);
        cfg.kernel_size = 4;
        cfg.dilations = vec![2, 1];
        cfg.heads = 0;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("odd") && err.contains("increasing") && err.contains("head"), "{err}");
    }

    #[test]
    fn constant_input_gives_rank_one_raw_kernels() {
        let cfg = CacConfig::new(3);
        let params = CacParams::init(&cfg, &mut SplitMix64::new(1));
        let vals = [0.4, -0.2, 0.9];
        let x = Tensor::from_fn(&[1, 3, 4, 5], |i| vals[i / 20]);
        let (_, trace) = predict_cac_kernels(&x, &params, &cfg).unwrap();
        let q: Vec<f64> = (0..9).map(|i| (0..3).map(|t| params.query.data()[i * 3 + t] * vals[t]).sum()).collect();
        let k: Vec<f64> = (0..3).map(|j| (0..3).map(|t| params.key.data()[j * 3 + t] * vals[t]).sum()).collect();
        for i in 0..9 {
            for j in 0..3 {
                let expect = 20.0 * q[i] * k[j];
                let got = trace.raw.data()[i * 3 + j];
                assert!((got - expect).abs() < 1e-12 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalize_constant_channel_gives_beta() {
        let raw = Tensor::full(&[3, 3, 2], 4.2);
        let gamma = Tensor::new(&[2], vec![2.0, -1.0]).unwrap();
        let beta = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let d = normalize_kernels(&raw, &gamma, &beta, 1e-5).unwrap();
        for (i, v) in d.data().iter().enumerate() {
            assert_eq!(*v, beta.data()[i % 2]);
        }
    }

    #[test]
    fn normalize_fixed_point() {
        // zero mean, unit population variance over 9 taps
        let base = [-1.5, -1.0, -0.5, 0.0, 0.0, 0.0, 0.5, 1.0, 1.5];
        let var: f64 = base.iter().map(|v| v * v).sum::<f64>() / 9.0;
        let raw = Tensor::new(&[3, 3, 1], base.iter().map(|v| v / var.sqrt()).collect()).unwrap();
        let d = normalize_kernels(&raw, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-5).unwrap();
        for (a, b) in d.data().iter().zip(raw.data()) {
            assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn zero_kernel_gives_half_weights() {
        let x = rand_tensor(&[2, 3, 4, 4], 3);
        let k = PredictedKernels::new(Tensor::zeros(&[3, 3, 3])).unwrap();
        let wm = generate_weight_map(&x, &k, &[1, 2, 3], PaddingMode::Zero).unwrap();
        assert!(wm.weights.data().iter().all(|&v| v == 0.5));
        let out = reweight(&x, &wm).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert_eq!(*o, v / 2.0);
        }
    }

    #[test]
    fn singleton_dilation_is_single_branch() {
        let x = rand_tensor(&[1, 2, 5, 5], 4);
        let k = PredictedKernels::new(rand_tensor(&[3, 3, 2], 5)).unwrap();
        let wm = generate_weight_map(&x, &k, &[1], PaddingMode::Zero).unwrap();
        let direct = ops::sigmoid(&ops::conv2d_depthwise_dilated(&x, &k.kernels, 1, PaddingMode::Zero).unwrap());
        assert_eq!(wm.weights, direct);
    }

    #[test]
    fn batch_mean_shares_kernels() {
        let mut cfg = CacConfig::new(4);
        cfg.kernel_batching = KernelBatching::BatchMean;
        let params = CacParams::init(&cfg, &mut SplitMix64::new(2));
        let x = rand_tensor(&[3, 4, 5, 5], 6);
        let (k, _) = predict_cac_kernels(&x, &params, &cfg).unwrap();
        assert_eq!(k.kernels.shape(), &[3, 3, 4]);
        cfg.kernel_batching = KernelBatching::PerSample;
        let (k, _) = predict_cac_kernels(&x, &params, &cfg).unwrap();
        assert_eq!(k.kernels.shape(), &[3, 3, 3, 4]);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let cfg = CacConfig::new(4);
        let params = CacParams::init(&cfg, &mut SplitMix64::new(2));
        let x = rand_tensor(&[1, 3, 5, 5], 6);
        assert!(matches!(cac_forward(&x, &params, &cfg), Err(CacError::Config(_))));
    }
}
