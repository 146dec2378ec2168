//! Drop-in alternatives to the CaC module: input-invariant kernels, kernels
//! from pooled features, kernels from a depth-wise FC layer, and
//! squeeze-excitation (one weighting vector for every position).

use crate::cac::{generate_weight_map, reweight, reweight_backward, PredictedKernels, WeightMap};
use crate::error::{dim_err, CacError, Result};
use crate::ops::{self, gemm_nn, gemm_nt, gemm_tn};
use crate::rng::SplitMix64;
use crate::tensor::{PaddingMode, Tensor};

/// Learned kernels shared by every input.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedKernelParams {
    /// `[s, s, c]`
    pub kernels: Tensor,
}

impl FixedKernelParams {
    pub fn init(channels: usize, kernel_size: usize, rng: &mut SplitMix64) -> Self {
        let a = 1.0 / kernel_size as f64;
        Self {
            kernels: Tensor::from_fn(&[kernel_size, kernel_size, channels], |_| rng.uniform(-a, a)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len()
    }
}

pub struct KernelCache {
    pub kernels: PredictedKernels,
    pub weights: WeightMap,
}

pub fn fixed_kernel_forward(x: &Tensor, params: &FixedKernelParams, dilations: &[usize], pad: PaddingMode) -> Result<Tensor> {
    fixed_kernel_forward_cached(x, params, dilations, pad).map(|(o, _)| o)
}

pub fn fixed_kernel_forward_cached(x: &Tensor, params: &FixedKernelParams, dilations: &[usize], pad: PaddingMode) -> Result<(Tensor, KernelCache)> {
    let kernels = PredictedKernels::new(params.kernels.clone())?;
    let weights = generate_weight_map(x, &kernels, dilations, pad)?;
    Ok((reweight(x, &weights)?, KernelCache { kernels, weights }))
}

pub fn fixed_kernel_backward(x: &Tensor, dilations: &[usize], pad: PaddingMode, cache: &KernelCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (gx, gk) = reweight_backward(x, &cache.kernels, &cache.weights, dilations, pad, grad_out)?;
    Ok((gx, vec![gk]))
}

/// Kernels predicted from the globally pooled feature vector by one FC layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GapKernelParams {
    /// `c × (s²·c)`
    pub fc: Tensor,
    pub kernel_size: usize,
}

impl GapKernelParams {
    pub fn init(channels: usize, kernel_size: usize, rng: &mut SplitMix64) -> Self {
        let a = 1.0 / (channels as f64).sqrt();
        Self {
            fc: Tensor::from_fn(&[channels, kernel_size * kernel_size * channels], |_| rng.uniform(-a, a)),
            kernel_size,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc.len()
    }
}

/// `D_b = reshape(g_bᵀ F)` with `g_b` the pooled features of item `b`.
pub fn gap_kernels(x: &Tensor, params: &GapKernelParams) -> Result<PredictedKernels> {
    let (nb, c, _, _) = x.dims4()?;
    let s = params.kernel_size;
    if params.fc.shape() != [c, s * s * c] {
        return dim_err("gap_kernel_forward", x.shape(), params.fc.shape());
    }
    let pooled = ops::global_avg_pool(x)?;
    let mut k = vec![0.0; nb * s * s * c];
    gemm_nn(pooled.data(), params.fc.data(), nb, c, s * s * c, &mut k);
    PredictedKernels::new(Tensor::new(&[nb, s, s, c], k)?)
}

pub fn gap_kernel_forward(x: &Tensor, params: &GapKernelParams, dilations: &[usize], pad: PaddingMode) -> Result<Tensor> {
    gap_kernel_forward_cached(x, params, dilations, pad).map(|(o, _)| o)
}

pub fn gap_kernel_forward_cached(x: &Tensor, params: &GapKernelParams, dilations: &[usize], pad: PaddingMode) -> Result<(Tensor, KernelCache)> {
    let kernels = gap_kernels(x, params)?;
    let weights = generate_weight_map(x, &kernels, dilations, pad)?;
    Ok((reweight(x, &weights)?, KernelCache { kernels, weights }))
}

pub fn gap_kernel_backward(x: &Tensor, params: &GapKernelParams, dilations: &[usize], pad: PaddingMode, cache: &KernelCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (nb, c, _, _) = x.dims4()?;
    let out_dim = params.fc.shape()[1];
    let (gx, gk) = reweight_backward(x, &cache.kernels, &cache.weights, dilations, pad, grad_out)?;
    let pooled = ops::global_avg_pool(x)?;
    let mut gfc = vec![0.0; c * out_dim];
    gemm_tn(pooled.data(), gk.data(), c, nb, out_dim, &mut gfc);
    let mut gpooled = vec![0.0; nb * c];
    gemm_nt(gk.data(), params.fc.data(), nb, out_dim, c, &mut gpooled);
    let gx_pool = ops::global_avg_pool_backward(x.shape(), &Tensor::new(&[nb, c], gpooled)?)?;
    Ok((gx.add(&gx_pool)?, vec![Tensor::new(params.fc.shape(), gfc)?]))
}

/// Depth-wise FC kernel predictor bound to one spatial size:
/// `D_b(t, j) = Σ_p P(p, t, j) · X_b(j, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DwFcKernelParams {
    /// `[h, w, s², c]`
    pub weights: Tensor,
}

impl DwFcKernelParams {
    pub fn init(channels: usize, kernel_size: usize, height: usize, width: usize, rng: &mut SplitMix64) -> Self {
        let a = 1.0 / ((height * width) as f64).sqrt();
        Self {
            weights: Tensor::from_fn(&[height, width, kernel_size * kernel_size, channels], |_| rng.uniform(-a, a)),
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dims4()?;
        let [ph, pw, taps, pc] = *self.weights.shape() else {
            return dim_err("DwFcKernelParams", self.weights.shape(), &[0, 0, 0, 0]);
        };
        if (ph, pw) != (h, w) {
            return Err(CacError::Config(format!(
                "depth-wise FC kernels were built for {ph}×{pw} inputs, got {h}×{w}"
            )));
        }
        if pc != c {
            return dim_err("dwfc_kernel_forward", x.shape(), self.weights.shape());
        }
        let s = (taps as f64).sqrt().round() as usize;
        if s * s != taps {
            return dim_err("DwFcKernelParams", self.weights.shape(), &[ph, pw, s * s, pc]);
        }
        Ok((s, taps))
    }
}

pub fn dwfc_kernels(x: &Tensor, params: &DwFcKernelParams) -> Result<PredictedKernels> {
    let (s, taps) = params.geometry(x)?;
    let (nb, c, h, w) = x.dims4()?;
    let n = h * w;
    let p = params.weights.data();
    let mut k = vec![0.0; nb * taps * c];
    for b in 0..nb {
        let xb = &x.data()[b * c * n..(b + 1) * c * n];
        let kb = &mut k[b * taps * c..(b + 1) * taps * c];
        for pos in 0..n {
            let prow = &p[pos * taps * c..(pos + 1) * taps * c];
            for t in 0..taps {
                for j in 0..c {
                    kb[t * c + j] += prow[t * c + j] * xb[j * n + pos];
                }
            }
        }
    }
    PredictedKernels::new(Tensor::new(&[nb, s, s, c], k)?)
}

pub fn dwfc_kernel_forward(x: &Tensor, params: &DwFcKernelParams, dilations: &[usize], pad: PaddingMode) -> Result<Tensor> {
    dwfc_kernel_forward_cached(x, params, dilations, pad).map(|(o, _)| o)
}

pub fn dwfc_kernel_forward_cached(x: &Tensor, params: &DwFcKernelParams, dilations: &[usize], pad: PaddingMode) -> Result<(Tensor, KernelCache)> {
    let kernels = dwfc_kernels(x, params)?;
    let weights = generate_weight_map(x, &kernels, dilations, pad)?;
    Ok((reweight(x, &weights)?, KernelCache { kernels, weights }))
}

pub fn dwfc_kernel_backward(x: &Tensor, params: &DwFcKernelParams, dilations: &[usize], pad: PaddingMode, cache: &KernelCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (_, taps) = params.geometry(x)?;
    let (nb, c, h, w) = x.dims4()?;
    let n = h * w;
    let (mut gx, gk) = reweight_backward(x, &cache.kernels, &cache.weights, dilations, pad, grad_out)?;
    let p = params.weights.data();
    let mut gp = vec![0.0; p.len()];
    let gxd = gx.data_mut();
    for b in 0..nb {
        let xb = &x.data()[b * c * n..(b + 1) * c * n];
        let gkb = &gk.data()[b * taps * c..(b + 1) * taps * c];
        for pos in 0..n {
            let base = pos * taps * c;
            for t in 0..taps {
                for j in 0..c {
                    gp[base + t * c + j] += gkb[t * c + j] * xb[j * n + pos];
                    gxd[b * c * n + j * n + pos] += gkb[t * c + j] * p[base + t * c + j];
                }
            }
        }
    }
    Ok((gx, vec![Tensor::new(params.weights.shape(), gp)?]))
}

/// Squeeze-excitation: `v = σ(W2·relu(W1·gap(X)))`, `X* = v ⊙ X`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeParams {
    /// `(c/r) × c`
    pub reduce: Tensor,
    /// `c × (c/r)`
    pub expand: Tensor,
    pub reduction: usize,
}

impl SeParams {
    pub fn init(channels: usize, reduction: usize, rng: &mut SplitMix64) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(CacError::Config(format!(
                "SE reduction {reduction} must divide channel count {channels}"
            )));
        }
        let mid = channels / reduction;
        let a1 = 1.0 / (channels as f64).sqrt();
        let a2 = 1.0 / (mid as f64).sqrt();
        Ok(Self {
            reduce: Tensor::from_fn(&[mid, channels], |_| rng.uniform(-a1, a1)),
            expand: Tensor::from_fn(&[channels, mid], |_| rng.uniform(-a2, a2)),
            reduction,
        })
    }

    pub fn param_count(&self) -> usize {
        self.reduce.len() + self.expand.len()
    }
}

pub struct SeCache {
    pooled: Tensor,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    /// per-(item, channel) gate, `n_b × c`
    pub gate: Tensor,
}

/// The gate vector `v` of shape `n_b × c`.
pub fn se_gate(x: &Tensor, params: &SeParams) -> Result<Tensor> {
    se_gate_cached(x, params).map(|c| c.gate)
}

fn se_gate_cached(x: &Tensor, params: &SeParams) -> Result<SeCache> {
    let (nb, c, _, _) = x.dims4()?;
    if params.reduction == 0 || c % params.reduction != 0 {
        return Err(CacError::Config(format!(
            "SE reduction {} must divide channel count {c}",
            params.reduction
        )));
    }
    let mid = c / params.reduction;
    if params.reduce.shape() != [mid, c] || params.expand.shape() != [c, mid] {
        return dim_err("se_forward", params.reduce.shape(), &[mid, c]);
    }
    let pooled = ops::global_avg_pool(x)?;
    let mut hidden_pre = vec![0.0; nb * mid];
    gemm_nt(pooled.data(), params.reduce.data(), nb, c, mid, &mut hidden_pre);
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let mut pre = vec![0.0; nb * c];
    gemm_nt(&hidden, params.expand.data(), nb, mid, c, &mut pre);
    let gate = Tensor::new(&[nb, c], pre.into_iter().map(ops::sigmoid_scalar).collect())?;
    Ok(SeCache { pooled, hidden_pre, hidden, gate })
}

pub fn se_forward(x: &Tensor, params: &SeParams) -> Result<Tensor> {
    se_forward_cached(x, params).map(|(o, _)| o)
}

pub fn se_forward_cached(x: &Tensor, params: &SeParams) -> Result<(Tensor, SeCache)> {
    let cache = se_gate_cached(x, params)?;
    let (_, _, h, w) = x.dims4()?;
    let out = x.mul(&ops::broadcast_spatial(&cache.gate, h, w)?)?;
    Ok((out, cache))
}

pub fn se_backward(x: &Tensor, params: &SeParams, cache: &SeCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let (nb, c, h, w) = x.dims4()?;
    let mid = c / params.reduction;
    let gate_map = ops::broadcast_spatial(&cache.gate, h, w)?;
    let mut gx = grad_out.mul(&gate_map)?;
    let ggate = ops::broadcast_spatial_backward(&grad_out.mul(x)?)?;
    let gpre: Vec<f64> = ggate
        .data()
        .iter()
        .zip(cache.gate.data())
        .map(|(g, v)| g * v * (1.0 - v))
        .collect();
    let mut gexpand = vec![0.0; c * mid];
    gemm_tn(&gpre, &cache.hidden, c, nb, mid, &mut gexpand);
    let mut ghidden = vec![0.0; nb * mid];
    gemm_nn(&gpre, params.expand.data(), nb, c, mid, &mut ghidden);
    for (g, &z) in ghidden.iter_mut().zip(&cache.hidden_pre) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let mut greduce = vec![0.0; mid * c];
    gemm_tn(&ghidden, cache.pooled.data(), mid, nb, c, &mut greduce);
    let mut gpooled = vec![0.0; nb * c];
    gemm_nn(&ghidden, params.reduce.data(), nb, mid, c, &mut gpooled);
    let gx_pool = ops::global_avg_pool_backward(x.shape(), &Tensor::new(&[nb, c], gpooled)?)?;
    gx = gx.add(&gx_pool)?;
    Ok((gx, vec![Tensor::new(&[mid, c], greduce)?, Tensor::new(&[c, mid], gexpand)?]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = SplitMix64::new(seed);
        Tensor::from_fn(shape, |_| r.uniform(-1.0, 1.0))
    }

    #[test]
    fn fixed_zero_kernel_halves() {
        let x = rand_tensor(&[1, 3, 4, 4], 1);
        let p = FixedKernelParams { kernels: Tensor::zeros(&[3, 3, 3]) };
        let out = fixed_kernel_forward(&x, &p, &[1, 2], PaddingMode::Zero).unwrap();
        assert_eq!(out, x.scale(0.5));
    }

    #[test]
    fn se_zero_weights_halves() {
        let x = rand_tensor(&[2, 8, 3, 3], 2);
        let p = SeParams {
            reduce: Tensor::zeros(&[2, 8]),
            expand: Tensor::zeros(&[8, 2]),
            reduction: 4,
        };
        assert_eq!(se_forward(&x, &p).unwrap(), x.scale(0.5));
    }

    #[test]
    fn se_rejects_indivisible_channels() {
        assert!(matches!(SeParams::init(6, 4, &mut SplitMix64::new(0)), Err(CacError::Config(_))));
    }

    #[test]
    fn dwfc_refuses_other_sizes() {
        let p = DwFcKernelParams::init(2, 3, 4, 4, &mut SplitMix64::new(0));
        let x = rand_tensor(&[1, 2, 5, 4], 3);
        assert!(matches!(dwfc_kernel_forward(&x, &p, &[1], PaddingMode::Zero), Err(CacError::Config(_))));
    }

    #[test]
    fn dwfc_zero_weights_halve() {
        let p = DwFcKernelParams { weights: Tensor::zeros(&[4, 4, 9, 2]) };
        let x = rand_tensor(&[1, 2, 4, 4], 3);
        assert_eq!(dwfc_kernel_forward(&x, &p, &[1, 2], PaddingMode::Zero).unwrap(), x.scale(0.5));
    }

    #[test]
    fn dwfc_delta_weights_copy_position_features() {
        // all weight on position (1, 2) with unit scale: D(t, j) = X(j, p)
        let (h, w, c) = (3, 4, 2);
        let mut wts = Tensor::zeros(&[h, w, 9, c]);
        let p = w + 2;
        for t in 0..9 {
            for j in 0..c {
                wts.data_mut()[(p * 9 + t) * c + j] = 1.0;
            }
        }
        let x = rand_tensor(&[1, c, h, w], 9);
        let k = dwfc_kernels(&x, &DwFcKernelParams { weights: wts }).unwrap();
        for t in 0..9 {
            for j in 0..c {
                assert_eq!(k.kernels.data()[t * c + j], x.data()[j * h * w + p]);
            }
        }
    }
}
