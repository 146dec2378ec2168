//! Segmentation head: H re-weighting modules in parallel on the same input,
//! a global pooling branch, channel concatenation and a pointwise classifier.

use crate::baselines::{self, DwFcKernelParams, FixedKernelParams, GapKernelParams, KernelCache, SeCache, SeParams};
use crate::cac::{self, CacCache, CacConfig, CacParams};
use crate::error::{CacError, Result};
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Which module produces the re-weighted feature maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    Cac,
    Fixed,
    Gap,
    DwFc,
    Se,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [HeadKind::Cac, HeadKind::Fixed, HeadKind::Gap, HeadKind::DwFc, HeadKind::Se];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Cac => "cac",
            HeadKind::Fixed => "fixed",
            HeadKind::Gap => "gap",
            HeadKind::DwFc => "dwfc",
            HeadKind::Se => "se",
        }
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = CacError;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CacError::Config(format!("unknown head kind `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Channels, kernel size, dilations, head count and padding are shared by
    /// every kind; the projection options only apply to CaC.
    pub cac: CacConfig,
    pub se_reduction: usize,
    /// Feature-map extent the depth-wise FC baseline is built for.
    pub feature_hw: (usize, usize),
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        self.cac.validate()?;
        if self.num_classes < 2 {
            return Err(CacError::Config("num_classes must be at least 2".into()));
        }
        if self.kind == HeadKind::Se && (self.se_reduction == 0 || self.cac.channels % self.se_reduction != 0) {
            return Err(CacError::Config(format!(
                "SE reduction {} must divide channel count {}",
                self.se_reduction, self.cac.channels
            )));
        }
        Ok(())
    }

    pub fn concat_channels(&self) -> usize {
        (self.cac.heads + 1) * self.cac.channels
    }
}

/// One re-weighting module of a head.
#[derive(Debug, Clone, PartialEq)]
pub enum Reweighter {
    Cac(CacParams),
    Fixed(FixedKernelParams),
    Gap(GapKernelParams),
    DwFc(DwFcKernelParams),
    Se(SeParams),
}

pub enum ReweighterCache {
    Cac(CacCache),
    Kernel(KernelCache),
    Se(SeCache),
}

impl Reweighter {
    pub fn init(cfg: &HeadConfig, rng: &mut SplitMix64) -> Result<Self> {
        let (c, s) = (cfg.cac.channels, cfg.cac.kernel_size);
        Ok(match cfg.kind {
            HeadKind::Cac => Reweighter::Cac(CacParams::init(&cfg.cac, rng)),
            HeadKind::Fixed => Reweighter::Fixed(FixedKernelParams::init(c, s, rng)),
            HeadKind::Gap => Reweighter::Gap(GapKernelParams::init(c, s, rng)),
            HeadKind::DwFc => Reweighter::DwFc(DwFcKernelParams::init(c, s, cfg.feature_hw.0, cfg.feature_hw.1, rng)),
            HeadKind::Se => Reweighter::Se(SeParams::init(c, cfg.se_reduction, rng)?),
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        match self {
            Reweighter::Cac(p) => p.named_params(),
            Reweighter::Fixed(p) => vec![("kernels".into(), &p.kernels)],
            Reweighter::Gap(p) => vec![("fc".into(), &p.fc)],
            Reweighter::DwFc(p) => vec![("weights".into(), &p.weights)],
            Reweighter::Se(p) => vec![("reduce".into(), &p.reduce), ("expand".into(), &p.expand)],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Reweighter::Cac(p) => p.params_mut(),
            Reweighter::Fixed(p) => vec![&mut p.kernels],
            Reweighter::Gap(p) => vec![&mut p.fc],
            Reweighter::DwFc(p) => vec![&mut p.weights],
            Reweighter::Se(p) => vec![&mut p.reduce, &mut p.expand],
        }
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn forward(&self, x: &Tensor, cfg: &CacConfig) -> Result<(Tensor, ReweighterCache)> {
        let (d, pad) = (&cfg.dilations, cfg.padding);
        Ok(match self {
            Reweighter::Cac(p) => {
                let (o, c) = cac::cac_forward_cached(x, p, cfg)?;
                (o, ReweighterCache::Cac(c))
            }
            Reweighter::Fixed(p) => {
                let (o, c) = baselines::fixed_kernel_forward_cached(x, p, d, pad)?;
                (o, ReweighterCache::Kernel(c))
            }
            Reweighter::Gap(p) => {
                let (o, c) = baselines::gap_kernel_forward_cached(x, p, d, pad)?;
                (o, ReweighterCache::Kernel(c))
            }
            Reweighter::DwFc(p) => {
                let (o, c) = baselines::dwfc_kernel_forward_cached(x, p, d, pad)?;
                (o, ReweighterCache::Kernel(c))
            }
            Reweighter::Se(p) => {
                let (o, c) = baselines::se_forward_cached(x, p)?;
                (o, ReweighterCache::Se(c))
            }
        })
    }

    /// `(dX, param grads in named_params order)`.
    pub fn backward(&self, x: &Tensor, cfg: &CacConfig, cache: &ReweighterCache, grad_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (d, pad) = (&cfg.dilations, cfg.padding);
        match (self, cache) {
            (Reweighter::Cac(p), ReweighterCache::Cac(c)) => cac::cac_backward(x, p, cfg, c, grad_out),
            (Reweighter::Fixed(_), ReweighterCache::Kernel(c)) => baselines::fixed_kernel_backward(x, d, pad, c, grad_out),
            (Reweighter::Gap(p), ReweighterCache::Kernel(c)) => baselines::gap_kernel_backward(x, p, d, pad, c, grad_out),
            (Reweighter::DwFc(p), ReweighterCache::Kernel(c)) => baselines::dwfc_kernel_backward(x, p, d, pad, c, grad_out),
            (Reweighter::Se(p), ReweighterCache::Se(c)) => baselines::se_backward(x, p, c, grad_out),
            _ => Err(CacError::Config("cache does not belong to this module".into())),
        }
    }

    /// The per-position weighting factors this module applies to `x`.
    pub fn weight_map(&self, x: &Tensor, cfg: &CacConfig) -> Result<Tensor> {
        let (_, cache) = self.forward(x, cfg)?;
        Ok(match cache {
            ReweighterCache::Cac(c) => c.weights.weights,
            ReweighterCache::Kernel(c) => c.weights.weights,
            ReweighterCache::Se(c) => {
                let (_, _, h, w) = x.dims4()?;
                ops::broadcast_spatial(&c.gate, h, w)?
            }
        })
    }
}

/// Per-channel spatial mean replicated to every position.
pub fn global_pool_branch(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    ops::broadcast_spatial(&ops::global_avg_pool(x)?, h, w)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegHead {
    pub config: HeadConfig,
    pub modules: Vec<Reweighter>,
    /// `K × (H+1)c`
    pub classifier: Tensor,
    pub classifier_bias: Tensor,
}

pub struct HeadCache {
    module_caches: Vec<ReweighterCache>,
    concat: Tensor,
}

impl SegHead {
    pub fn init(config: HeadConfig, rng: &mut SplitMix64) -> Result<Self> {
        config.validate()?;
        let modules = (0..config.cac.heads)
            .map(|_| Reweighter::init(&config, rng))
            .collect::<Result<Vec<_>>>()?;
        let cin = config.concat_channels();
        let a = 1.0 / (cin as f64).sqrt();
        let classifier = Tensor::from_fn(&[config.num_classes, cin], |_| rng.uniform(-a, a));
        let classifier_bias = Tensor::zeros(&[config.num_classes]);
        Ok(Self {
            config,
            modules,
            classifier,
            classifier_bias,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, m) in self.modules.iter().enumerate() {
            for (name, t) in m.named_params() {
                v.push((format!("head.{i}.{name}"), t));
            }
        }
        v.push(("classifier.weight".into(), &self.classifier));
        v.push(("classifier.bias".into(), &self.classifier_bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.modules.iter_mut().flat_map(|m| m.params_mut()).collect();
        v.push(&mut self.classifier);
        v.push(&mut self.classifier_bias);
        v
    }

    /// Parameters of the re-weighting modules only (no classifier).
    pub fn module_param_count(&self) -> usize {
        self.modules.iter().map(Reweighter::param_count).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|(o, _)| o)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, HeadCache)> {
        if self.modules.len() != self.config.cac.heads {
            return Err(CacError::Config(format!(
                "head has {} modules, configured for {}",
                self.modules.len(),
                self.config.cac.heads
            )));
        }
        let mut outs = Vec::with_capacity(self.modules.len() + 1);
        let mut caches = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            let (o, c) = m.forward(x, &self.config.cac)?;
            outs.push(o);
            caches.push(c);
        }
        outs.push(global_pool_branch(x)?);
        let concat = ops::concat_channels(&outs.iter().collect::<Vec<_>>())?;
        if self.classifier.shape().get(1) != Some(&concat.shape()[1]) {
            return Err(CacError::Config(format!(
                "classifier expects {:?} input channels, concatenation has {}",
                self.classifier.shape().get(1),
                concat.shape()[1]
            )));
        }
        let logits = ops::conv2d_pointwise(&concat, &self.classifier, Some(&self.classifier_bias))?;
        Ok((logits, HeadCache { module_caches: caches, concat }))
    }

    /// `(dX, param grads in named_params order)`.
    pub fn backward(&self, x: &Tensor, cache: &HeadCache, grad_logits: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (gconcat, gcls, gbias) = ops::conv2d_pointwise_backward(&cache.concat, &self.classifier, true, grad_logits)?;
        let c = self.config.cac.channels;
        let sizes = vec![c; self.modules.len() + 1];
        let mut parts = ops::split_channels(&gconcat, &sizes)?;
        let gpool = parts.pop().expect("pool branch gradient");
        let mut gx = ops::global_avg_pool_backward(x.shape(), &ops::broadcast_spatial_backward(&gpool)?)?;
        let mut grads = Vec::new();
        for ((m, mc), g) in self.modules.iter().zip(&cache.module_caches).zip(&parts) {
            let (gxm, gm) = m.backward(x, &self.config.cac, mc, g)?;
            gx = gx.add(&gxm)?;
            grads.extend(gm);
        }
        grads.push(gcls);
        grads.push(gbias.expect("classifier bias gradient"));
        Ok((gx, grads))
    }
}

/// Convenience wrapper: logits of `head` on features `x`.
pub fn head_forward(x: &Tensor, head: &SegHead) -> Result<Tensor> {
    head.forward(x)
}
