//! Toy segmentation network: a small convolutional backbone, a re-weighting
//! head on its output, an auxiliary classifier on its penultimate features,
//! and bilinear upsampling back to image resolution.

use crate::error::{CacError, Result};
use crate::head::{HeadCache, SegHead};
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneConfig {
    /// Features are the (3-channel) image itself.
    Identity,
    /// Average-pool the image by `stride`, then `depth` layers of 3×3 conv + ReLU
    /// with `channels` outputs each.
    Shallow { channels: usize, depth: usize, stride: usize },
}

impl BackboneConfig {
    pub fn out_channels(&self, image_channels: usize) -> usize {
        match *self {
            BackboneConfig::Identity => image_channels,
            BackboneConfig::Shallow { channels, depth, .. } if depth > 0 => channels,
            BackboneConfig::Shallow { .. } => image_channels,
        }
    }

    pub fn penultimate_channels(&self, image_channels: usize) -> usize {
        match *self {
            BackboneConfig::Shallow { channels, depth, .. } if depth >= 2 => channels,
            _ => image_channels,
        }
    }

    pub fn stride(&self) -> usize {
        match *self {
            BackboneConfig::Identity => 1,
            BackboneConfig::Shallow { stride, .. } => stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub layers: Vec<ConvLayer>,
}

/// Backbone activations. `stages[0]` is the pooled image, `stages[i]` the
/// output of layer `i`; `pre[i]` holds layer `i`'s pre-activation.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub stages: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl BackboneOutput {
    pub fn features(&self) -> &Tensor {
        self.stages.last().expect("at least one stage")
    }

    pub fn penultimate(&self) -> &Tensor {
        &self.stages[self.stages.len().saturating_sub(2)]
    }

    /// Concatenates per-sample outputs along the batch axis.
    pub fn stack(items: &[&BackboneOutput]) -> Result<BackboneOutput> {
        let first = items.first().ok_or_else(|| CacError::Config("empty batch".into()))?;
        let cat = |pick: &dyn Fn(&BackboneOutput) -> &Vec<Tensor>, i: usize| -> Result<Tensor> {
            let parts: Vec<&Tensor> = items.iter().map(|o| &pick(o)[i]).collect();
            stack_batch(&parts)
        };
        Ok(BackboneOutput {
            stages: (0..first.stages.len()).map(|i| cat(&|o| &o.stages, i)).collect::<Result<_>>()?,
            pre: (0..first.pre.len()).map(|i| cat(&|o| &o.pre, i)).collect::<Result<_>>()?,
        })
    }
}

/// Stacks 4-D tensors with identical `(c, h, w)` along the batch axis.
pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| CacError::Config("empty batch".into()))?;
    let (_, c, h, w) = first.dims4()?;
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.len()).sum());
    let mut nb = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pc, ph, pw) != (c, h, w) {
            return Err(CacError::Dimension {
                op: "stack_batch",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        nb += pn;
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[nb, c, h, w], data)
}

impl Backbone {
    pub fn init(config: BackboneConfig, image_channels: usize, rng: &mut SplitMix64) -> Result<Self> {
        let mut layers = Vec::new();
        if let BackboneConfig::Shallow { channels, depth, stride } = config {
            if channels == 0 || stride == 0 {
                return Err(CacError::Config("shallow backbone needs positive channels and stride".into()));
            }
            let mut cin = image_channels;
            for _ in 0..depth {
                let a = (6.0 / (cin * 9) as f64).sqrt();
                layers.push(ConvLayer {
                    weight: Tensor::from_fn(&[channels, cin, 3, 3], |_| rng.uniform(-a, a)),
                    bias: Tensor::from_fn(&[channels], |_| rng.uniform(-0.5, 0.5)),
                });
                cin = channels;
            }
        }
        Ok(Self { config, layers })
    }

    pub fn forward(&self, images: &Tensor) -> Result<BackboneOutput> {
        let x0 = ops::avg_pool2d(images, self.config.stride())?;
        let mut stages = vec![x0];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let z = ops::conv2d(stages.last().unwrap(), &layer.weight, Some(&layer.bias))?;
            stages.push(ops::relu(&z));
            pre.push(z);
        }
        Ok(BackboneOutput { stages, pre })
    }

    /// Gradients of all layer parameters given gradients flowing into the
    /// final and penultimate stages.
    fn backward(&self, out: &BackboneOutput, grad_features: Tensor, grad_penultimate: Option<Tensor>) -> Result<Vec<Tensor>> {
        let n = self.layers.len();
        let mut grads = vec![Tensor::zeros(&[0]); 2 * n];
        let mut g = grad_features;
        for i in (0..n).rev() {
            let gz = ops::relu_backward(&out.pre[i], &g)?;
            let (gx, gw, gb) = ops::conv2d_backward(&out.stages[i], &self.layers[i].weight, true, &gz)?;
            grads[2 * i] = gw;
            grads[2 * i + 1] = gb.expect("bias gradient");
            g = gx;
            // the input of the last layer is the penultimate stage
            if i == n - 1 {
                if let Some(gp) = &grad_penultimate {
                    g = g.add(gp)?;
                }
            }
        }
        Ok(grads)
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("backbone.{i}.weight"), &l.weight), (format!("backbone.{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub backbone: Backbone,
    pub head: SegHead,
    /// `K × c_penultimate`
    pub aux_classifier: Tensor,
    pub aux_bias: Tensor,
    pub freeze_backbone: bool,
}

/// Loss terms and gradients of the trainable parameters, in
/// [`SegModel::trainable_params_mut`] order.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub grads: Vec<Tensor>,
}

impl SegModel {
    pub fn new(backbone: Backbone, head: SegHead, image_channels: usize, freeze_backbone: bool, rng: &mut SplitMix64) -> Result<Self> {
        let feat_c = backbone.config.out_channels(image_channels);
        if feat_c != head.config.cac.channels {
            return Err(CacError::Config(format!(
                "backbone emits {feat_c} channels, head expects {}",
                head.config.cac.channels
            )));
        }
        let pen = backbone.config.penultimate_channels(image_channels);
        let k = head.config.num_classes;
        let a = 1.0 / (pen as f64).sqrt();
        Ok(Self {
            aux_classifier: Tensor::from_fn(&[k, pen], |_| rng.uniform(-a, a)),
            aux_bias: Tensor::zeros(&[k]),
            backbone,
            head,
            freeze_backbone,
        })
    }

    pub fn stride(&self) -> usize {
        self.backbone.config.stride()
    }

    /// All parameters, including a frozen backbone.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.named_params();
        v.extend(self.head.named_params());
        v.push(("aux.weight".into(), &self.aux_classifier));
        v.push(("aux.bias".into(), &self.aux_bias));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.params_mut();
        v.extend(self.head.params_mut());
        v.push(&mut self.aux_classifier);
        v.push(&mut self.aux_bias);
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        names.into_iter().zip(self.params_mut()).collect()
    }

    fn frozen_count(&self) -> usize {
        if self.freeze_backbone {
            2 * self.backbone.layers.len()
        } else {
            0
        }
    }

    /// Parameters updated by training, with their names.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let skip = self.frozen_count();
        self.named_params_mut().into_iter().skip(skip).collect()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.named_params().iter().skip(self.frozen_count()).map(|(_, t)| t.len()).sum()
    }

    /// Logits at image resolution.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let out = self.backbone.forward(images)?;
        let logits = self.head.forward(out.features())?;
        ops::bilinear_upsample(&logits, self.stride())
    }

    /// Main + `aux_weight`·auxiliary cross-entropy and gradients of the trainable
    /// parameters, from precomputed backbone activations.
    pub fn loss_and_grads(&self, bout: &BackboneOutput, labels: &[usize], aux_weight: f64) -> Result<LossOutput> {
        let stride = self.stride();
        let feats = bout.features();
        let (logits, cache): (Tensor, HeadCache) = self.head.forward_cached(feats)?;
        let up = ops::bilinear_upsample(&logits, stride)?;
        let (main, gup) = ops::softmax_cross_entropy(&up, labels, None)?;
        let glogits = ops::bilinear_upsample_backward(logits.shape(), stride, &gup)?;
        let (gfeat, head_grads) = self.head.backward(feats, &cache, &glogits)?;

        let pen = bout.penultimate();
        let (aux, aux_grads, gpen) = if aux_weight > 0.0 {
            let al = ops::conv2d_pointwise(pen, &self.aux_classifier, Some(&self.aux_bias))?;
            let aup = ops::bilinear_upsample(&al, stride)?;
            let (aux, gaup) = ops::softmax_cross_entropy(&aup, labels, None)?;
            let gal = ops::bilinear_upsample_backward(al.shape(), stride, &gaup.scale(aux_weight))?;
            let (gpen, gw, gb) = ops::conv2d_pointwise_backward(pen, &self.aux_classifier, true, &gal)?;
            (aux, vec![gw, gb.expect("aux bias gradient")], Some(gpen))
        } else {
            (
                0.0,
                vec![Tensor::zeros(self.aux_classifier.shape()), Tensor::zeros(self.aux_bias.shape())],
                None,
            )
        };

        let mut grads = Vec::new();
        if !self.freeze_backbone && !self.backbone.layers.is_empty() {
            grads.extend(self.backbone.backward(bout, gfeat, gpen)?);
        }
        grads.extend(head_grads);
        grads.extend(aux_grads);
        Ok(LossOutput {
            loss: main + aux_weight * aux,
            main,
            aux,
            grads,
        })
    }
}
