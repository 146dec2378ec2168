//! Deterministic single-threaded trainer: SGD with momentum and weight decay
//! under a per-iteration poly learning-rate schedule, main + auxiliary loss,
//! and flip-averaged evaluation.

use crate::data::SegSample;
use crate::error::{CacError, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{stack_batch, BackboneOutput, SegModel};
use crate::ops;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub power: f64,
    pub total_iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aux_weight: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 0.1,
            power: 0.9,
            total_iters: 2000,
            momentum: 0.9,
            weight_decay: 1e-4,
            aux_weight: 0.2,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Every violated constraint, one entry per field.
    pub fn problems(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.initial_lr > 0.0) {
            v.push(format!("train.lr: {} must be > 0", self.initial_lr));
        }
        if !(self.power > 0.0 && self.power <= 1.0) {
            v.push(format!("train.power: {} must lie in (0, 1]", self.power));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            v.push(format!("train.momentum: {} must lie in [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            v.push(format!("train.weight_decay: {} must be ≥ 0", self.weight_decay));
        }
        if !(self.aux_weight >= 0.0) {
            v.push(format!("train.aux_weight: {} must be ≥ 0", self.aux_weight));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size: must be positive".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(CacError::Config(p.join("; ")))
        }
    }
}

/// `initial_lr · (1 − iter/total_iters)^power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.total_iters {
        return Err(CacError::Schedule {
            iter,
            total: cfg.total_iters,
        });
    }
    if cfg.total_iters == 0 {
        return Ok(cfg.initial_lr);
    }
    Ok(cfg.initial_lr * (1.0 - iter as f64 / cfg.total_iters as f64).powf(cfg.power))
}

/// Momentum buffers, one per trainable tensor, and the iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Vec<f64>>,
    pub iter: usize,
}

impl OptimizerState {
    pub fn new(params: &[(String, &mut Tensor)]) -> Self {
        Self {
            velocity: params.iter().map(|(_, t)| vec![0.0; t.len()]).collect(),
            iter: 0,
        }
    }

    pub fn for_model(model: &mut SegModel) -> Self {
        Self::new(&model.trainable_params_mut())
    }
}

/// One SGD step using each tensor's stored gradient:
/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`.
pub fn sgd_step(params: &mut [(String, &mut Tensor)], state: &mut OptimizerState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.len() != state.velocity.len() {
        return Err(CacError::Config(format!(
            "optimizer tracks {} tensors, got {}",
            state.velocity.len(),
            params.len()
        )));
    }
    for ((name, p), v) in params.iter().zip(&state.velocity) {
        let g = p
            .grad()
            .ok_or_else(|| CacError::Numeric(format!("parameter {name} has no gradient")))?;
        if g.iter().any(|x| !x.is_finite()) {
            return Err(CacError::Numeric(format!("non-finite gradient for parameter {name}")));
        }
        if v.len() != p.len() {
            return Err(CacError::Config(format!("velocity shape mismatch for {name}")));
        }
    }
    for ((_, p), v) in params.iter_mut().zip(state.velocity.iter_mut()) {
        let g = p.grad().expect("checked above").to_vec();
        for ((w, vel), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            let gd = gi + cfg.weight_decay * *w;
            *vel = cfg.momentum * *vel + gd;
            *w -= lr * *vel;
        }
    }
    state.iter += 1;
    Ok(())
}

/// A training batch: stacked images, flattened labels and, when the backbone
/// is frozen, its precomputed activations.
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub features: Option<BackboneOutput>,
}

impl Batch {
    pub fn from_samples(samples: &[&SegSample]) -> Result<Self> {
        let imgs: Vec<Tensor> = samples
            .iter()
            .map(|s| {
                let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
                s.image.clone().reshape(&[1, c, h, w])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            images: stack_batch(&imgs.iter().collect::<Vec<_>>())?,
            labels: samples.iter().flat_map(|s| s.labels.iter().map(|&l| l as usize)).collect(),
            features: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub main: f64,
    pub aux: f64,
    pub lr: f64,
}

/// Forward, backward and one SGD step at the scheduled learning rate.
pub fn train_step(model: &mut SegModel, batch: &Batch, cfg: &TrainConfig, state: &mut OptimizerState) -> Result<StepStats> {
    let lr = poly_lr(state.iter, cfg)?;
    let computed;
    let bout = match &batch.features {
        Some(f) if model.freeze_backbone => f,
        _ => {
            computed = model.backbone.forward(&batch.images)?;
            &computed
        }
    };
    let out = model.loss_and_grads(bout, &batch.labels, cfg.aux_weight)?;
    if !out.loss.is_finite() {
        return Err(CacError::Numeric(format!("non-finite loss at iteration {}", state.iter)));
    }
    let mut params = model.trainable_params_mut();
    for ((_, p), g) in params.iter_mut().zip(out.grads) {
        p.set_grad(g.into_data())?;
    }
    sgd_step(&mut params, state, lr, cfg)?;
    for (_, p) in params.iter_mut() {
        p.zero_grad();
    }
    Ok(StepStats {
        loss: out.loss,
        main: out.main,
        aux: out.aux,
        lr,
    })
}

/// Seeded epoch-shuffled mini-batch driver over a fixed training set.
pub struct Trainer<'a> {
    samples: &'a [SegSample],
    cached: Option<Vec<BackboneOutput>>,
    order: Vec<usize>,
    cursor: usize,
    rng: SplitMix64,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;

impl<'a> Trainer<'a> {
    pub fn new(model: &SegModel, samples: &'a [SegSample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(CacError::Config("empty training set".into()));
        }
        let cached = if model.freeze_backbone {
            Some(
                samples
                    .iter()
                    .map(|s| Batch::from_samples(&[s]).and_then(|b| model.backbone.forward(&b.images)))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let mut rng = SplitMix64::stream(cfg.seed, SHUFFLE_STREAM);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        rng.shuffle(&mut order);
        Ok(Self {
            samples,
            cached,
            order,
            cursor: 0,
            rng,
        })
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Result<Batch> {
        let mut idx = Vec::with_capacity(batch_size);
        while idx.len() < batch_size {
            if self.cursor == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        let picked: Vec<&SegSample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let mut batch = Batch::from_samples(&picked)?;
        if let Some(cache) = &self.cached {
            let outs: Vec<&BackboneOutput> = idx.iter().map(|&i| &cache[i]).collect();
            batch.features = Some(BackboneOutput::stack(&outs)?);
        }
        Ok(batch)
    }

    /// Runs `cfg.total_iters` steps, reporting each step's stats to `on_step`.
    pub fn run(&mut self, model: &mut SegModel, cfg: &TrainConfig, state: &mut OptimizerState, mut on_step: impl FnMut(usize, &StepStats)) -> Result<Vec<f64>> {
        let mut losses = Vec::with_capacity(cfg.total_iters);
        while state.iter < cfg.total_iters {
            let batch = self.next_batch(cfg.batch_size)?;
            let it = state.iter;
            let stats = train_step(model, &batch, cfg, state)?;
            on_step(it, &stats);
            losses.push(stats.loss);
        }
        Ok(losses)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub pix_acc: f64,
    pub mean_iou: f64,
    pub class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

impl Metrics {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            pix_acc: confusion.pix_acc()?,
            mean_iou: confusion.mean_iou()?,
            class_iou: confusion.class_iou(),
            confusion,
        })
    }
}

/// Logits for one image `[1, 3, h, w]`, averaged with the un-flipped logits
/// of the horizontally flipped image when `flip` is set.
pub fn predict_logits(model: &SegModel, image: &Tensor, flip: bool) -> Result<Tensor> {
    let logits = model.logits(image)?;
    if !flip {
        return Ok(logits);
    }
    let flipped = ops::flip_horizontal(&model.logits(&ops::flip_horizontal(image)?)?)?;
    Ok(logits.add(&flipped)?.scale(0.5))
}

/// Per-pixel argmax over classes (lowest class id wins ties).
pub fn argmax_classes(logits: &Tensor) -> Result<Vec<usize>> {
    let (nb, k, h, w) = logits.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(nb * hw);
    for b in 0..nb {
        for p in 0..hw {
            let mut best = 0;
            for j in 1..k {
                if logits.data()[(b * k + j) * hw + p] > logits.data()[(b * k + best) * hw + p] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn confusion_for(model: &SegModel, samples: &[SegSample], flip: bool) -> Result<ConfusionMatrix> {
    let mut conf = ConfusionMatrix::new(model.head.config.num_classes);
    for s in samples {
        let (c, h, w) = (s.image.shape()[0], s.height(), s.width());
        let img = s.image.clone().reshape(&[1, c, h, w])?;
        let pred = argmax_classes(&predict_logits(model, &img, flip)?)?;
        let labels: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
        conf.accumulate(&pred, &labels, None)?;
    }
    Ok(conf)
}

/// pixAcc / mIoU over `samples`, fanning out over at most `threads` workers.
/// Confusion counts are integers, so the merge order does not matter.
pub fn evaluate(model: &SegModel, samples: &[SegSample], flip: bool, threads: usize) -> Result<Metrics> {
    let threads = threads.max(1).min(samples.len().max(1));
    let conf = if threads == 1 {
        confusion_for(model, samples, flip)?
    } else {
        let chunk = samples.len().div_ceil(threads);
        let parts: Vec<Result<ConfusionMatrix>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || confusion_for(model, part, flip)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
        });
        let mut conf = ConfusionMatrix::new(model.head.config.num_classes);
        for p in parts {
            conf.merge(&p?)?;
        }
        conf
    };
    Metrics::from_confusion(conf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(total: usize) -> TrainConfig {
        TrainConfig {
            initial_lr: 0.5,
            total_iters: total,
            ..Default::default()
        }
    }

    #[test]
    fn poly_endpoints_and_midpoint() {
        let c = cfg(100);
        assert_eq!(poly_lr(0, &c).unwrap(), 0.5);
        assert_eq!(poly_lr(100, &c).unwrap(), 0.0);
        // 0.5^0.9 = exp(0.9 ln 0.5) = 0.535886731...
        let mid = poly_lr(50, &c).unwrap();
        assert!((mid - 0.5 * 0.535_886_731_268_146_6).abs() < 1e-15, "{mid}");
        assert!(matches!(poly_lr(101, &c), Err(CacError::Schedule { .. })));
    }

    #[test]
    fn poly_monotone() {
        let c = cfg(37);
        let lrs: Vec<f64> = (0..=37).map(|i| poly_lr(i, &c).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn one_param(vals: &[f64], grad: &[f64]) -> Tensor {
        let mut t = Tensor::new(&[vals.len()], vals.to_vec()).unwrap();
        t.set_grad(grad.to_vec()).unwrap();
        t
    }

    #[test]
    fn sgd_first_step_and_two_step_displacement() {
        let c = TrainConfig { momentum: 0.9, weight_decay: 0.01, ..Default::default() };
        let mut p = one_param(&[1.0, -2.0], &[0.5, 0.25]);
        let mut params = vec![("p".to_string(), &mut p)];
        let mut st = OptimizerState::new(&params);
        sgd_step(&mut params, &mut st, 0.1, &c).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.1 * (0.5 + 0.01 * 1.0), -2.0 - 0.1 * (0.25 + 0.01 * -2.0)]);

        let c = TrainConfig { momentum: 0.9, weight_decay: 0.0, ..Default::default() };
        let mut p = one_param(&[3.0], &[2.0]);
        let mut params = vec![("p".to_string(), &mut p)];
        let mut st = OptimizerState::new(&params);
        sgd_step(&mut params, &mut st, 0.1, &c).unwrap();
        sgd_step(&mut params, &mut st, 0.1, &c).unwrap();
        assert!((3.0 - p.data()[0] - 0.1 * 2.0 * 2.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient_by_name() {
        let c = TrainConfig::default();
        let mut p = one_param(&[1.0], &[f64::NAN]);
        let mut params = vec![("head.0.key".to_string(), &mut p)];
        let mut st = OptimizerState::new(&params);
        let err = sgd_step(&mut params, &mut st, 0.1, &c).unwrap_err();
        assert!(err.to_string().contains("head.0.key"));
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let c = TrainConfig { weight_decay: 0.1, ..Default::default() };
        let mut p = one_param(&[1.5, -0.5, 0.0], &[0.0, 0.0, 0.0]);
        let mut params = vec![("p".to_string(), &mut p)];
        let mut st = OptimizerState::new(&params);
        sgd_step(&mut params, &mut st, 0.5, &c).unwrap();
        assert!(p.data()[0].abs() < 1.5 && p.data()[1].abs() < 0.5 && p.data()[2] == 0.0);
    }

    #[test]
    fn reduces_to_plain_gradient_descent() {
        let c = TrainConfig { momentum: 0.0, weight_decay: 0.0, ..Default::default() };
        let vals = [0.3, -1.7, 2.2];
        let grads = [0.11, -0.05, 0.7];
        let mut p = one_param(&vals, &grads);
        let mut params = vec![("p".to_string(), &mut p)];
        let mut st = OptimizerState::new(&params);
        sgd_step(&mut params, &mut st, 0.05, &c).unwrap();
        for i in 0..3 {
            assert_eq!(p.data()[i].to_bits(), (vals[i] - 0.05 * grads[i]).to_bits());
        }
    }
}
