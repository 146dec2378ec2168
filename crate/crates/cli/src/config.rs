//! Flat `key = value` experiment configuration with section prefixes.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys and
//! malformed values are errors; every problem in a file is reported at once.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use cac_core::cac::{CacConfig, KernelBatching};
use cac_core::data::DatasetSpec;
use cac_core::head::{HeadConfig, HeadKind};
use cac_core::model::BackboneConfig;
use cac_core::train::TrainConfig;
use cac_core::PaddingMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Identity,
    Shallow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Required: the CLI refuses to run without one.
    pub seed: Option<u64>,
    pub head_kind: HeadKind,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub heads: usize,
    pub padding: PaddingMode,
    pub projection_bias: bool,
    pub kernel_batching: KernelBatching,
    pub norm_eps: f64,
    pub se_reduction: usize,
    pub lr: f64,
    pub power: f64,
    pub iters: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub aux_weight: f64,
    pub batch_size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub texture_noise: f64,
    pub blob_count: (usize, usize),
    pub blob_radius: (usize, usize),
    pub train_file: Option<PathBuf>,
    pub eval_file: Option<PathBuf>,
    pub backbone: BackboneKind,
    pub backbone_channels: usize,
    pub backbone_depth: usize,
    pub backbone_stride: usize,
    pub freeze_backbone: bool,
    pub flip: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let cac = CacConfig::new(16);
        let train = TrainConfig::default();
        let data = DatasetSpec::default();
        Self {
            seed: None,
            head_kind: HeadKind::Cac,
            kernel_size: cac.kernel_size,
            dilations: cac.dilations,
            heads: cac.heads,
            padding: cac.padding,
            projection_bias: cac.projection_bias,
            kernel_batching: cac.kernel_batching,
            norm_eps: cac.norm_eps,
            se_reduction: 4,
            lr: train.initial_lr,
            power: train.power,
            iters: train.total_iters,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            aux_weight: train.aux_weight,
            batch_size: train.batch_size,
            train_count: 64,
            eval_count: 32,
            height: data.height,
            width: data.width,
            num_classes: data.num_classes,
            texture_noise: data.texture_noise,
            blob_count: data.blob_count_range,
            blob_radius: data.blob_radius_range,
            train_file: None,
            eval_file: None,
            backbone: BackboneKind::Shallow,
            backbone_channels: 16,
            backbone_depth: 1,
            backbone_stride: 2,
            freeze_backbone: true,
            flip: true,
            output_dir: PathBuf::from("runs"),
        }
    }
}

fn parse_num<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(format!("expected true/false, got `{v}`")),
    }
}

fn parse_list(v: &str) -> Result<Vec<usize>, String> {
    v.split(',').map(|p| parse_num(p.trim())).collect()
}

fn parse_pair(v: &str) -> Result<(usize, usize), String> {
    match parse_list(v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(format!("expected `min, max`, got `{v}`")),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl ExperimentConfig {
    /// Assigns one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = Some(parse_num(v)?),
            "head.kind" => self.head_kind = v.parse().map_err(|e: cac_core::CacError| e.to_string())?,
            "cac.s" => self.kernel_size = parse_num(v)?,
            "cac.dilations" => self.dilations = parse_list(v)?,
            "cac.heads" => self.heads = parse_num(v)?,
            "cac.padding" => self.padding = v.parse().map_err(|e: cac_core::CacError| e.to_string())?,
            "cac.projection_bias" => self.projection_bias = parse_bool(v)?,
            "cac.kernel_batching" => self.kernel_batching = v.parse().map_err(|e: cac_core::CacError| e.to_string())?,
            "cac.norm_eps" => self.norm_eps = parse_num(v)?,
            "se.reduction" => self.se_reduction = parse_num(v)?,
            "train.lr" => self.lr = parse_num(v)?,
            "train.power" => self.power = parse_num(v)?,
            "train.iters" => self.iters = parse_num(v)?,
            "train.momentum" => self.momentum = parse_num(v)?,
            "train.weight_decay" => self.weight_decay = parse_num(v)?,
            "train.aux_weight" => self.aux_weight = parse_num(v)?,
            "train.batch_size" => self.batch_size = parse_num(v)?,
            "data.train_count" => self.train_count = parse_num(v)?,
            "data.eval_count" => self.eval_count = parse_num(v)?,
            "data.height" => self.height = parse_num(v)?,
            "data.width" => self.width = parse_num(v)?,
            "data.num_classes" => self.num_classes = parse_num(v)?,
            "data.texture_noise" => self.texture_noise = parse_num(v)?,
            "data.blob_count" => self.blob_count = parse_pair(v)?,
            "data.blob_radius" => self.blob_radius = parse_pair(v)?,
            "data.train_file" => self.train_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.eval_file" => self.eval_file = (!v.is_empty()).then(|| PathBuf::from(v)),
            "backbone.kind" => {
                self.backbone = match v {
                    "identity" => BackboneKind::Identity,
                    "shallow" => BackboneKind::Shallow,
                    _ => return Err(format!("expected identity or shallow, got `{v}`")),
                }
            }
            "backbone.channels" => self.backbone_channels = parse_num(v)?,
            "backbone.depth" => self.backbone_depth = parse_num(v)?,
            "backbone.stride" => self.backbone_stride = parse_num(v)?,
            "backbone.freeze" => self.freeze_backbone = parse_bool(v)?,
            "eval.flip" => self.flip = parse_bool(v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, Vec<String>> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected `key = value`", n + 1));
                continue;
            };
            if let Err(e) = cfg.set(k, v) {
                errors.push(format!("line {} ({}): {e}", n + 1, k.trim()));
            }
        }
        if errors.is_empty() {
            Ok(cfg)
        } else {
            Err(errors)
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        if let Some(s) = self.seed {
            v.push(("seed", s.to_string()));
        }
        v.extend([
            ("head.kind", self.head_kind.to_string()),
            ("cac.s", self.kernel_size.to_string()),
            ("cac.dilations", join(&self.dilations)),
            ("cac.heads", self.heads.to_string()),
            ("cac.padding", self.padding.as_str().to_string()),
            ("cac.projection_bias", self.projection_bias.to_string()),
            ("cac.kernel_batching", self.kernel_batching.as_str().to_string()),
            ("cac.norm_eps", self.norm_eps.to_string()),
            ("se.reduction", self.se_reduction.to_string()),
            ("train.lr", self.lr.to_string()),
            ("train.power", self.power.to_string()),
            ("train.iters", self.iters.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.aux_weight", self.aux_weight.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("data.train_count", self.train_count.to_string()),
            ("data.eval_count", self.eval_count.to_string()),
            ("data.height", self.height.to_string()),
            ("data.width", self.width.to_string()),
            ("data.num_classes", self.num_classes.to_string()),
            ("data.texture_noise", self.texture_noise.to_string()),
            ("data.blob_count", format!("{},{}", self.blob_count.0, self.blob_count.1)),
            ("data.blob_radius", format!("{},{}", self.blob_radius.0, self.blob_radius.1)),
        ]);
        if let Some(p) = &self.train_file {
            v.push(("data.train_file", p.display().to_string()));
        }
        if let Some(p) = &self.eval_file {
            v.push(("data.eval_file", p.display().to_string()));
        }
        v.extend([
            (
                "backbone.kind",
                match self.backbone {
                    BackboneKind::Identity => "identity",
                    BackboneKind::Shallow => "shallow",
                }
                .to_string(),
            ),
            ("backbone.channels", self.backbone_channels.to_string()),
            ("backbone.depth", self.backbone_depth.to_string()),
            ("backbone.stride", self.backbone_stride.to_string()),
            ("backbone.freeze", self.freeze_backbone.to_string()),
            ("eval.flip", on_off(self.flip).to_string()),
            ("output.dir", self.output_dir.display().to_string()),
        ]);
        v
    }

    /// Config text that [`ExperimentConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        match self.backbone {
            BackboneKind::Identity => BackboneConfig::Identity,
            BackboneKind::Shallow => BackboneConfig::Shallow {
                channels: self.backbone_channels,
                depth: self.backbone_depth,
                stride: self.backbone_stride,
            },
        }
    }

    pub fn feature_channels(&self) -> usize {
        self.backbone_config().out_channels(3)
    }

    pub fn cac_config(&self) -> CacConfig {
        CacConfig {
            channels: self.feature_channels(),
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
            heads: self.heads,
            padding: self.padding,
            projection_bias: self.projection_bias,
            kernel_batching: self.kernel_batching,
            norm_eps: self.norm_eps,
        }
    }

    pub fn head_config(&self) -> HeadConfig {
        let stride = self.backbone_config().stride().max(1);
        HeadConfig {
            kind: self.head_kind,
            cac: self.cac_config(),
            se_reduction: self.se_reduction,
            feature_hw: (self.height / stride, self.width / stride),
            num_classes: self.num_classes,
        }
    }

    /// Training settings; the seed is 0 when unset (validation rejects that).
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            initial_lr: self.lr,
            power: self.power,
            total_iters: self.iters,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            aux_weight: self.aux_weight,
            batch_size: self.batch_size,
            seed: self.seed.unwrap_or(0),
        }
    }

    /// Generator spec covering the training and evaluation samples.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            seed: self.seed.unwrap_or(0),
            count: self.train_count + self.eval_count,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            texture_noise: self.texture_noise,
            blob_count_range: self.blob_count,
            blob_radius_range: self.blob_radius,
        }
    }

    /// Every violated constraint, one entry per field.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.seed.is_none() {
            p.push("seed: an explicit seed is required".into());
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            p.push(format!("cac.s: {} must be odd", self.kernel_size));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) || self.dilations.windows(2).any(|w| w[0] >= w[1]) {
            p.push(format!("cac.dilations: {:?} must be nonempty, positive and strictly increasing", self.dilations));
        }
        if self.heads == 0 {
            p.push("cac.heads: must be at least 1".into());
        }
        if !(self.norm_eps > 0.0) {
            p.push(format!("cac.norm_eps: {} must be > 0", self.norm_eps));
        }
        p.extend(self.train_config().problems());
        if let Err(e) = self.dataset_spec().validate() {
            p.push(format!("data: {e}"));
        }
        if self.backbone == BackboneKind::Shallow {
            if self.backbone_channels == 0 {
                p.push("backbone.channels: must be positive".into());
            }
            if self.backbone_stride == 0 {
                p.push("backbone.stride: must be positive".into());
            }
        }
        let stride = self.backbone_config().stride();
        if stride > 0 && (self.height % stride != 0 || self.width % stride != 0) {
            p.push(format!(
                "backbone.stride: {stride} must divide data.height {} and data.width {}",
                self.height, self.width
            ));
        }
        let c = self.feature_channels();
        if self.head_kind == HeadKind::Se && (self.se_reduction == 0 || c % self.se_reduction != 0) {
            p.push(format!("se.reduction: {} must divide the feature channel count {c}", self.se_reduction));
        }
        p
    }

    /// [`ExperimentConfig::problems`] plus the sample counts a training or
    /// evaluation run needs.
    pub fn run_problems(&self) -> Vec<String> {
        let mut p = self.problems();
        if self.train_count == 0 && self.train_file.is_none() && self.iters > 0 {
            p.push("data.train_count: training needs at least one sample".into());
        }
        if self.eval_count == 0 && self.eval_file.is_none() {
            p.push("data.eval_count: evaluation needs at least one sample".into());
        }
        p
    }

    pub fn validate(&self) -> Result<(), Vec<String>> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_need_only_a_seed() {
        let cfg = ExperimentConfig::parse("seed = 4\n").unwrap();
        assert!(cfg.validate().is_ok());
        let missing = ExperimentConfig::parse("# nothing\n").unwrap();
        assert_eq!(missing.problems(), vec!["seed: an explicit seed is required".to_string()]);
    }

    #[test]
    fn all_violations_are_listed() {
        let cfg = ExperimentConfig::parse("seed = 1\ncac.s = 4\ntrain.lr = -1\ncac.dilations = 2,1\nhead.kind = se\nse.reduction = 3\n").unwrap();
        let p = cfg.problems();
        for key in ["cac.s", "train.lr", "cac.dilations", "se.reduction"] {
            assert!(p.iter().any(|m| m.starts_with(key)), "{key} missing from {p:?}");
        }
    }

    #[test]
    fn parse_errors_name_lines_and_keys() {
        let err = ExperimentConfig::parse("seed = x\nbogus = 1\nno equals sign\n").unwrap_err();
        assert_eq!(err.len(), 3);
        assert!(err[0].contains("seed") && err[1].contains("bogus") && err[2].contains("line 3"));
    }
}
