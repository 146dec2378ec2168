//! Dataset loading, model construction, training runs and their records.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cac_core::accounting::{count_table, CountRow};
use cac_core::checkpoint::{load_into, read_checkpoint, write_checkpoint};
use cac_core::data::{generate_sample, read_dataset, write_dataset, SegSample};
use cac_core::head::SegHead;
use cac_core::model::{Backbone, SegModel};
use cac_core::rng::SplitMix64;
use cac_core::train::{evaluate, Metrics, OptimizerState, Trainer};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;

pub const CSV_COLUMNS: [&str; 7] = ["head_kind", "seed", "pixAcc", "mIoU", "params", "iters", "seconds"];
pub const RECORD_FILE: &str = "record.jsonl";
pub const CSV_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.cacp";

const INIT_STREAM: u64 = 0x494e_4954;

/// One row of the metrics summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub head_kind: String,
    pub seed: u64,
    #[serde(rename = "pixAcc")]
    pub pix_acc: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
    pub params: usize,
    pub iters: usize,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct RunSummary {
    pub metrics: Metrics,
    pub row: CsvRow,
    pub losses: Vec<f64>,
    pub model: SegModel,
}

fn check(problems: Vec<String>, cfg: &ExperimentConfig) -> Result<u64> {
    if !problems.is_empty() {
        bail!("invalid configuration:\n  {}", problems.join("\n  "));
    }
    Ok(cfg.seed.expect("validated seed"))
}

pub fn validated(cfg: &ExperimentConfig) -> Result<u64> {
    check(cfg.problems(), cfg)
}

pub fn validated_for_run(cfg: &ExperimentConfig) -> Result<u64> {
    check(cfg.run_problems(), cfg)
}

/// Evaluation fan-out from `CAC_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var("CAC_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("CAC_THREADS must be a positive integer, got `{v}`"),
        },
    }
}

fn read_samples(path: &Path, cfg: &ExperimentConfig) -> Result<Vec<SegSample>> {
    let f = File::open(path).with_context(|| format!("opening dataset {}", path.display()))?;
    let (hdr, samples) = read_dataset(BufReader::new(f)).with_context(|| format!("reading dataset {}", path.display()))?;
    if (hdr.height as usize, hdr.width as usize, hdr.num_classes as usize) != (cfg.height, cfg.width, cfg.num_classes) {
        bail!(
            "dataset {} is {}x{} with {} classes; config expects {}x{} with {}",
            path.display(),
            hdr.height,
            hdr.width,
            hdr.num_classes,
            cfg.height,
            cfg.width,
            cfg.num_classes
        );
    }
    Ok(samples)
}

/// Generated samples `[start, start + count)` of the config's dataset.
fn generated(cfg: &ExperimentConfig, start: usize, count: usize) -> Result<Vec<SegSample>> {
    let spec = cfg.dataset_spec();
    (start..start + count)
        .map(|i| generate_sample(&spec, i).map(|(s, _)| s).map_err(Into::into))
        .collect()
}

/// Training and evaluation samples: from files when configured, otherwise
/// generated from the seed.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
    let train = match &cfg.train_file {
        Some(p) => read_samples(p, cfg)?,
        None => generated(cfg, 0, cfg.train_count)?,
    };
    let eval = match &cfg.eval_file {
        Some(p) => read_samples(p, cfg)?,
        None => generated(cfg, cfg.train_count, cfg.eval_count)?,
    };
    Ok((train, eval))
}

pub fn build_model(cfg: &ExperimentConfig, seed: u64) -> Result<SegModel> {
    let mut rng = SplitMix64::stream(seed, INIT_STREAM);
    let backbone = Backbone::init(cfg.backbone_config(), 3, &mut rng)?;
    let head = SegHead::init(cfg.head_config(), &mut rng)?;
    Ok(SegModel::new(backbone, head, 3, cfg.freeze_backbone, &mut rng)?)
}

/// Learnable parameters per model component, in model order.
pub fn component_counts(model: &SegModel) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    for (name, t) in model.named_params() {
        let parts: Vec<&str> = name.split('.').collect();
        let key = match parts.as_slice() {
            ["head", i, ..] => format!("head.{i}"),
            [first, ..] => first.to_string(),
            [] => name.clone(),
        };
        match out.last_mut() {
            Some((k, n)) if *k == key => *n += t.len(),
            _ => out.push((key, t.len())),
        }
    }
    out
}

fn write_line(out: &mut impl Write, v: &serde_json::Value) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn formula_rows(cfg: &ExperimentConfig) -> Vec<CountRow> {
    let hc = cfg.head_config();
    count_table(
        cfg.head_kind,
        hc.cac.channels as u64,
        cfg.kernel_size as u64,
        hc.feature_hw.0 as u64,
        hc.feature_hw.1 as u64,
        cfg.se_reduction as u64,
    )
}

pub fn metrics_json(m: &Metrics) -> serde_json::Value {
    json!({
        "pixAcc": m.pix_acc,
        "mIoU": m.mean_iou,
        "class_iou": m.class_iou,
        "confusion": m.confusion.counts(),
    })
}

/// Trains, evaluates and writes the record, CSV row and checkpoint into
/// `out_dir`.
pub fn train_run(cfg: &ExperimentConfig, out_dir: &Path, threads: usize) -> Result<RunSummary> {
    let seed = validated_for_run(cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let record_path = out_dir.join(RECORD_FILE);
    let mut record = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&record_path)
            .with_context(|| format!("opening {}", record_path.display()))?,
    );
    let start = Instant::now();
    let config: BTreeMap<&str, String> = cfg.entries().into_iter().collect();
    write_line(&mut record, &json!({ "kind": "config", "seed": seed, "config": config }))?;

    let (train, eval) = datasets(cfg)?;
    let mut model = build_model(cfg, seed)?;
    let components: Vec<_> = component_counts(&model)
        .into_iter()
        .map(|(c, n)| json!({ "component": c, "count": n }))
        .collect();
    let formulas: Vec<_> = formula_rows(cfg)
        .into_iter()
        .map(|r| json!({ "component": r.component, "formula": r.formula, "count": r.count }))
        .collect();
    write_line(
        &mut record,
        &json!({
            "kind": "params",
            "components": components,
            "formulas": formulas,
            "trainable": model.trainable_param_count(),
        }),
    )?;

    let tcfg = cfg.train_config();
    let mut state = OptimizerState::for_model(&mut model);
    let losses = if cfg.iters > 0 {
        let mut trainer = Trainer::new(&model, &train, &tcfg)?;
        let mut io_err = None;
        let losses = trainer.run(&mut model, &tcfg, &mut state, |it, s| {
            if io_err.is_none() {
                let line = json!({ "kind": "step", "iter": it, "loss": s.loss, "main": s.main, "aux": s.aux, "lr": s.lr });
                io_err = write_line(&mut record, &line).err();
            }
        })?;
        if let Some(e) = io_err {
            return Err(e);
        }
        losses
    } else {
        Vec::new()
    };

    let metrics = evaluate(&model, &eval, cfg.flip, threads)?;
    write_line(&mut record, &json!({ "kind": "metrics", "flip": cfg.flip, "metrics": metrics_json(&metrics) }))?;
    let seconds = start.elapsed().as_secs_f64();
    let row = CsvRow {
        head_kind: cfg.head_kind.to_string(),
        seed,
        pix_acc: metrics.pix_acc,
        miou: metrics.mean_iou,
        params: model.trainable_param_count(),
        iters: cfg.iters,
        seconds,
    };
    write_line(&mut record, &json!({ "kind": "summary", "row": row }))?;

    append_csv(&out_dir.join(CSV_FILE), &row)?;
    save_checkpoint(&out_dir.join(CHECKPOINT_FILE), &model)?;
    Ok(RunSummary {
        metrics,
        row,
        losses,
        model,
    })
}

/// Appends `row`, writing the header first when the file is new or empty.
pub fn append_csv(path: &Path, row: &CsvRow) -> Result<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(f);
    w.serialize(row)?;
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if headers != CSV_COLUMNS {
        bail!("{} has columns {headers:?}, expected {CSV_COLUMNS:?}", path.display());
    }
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn save_checkpoint(path: &Path, model: &SegModel) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    write_checkpoint(&mut w, &model.named_params())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, model: &mut SegModel) -> Result<()> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let entries = read_checkpoint(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    load_into(&entries, model.named_params_mut())?;
    Ok(())
}

/// Rebuilds the configured model, loads `checkpoint` and scores the eval set.
pub fn eval_run(cfg: &ExperimentConfig, checkpoint: &Path, threads: usize) -> Result<Metrics> {
    let seed = validated_for_run(cfg)?;
    let mut model = build_model(cfg, seed)?;
    load_checkpoint(checkpoint, &mut model)?;
    let eval = match &cfg.eval_file {
        Some(p) => read_samples(p, cfg)?,
        None => generated(cfg, cfg.train_count, cfg.eval_count)?,
    };
    Ok(evaluate(&model, &eval, cfg.flip, threads)?)
}

/// Writes `train.cacd` and `eval.cacd` into `out_dir`.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    validated(cfg)?;
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::new();
    for (name, start, count) in [("train.cacd", 0, cfg.train_count), ("eval.cacd", cfg.train_count, cfg.eval_count)] {
        let path = out_dir.join(name);
        let samples = generated(cfg, start, count)?;
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut w = BufWriter::new(f);
        write_dataset(&mut w, cfg.height, cfg.width, cfg.num_classes, &samples)
            .and_then(|_| w.flush().map_err(|e| cac_core::CacError::Io { path: path.display().to_string(), message: e.to_string() }))
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
