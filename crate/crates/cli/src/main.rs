use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use cac_cli::config::ExperimentConfig;
use cac_cli::run::{self, CHECKPOINT_FILE};
use cac_cli::verify::{run_suite, Suite};
use cac_core::accounting::count_table;
use cac_core::head::HeadKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cac", version, about = "Context-adaptive re-weighting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flip-averaged evaluation; overrides `eval.flip`.
    #[arg(long, value_enum)]
    flip: Option<OnOff>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::parse(&text).map_err(|e| anyhow!("{}:\n  {}", p.display(), e.join("\n  ")))?
            }
            None => ExperimentConfig::default(),
        };
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{s}`"))?;
            cfg.set(k, v).map_err(|e| anyhow!("--set {s}: {e}"))?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = Some(seed);
        }
        if let Some(f) = self.flip {
            cfg.flip = matches!(f, OnOff::On);
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        let out = cfg.output_dir.clone();
        Ok((cfg, out))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Writes train.cacd and eval.cacd datasets into the output directory.
    GenData(RunArgs),
    /// Trains one model; appends record.jsonl and metrics.csv, writes checkpoint.cacp.
    Train(RunArgs),
    /// Scores a checkpoint on the evaluation set.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to checkpoint.cacp in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Runs verification suites; exits nonzero on any failure.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Prints learnable-parameter counts with their formulas.
    Params {
        #[arg(long, default_value = "cac")]
        kind: String,
        #[arg(long, default_value_t = 64)]
        c: u64,
        #[arg(long, default_value_t = 3)]
        s: u64,
        #[arg(long, default_value_t = 16)]
        h: u64,
        #[arg(long, default_value_t = 16)]
        w: u64,
        /// Comma-separated dilation set (does not change counts).
        #[arg(long, default_value = "1,2,3")]
        dilations: String,
        #[arg(long, default_value_t = 2)]
        heads: u64,
        #[arg(long, default_value_t = 4)]
        se_reduction: u64,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::GenData(args) => {
            let (cfg, out) = args.load()?;
            for p in run::gen_data(&cfg, &out)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train(args) => {
            let (cfg, out) = args.load()?;
            let s = run::train_run(&cfg, &out, run::threads_from_env()?)?;
            println!(
                "{} seed {}: pixAcc {:.4} mIoU {:.4} params {} ({:.1}s) -> {}",
                s.row.head_kind,
                s.row.seed,
                s.row.pix_acc,
                s.row.miou,
                s.row.params,
                s.row.seconds,
                out.display()
            );
        }
        Command::Eval { run: args, checkpoint } => {
            let (cfg, out) = args.load()?;
            let ckpt = checkpoint.unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            let m = run::eval_run(&cfg, &ckpt, run::threads_from_env()?)?;
            println!("{}", run::metrics_json(&m));
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let fault = std::env::var("CAC_VERIFY_FAULT").ok();
            let checks = run_suite(suite, fault.as_deref());
            let failed = checks.iter().filter(|c| !c.passed()).count();
            for c in &checks {
                println!("{c}");
            }
            println!("{} checks, {failed} failed", checks.len());
            return Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
        Command::Params { kind, c, s, h, w, dilations, heads, se_reduction } => {
            let kind: HeadKind = kind.parse()?;
            let dil: Vec<u64> = dilations
                .split(',')
                .map(|d| d.trim().parse().map_err(|_| anyhow!("bad dilation `{d}`")))
                .collect::<Result<_>>()?;
            if s % 2 == 0 || dil.is_empty() || dil.contains(&0) || heads == 0 {
                bail!("invalid combination: s must be odd, dilations positive, heads ≥ 1");
            }
            if kind == HeadKind::Se && (se_reduction == 0 || c % se_reduction != 0) {
                bail!("invalid combination: SE reduction {se_reduction} must divide c = {c}");
            }
            println!("{:<28} {:<20} {:>14}", "component", "formula", "count");
            for row in count_table(kind, c, s, h, w, se_reduction) {
                println!("{:<28} {:<20} {:>14}", row.component, row.formula, row.count);
            }
            println!("dilations {dilations}: no parameters; heads {heads} multiply the module rows");
        }
    }
    Ok(ExitCode::SUCCESS)
}
