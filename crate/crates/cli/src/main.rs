//! `ehrtext`: run the phenotyping pipeline one stage at a time.
//!
//! Exit codes: 0 success, 1 malformed arguments, 2 invalid configuration,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ehrtext::pipeline::{run_stage, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "ehrtext", version, about = "Phenotyping from fused EHR text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding `paths.out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `--set train.cls_lr=1e-4`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate a synthetic catalog, definitions, events and metadata.
    Synth,
    /// Fuse, filter and tag histories and assign folds.
    Preprocess,
    /// Build the subword vocabulary from catalog descriptions.
    BuildVocab,
    /// Masked-language-model pretraining.
    Pretrain,
    /// Fine-tune the fold-models and write test predictions.
    Train,
    /// Metrics and risk-score curves.
    Evaluate,
    /// List high-probability controls.
    Expand,
    /// Group summaries, survival and biomarker comparisons.
    Report,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::BuildVocab => "build-vocab",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Expand => "expand",
            Command::Report => "report",
        }
    }
}

fn load_config(common: &Common) -> ehrtext::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| ehrtext::Error::Config(format!("--set expects PATH=VALUE, got {o}")))?;
        cfg.set(path.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.out_dir = Some(out.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(command: &str, status: &str, extra: serde_json::Value) {
    let mut line = serde_json::json!({ "command": command, "status": status });
    if let (Some(obj), serde_json::Value::Object(more)) = (line.as_object_mut(), extra) {
        obj.extend(more);
    }
    println!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let command = cli.command.name();
    let cfg = match load_config(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    progress(command, "started", serde_json::json!({ "seed": cfg.seed, "out_dir": cfg.out_dir() }));
    let start = Instant::now();
    match run_stage(&cfg, command) {
        Ok(manifest) => {
            progress(
                command,
                "done",
                serde_json::json!({
                    "seconds": start.elapsed().as_secs_f64(),
                    "config_sha256": manifest.config_sha256,
                    "outputs": manifest.outputs,
                }),
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            progress(command, "failed", serde_json::json!({}));
            ExitCode::from(3)
        }
    }
}
