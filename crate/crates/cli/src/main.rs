use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coprompt_cli::commands;
use coprompt_cli::config::RunConfig;
use coprompt_cli::CliError;

#[derive(Parser)]
#[command(name = "coprompt", about = "Consistency-guided prompt learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of this command's stochastic stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted config path and JSON value, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset suite.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Also dump this many test images per dataset as plain PPM.
        #[arg(long, value_name = "N")]
        export_ppm: Option<usize>,
    },
    /// Contrastively pre-train the dual encoder.
    Pretrain(Common),
    /// Fine-tune prompts and adapters on the source few-shot split.
    Finetune(Common),
    /// Base-to-novel, cross-dataset and domain-shift evaluation.
    Eval(Common),
    /// Component toggles and configuration axes over the seed list.
    Ablate(Common),
    /// One-factor sweep over the seed list.
    Sweep(Common),
    /// Worker process for one ablation or sweep run.
    #[command(hide = true)]
    Job {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        job: PathBuf,
    },
}

fn resolve(common: &Common, seed_key: Option<&str>) -> Result<RunConfig, CliError> {
    let mut overrides = Vec::new();
    if let (Some(seed), Some(key)) = (common.seed, seed_key) {
        overrides.push(format!("{key}={seed}"));
    }
    overrides.extend(common.overrides.iter().cloned());
    RunConfig::resolve(common.config.as_deref(), &overrides)
}

fn out_dir(common: &Common, default: impl Into<PathBuf>) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default.into())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::Usage(e.to_string()))?;
    match cli.command {
        Cmd::GenData { common, export_ppm } => {
            let cfg = resolve(&common, Some("suite.seed"))?;
            let out = out_dir(&common, cfg.data_dir.clone());
            commands::gen_data(&cfg, &out, export_ppm)
        }
        Cmd::Pretrain(common) => {
            let cfg = resolve(&common, Some("pretrain.seed"))?;
            let out = out_dir(&common, cfg.backbone_dir.clone());
            commands::pretrain(&cfg, &out).map(|_| ())
        }
        Cmd::Finetune(common) => {
            let cfg = resolve(&common, Some("train.seed"))?;
            commands::finetune_cmd(&cfg, &out_dir(&common, "runs/finetune")).map(|_| ())
        }
        Cmd::Eval(common) => {
            let cfg = resolve(&common, None)?;
            commands::eval(&cfg, &out_dir(&common, "runs/eval")).map(|_| ())
        }
        Cmd::Ablate(common) => {
            let cfg = resolve(&common, None)?;
            let cfg = with_seed(cfg, common.seed);
            commands::ablate(&cfg, &out_dir(&common, "runs/ablate"), &exe).map(|_| ())
        }
        Cmd::Sweep(common) => {
            let cfg = with_seed(resolve(&common, None)?, common.seed);
            commands::sweep(&cfg, &out_dir(&common, "runs/sweep"), &exe).map(|_| ())
        }
        Cmd::Job { common, job } => {
            let cfg = resolve(&common, None)?;
            let out = common.out.clone().ok_or_else(|| CliError::Usage("job needs --out".into()))?;
            commands::job_cmd(&cfg, &job, &out)
        }
    }
}

/// `--seed` on a multi-seed command narrows the seed list to that seed.
fn with_seed(mut cfg: RunConfig, seed: Option<u64>) -> RunConfig {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
