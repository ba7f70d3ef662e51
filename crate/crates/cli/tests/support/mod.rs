//! Default-scale fixture shared by the experiment and acceptance targets:
//! the default suite and backbone, built through the library commands.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::time::Instant;

use coprompt::data::GeneratedSuite;
use coprompt::encoder::DualEncoder;
use coprompt::eval::summarize;
use coprompt::trainer::{FinetuneCheckpoint, TrainConfig};
use coprompt_cli::ablation::{config_key, run_job, Job, RunResult};
use coprompt_cli::commands;
use coprompt_cli::config::RunConfig;

pub struct Fixture {
    pub root: PathBuf,
    pub cfg: RunConfig,
    pub suite: GeneratedSuite,
    pub backbone: DualEncoder<f64>,
    pub hash: String,
    /// Wall time of `gen-data` plus `pretrain` at the default config.
    pub build_secs: f64,
}

/// Regenerates everything under `CARGO_TARGET_TMPDIR/<name>`.
pub fn fixture(name: &str) -> Fixture {
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&root);
    let cfg = RunConfig {
        data_dir: root.join("data"),
        backbone_dir: root.join("backbone"),
        ..RunConfig::default()
    };
    let start = Instant::now();
    commands::gen_data(&cfg, &cfg.data_dir, None).unwrap();
    commands::pretrain(&cfg, &cfg.backbone_dir).unwrap();
    let build_secs = start.elapsed().as_secs_f64();
    let suite = commands::load_suite(&cfg).unwrap();
    let (backbone, hash) = commands::load_frozen(&cfg).unwrap();
    Fixture {
        root,
        cfg,
        suite,
        backbone,
        hash,
        build_secs,
    }
}

impl Fixture {
    /// One fine-tuning run at `seed` (split and trainer), evaluated base-to-novel.
    pub fn run(&self, train: &TrainConfig, seed: u64) -> (RunResult, FinetuneCheckpoint<f64>) {
        let config = TrainConfig { seed, ..train.clone() };
        let job = Job {
            key: config_key(&config),
            seed,
            config,
        };
        run_job(&self.backbone, &self.hash, &self.suite.source, &job).unwrap()
    }
}

pub fn median(values: &[f64]) -> f64 {
    summarize(values).expect("non-empty").median
}

/// Percent interval `chance ± 3σ` for `n` balanced trials over `classes`.
pub fn chance_band(classes: usize, n: usize) -> (f64, f64) {
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    (100.0 * (p - 3.0 * sigma), 100.0 * (p + 3.0 * sigma))
}

pub fn within(band: (f64, f64), v: f64) -> bool {
    v >= band.0 && v <= band.1
}
