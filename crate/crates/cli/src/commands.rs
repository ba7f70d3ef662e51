use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use coprompt::data::{default_suite, Dataset, GeneratedSuite, Pool, PretrainSplit};
use coprompt::encoder::{
    contrastive_pretrain, load_backbone, retrieval_accuracy, save_backbone, DualEncoder, EncoderConfig, PretrainConfig,
    PretrainReport, Tokenizer,
};
use coprompt::eval::{base_to_novel_eval, cross_dataset_eval, domain_gen_eval, Classifier, Table};
use coprompt::trainer::{finetune, load_finetune, FinetuneCheckpoint};
use coprompt::data::make_fewshot_split;

use crate::ablation::{collect, jobs, plan, run_job, Job, Row, RunResult, Section, SectionResult};
use crate::config::{sweep_point, RunConfig};
use crate::CliError;

type Res<T> = Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: &str) -> Res<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Loads the suite under `cfg.data_dir`; a missing suite is a usage error
/// that names the path.
pub fn load_suite(cfg: &RunConfig) -> Res<GeneratedSuite> {
    let index = cfg.data_dir.join("suite.json");
    if !index.exists() {
        return Err(CliError::Usage(format!(
            "dataset not found: {} (run `coprompt gen-data` first)",
            index.display()
        )));
    }
    Ok(GeneratedSuite::load(&cfg.data_dir)?)
}

pub fn load_frozen(cfg: &RunConfig) -> Res<(DualEncoder<f64>, String)> {
    let manifest = cfg.backbone_dir.join("manifest.json");
    if !manifest.exists() {
        return Err(CliError::Usage(format!(
            "backbone not found: {} (run `coprompt pretrain` first)",
            manifest.display()
        )));
    }
    let (enc, m) = load_backbone(&cfg.backbone_dir)?;
    Ok((enc, m.hash))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Res<()> {
    write_file(&out.join("run_config.json"), &cfg.to_json())
}

pub fn gen_data(cfg: &RunConfig, out: &Path, export_ppm: Option<usize>) -> Res<()> {
    let suite = default_suite(&cfg.suite)?.generate()?;
    suite.save(out)?;
    if let Some(limit) = export_ppm {
        for d in suite.all() {
            d.export_ppm(&out.join("ppm").join(d.name().replace(['@', '(', ')'], "_")), Pool::Test, limit)?;
        }
    }
    for d in suite.all() {
        println!("{:<28} {:>3} classes {:>5} images  {}", d.name(), d.manifest.classes.len(), d.records.len(), d.content_hash()?);
    }
    echo_config(cfg, out)
}

/// Tokenizer over every pre-training caption, then contrastive pre-training
/// of a fresh encoder. Returns the frozen result.
pub fn build_backbone(
    suite: &GeneratedSuite,
    encoder: &EncoderConfig,
    pretrain: &PretrainConfig,
) -> Res<(DualEncoder<f64>, PretrainReport, PretrainSplit)> {
    let datasets: Vec<&Dataset> = std::iter::once(&suite.source).chain(&suite.targets).collect();
    let split = PretrainSplit::from_datasets(&datasets)?;
    let tokenizer = Tokenizer::build(split.captions.iter().flatten().map(|s| s.as_str()));
    let mut enc = DualEncoder::<f64>::init(encoder.clone(), tokenizer, pretrain.seed)?;
    let report = contrastive_pretrain(&mut enc, &split, pretrain)?;
    Ok((enc.clone_frozen(), report, split))
}

pub fn pretrain(cfg: &RunConfig, out: &Path) -> Res<String> {
    let suite = load_suite(cfg)?;
    let (enc, report, split) = build_backbone(&suite, &cfg.encoder, &cfg.pretrain)?;
    let held_out = retrieval_accuracy(&enc, &split, true)?;
    let zs = base_to_novel_eval(&Classifier::zero_shot(&enc), &suite.source)?;
    let hash = save_backbone(&enc, out)?;
    let metrics = serde_json::json!({
        "backbone_hash": hash,
        "tau": report.tau,
        "final_loss": report.losses.last(),
        "held_out_retrieval": held_out,
        "source_zero_shot": { "base": zs.base_acc, "novel": zs.novel_acc, "hm": zs.hm },
        "losses": report.losses,
        "held_out_curve": report.held_out,
    });
    write_file(&out.join("pretrain_metrics.json"), &serde_json::to_string_pretty(&metrics).expect("json"))?;
    println!("backbone {hash}");
    println!("held-out retrieval {:.4}, source zero-shot base {:.2} novel {:.2} hm {:.2}", held_out, zs.base_acc, zs.novel_acc, zs.hm);
    echo_config(cfg, out)?;
    Ok(hash)
}

pub fn finetune_cmd(cfg: &RunConfig, out: &Path) -> Res<FinetuneCheckpoint<f64>> {
    let suite = load_suite(cfg)?;
    let (enc, hash) = load_frozen(cfg)?;
    let split = make_fewshot_split(&suite.source, cfg.train.shots, cfg.train.seed)?;
    let ck = finetune(&enc, &hash, &suite.source.content_hash()?, &split, &cfg.train)?;
    ck.save(out)?;
    let report = base_to_novel_eval(&Classifier::from_checkpoint(&enc, &ck), &suite.source)?;
    print!("{}", report.table().render());
    println!("final ce {:.6}, deviation {:.4}", ck.final_ce, ck.deviation.mean);
    echo_config(cfg, out)?;
    Ok(ck)
}

/// All evaluation protocols; nothing is written until every one succeeds.
pub fn eval(cfg: &RunConfig, out: &Path) -> Res<Vec<(String, Table)>> {
    let suite = load_suite(cfg)?;
    let (enc, hash) = load_frozen(cfg)?;
    let ck = match &cfg.checkpoint_dir {
        Some(dir) => load_finetune(dir, &enc, &hash)?,
        None => FinetuneCheckpoint::zero_shot(&hash),
    };
    let cls = Classifier::from_checkpoint(&enc, &ck);
    let b2n = base_to_novel_eval(&cls, &suite.source)?;
    let targets: Vec<&Dataset> = suite.targets.iter().collect();
    let cross = cross_dataset_eval(&cls, suite.source.name(), &targets)?;
    let variants: Vec<&Dataset> = suite.variants.iter().collect();
    let domain = domain_gen_eval(&cls, &suite.source, &variants)?;
    let tables = vec![
        ("base_to_novel".to_string(), b2n.table()),
        ("per_class".to_string(), b2n.per_class_table()),
        ("cross_dataset".to_string(), cross.table()),
        ("domain".to_string(), domain.table()),
    ];
    let mut text = String::new();
    for (name, t) in &tables {
        write_file(&out.join(format!("{name}.csv")), &t.to_csv())?;
        text.push_str(&t.render());
        text.push('\n');
    }
    write_file(&out.join("tables.txt"), &text)?;
    let report = serde_json::json!({ "base_to_novel": b2n, "cross_dataset": cross, "domain": domain });
    write_file(&out.join("report.json"), &serde_json::to_string_pretty(&report).expect("json"))?;
    print!("{text}");
    echo_config(cfg, out)?;
    Ok(tables)
}

/// Worker count from `COPROMPT_THREADS`, default 1.
pub fn worker_count() -> Res<usize> {
    match std::env::var("COPROMPT_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("COPROMPT_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn job_dir(out: &Path, job: &Job) -> PathBuf {
    out.join("jobs").join(format!("{}-s{}", job.key, job.seed))
}

/// Runs one job and writes its checkpoint, `job.json` and `result.json`.
pub fn run_job_in(enc: &DualEncoder<f64>, hash: &str, source: &Dataset, job: &Job, dir: &Path) -> Res<RunResult> {
    let (result, ck) = run_job(enc, hash, source, job)?;
    ck.save(dir)?;
    write_file(&dir.join("job.json"), &serde_json::to_string_pretty(job).expect("json"))?;
    write_file(&dir.join("result.json"), &serde_json::to_string_pretty(&result).expect("json"))?;
    Ok(result)
}

fn read_result(dir: &Path) -> Res<RunResult> {
    let path = dir.join("result.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Entry point of a worker process.
pub fn job_cmd(cfg: &RunConfig, job_file: &Path, out: &Path) -> Res<()> {
    let text = fs::read_to_string(job_file).map_err(|e| io_err(job_file, e))?;
    let job: Job = serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", job_file.display())))?;
    let suite = load_suite(cfg)?;
    let (enc, hash) = load_frozen(cfg)?;
    run_job_in(&enc, &hash, &suite.source, &job, out).map(|_| ())
}

/// Runs `jobs` in this process when `workers` is 1, otherwise as up to
/// `workers` concurrent child processes of `exe`, each owning its own job
/// directory.
pub fn run_jobs(cfg: &RunConfig, config_path: &Path, out: &Path, jobs: &[Job], workers: usize, exe: &Path) -> Res<Vec<RunResult>> {
    if workers <= 1 {
        let suite = load_suite(cfg)?;
        let (enc, hash) = load_frozen(cfg)?;
        return jobs
            .iter()
            .enumerate()
            .map(|(i, job)| {
                log::info!("job {}/{}: {} seed {}", i + 1, jobs.len(), job.key, job.seed);
                run_job_in(&enc, &hash, &suite.source, job, &job_dir(out, job))
            })
            .collect();
    }
    let mut running: Vec<(Child, &Job)> = Vec::new();
    let mut pending = jobs.iter();
    let wait_one = |running: &mut Vec<(Child, &Job)>| -> Res<()> {
        let (mut child, job) = running.remove(0);
        let status = child.wait().map_err(|e| CliError::Usage(format!("worker: {e}")))?;
        if !status.success() {
            return Err(CliError::Usage(format!("worker for run {} seed {} failed with {status}", job.key, job.seed)));
        }
        Ok(())
    };
    loop {
        while running.len() < workers {
            let Some(job) = pending.next() else { break };
            let dir = job_dir(out, job);
            let file = dir.join("job.json");
            write_file(&file, &serde_json::to_string_pretty(job).expect("json"))?;
            let child = Command::new(exe)
                .arg("job")
                .arg("--config")
                .arg(config_path)
                .arg("--job")
                .arg(&file)
                .arg("--out")
                .arg(&dir)
                .spawn()
                .map_err(|e| CliError::Usage(format!("{}: {e}", exe.display())))?;
            running.push((child, job));
        }
        if running.is_empty() {
            break;
        }
        wait_one(&mut running)?;
    }
    jobs.iter().map(|j| read_result(&job_dir(out, j))).collect()
}

fn emit_sections(results: &[SectionResult], out: &Path, stem: &str) -> Res<String> {
    let mut text = String::new();
    for (i, s) in results.iter().enumerate() {
        let t = s.table();
        write_file(&out.join(format!("{stem}_{}_{}.csv", i, s.name.replace(' ', "_"))), &t.to_csv())?;
        text.push_str(&t.render());
        text.push('\n');
    }
    write_file(&out.join(format!("{stem}.json")), &serde_json::to_string_pretty(results).expect("json"))?;
    write_file(&out.join("tables.txt"), &text)?;
    Ok(text)
}

fn run_sections(cfg: &RunConfig, out: &Path, sections: &[Section], stem: &str, exe: &Path) -> Res<Vec<SectionResult>> {
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("seed list is empty".into()));
    }
    echo_config(cfg, out)?;
    let planned = jobs(sections, &cfg.seeds);
    write_file(&out.join("plan.json"), &serde_json::to_string_pretty(sections).expect("json"))?;
    let results = run_jobs(cfg, &out.join("run_config.json"), out, &planned, worker_count()?, exe)?;
    let collected = collect(sections, &cfg.seeds, &results)?;
    print!("{}", emit_sections(&collected, out, stem)?);
    Ok(collected)
}

pub fn ablate(cfg: &RunConfig, out: &Path, exe: &Path) -> Res<Vec<SectionResult>> {
    let (enc, _) = load_frozen(cfg)?;
    let sections = plan(&cfg.train, &cfg.ablation, enc.config.layers)?;
    run_sections(cfg, out, &sections, "ablation", exe)
}

pub fn sweep(cfg: &RunConfig, out: &Path, exe: &Path) -> Res<Vec<SectionResult>> {
    if cfg.sweep.values.is_empty() {
        return Err(CliError::Usage("sweep.values is empty".into()));
    }
    let rows = cfg
        .sweep
        .values
        .iter()
        .map(|v| {
            Ok(Row {
                label: v.to_string(),
                config: sweep_point(&cfg.train, &cfg.sweep.key, v)?,
                note: None,
            })
        })
        .collect::<Res<Vec<_>>>()?;
    let sections = [Section {
        name: format!("sweep {}", cfg.sweep.key),
        axis: cfg.sweep.key.clone(),
        rows,
    }];
    run_sections(cfg, out, &sections, "sweep", exe)
}
