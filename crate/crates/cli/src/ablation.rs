//! Component toggles and one-factor sweeps around a reference fine-tuning
//! config, run over a seed list and reduced to median tables.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use coprompt::consistency::{AugMode, ConsistencyConfig, Criterion, Modality};
use coprompt::data::{make_fewshot_split, Dataset};
use coprompt::encoder::DualEncoder;
use coprompt::eval::{base_to_novel_eval, summarize, Cell, Classifier, Table};
use coprompt::prompt::{AdapterConfig, PromptConfig};
use coprompt::store::content_hash;
use coprompt::trainer::{finetune, FinetuneCheckpoint, TrainConfig};
use coprompt::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    /// Emit the consistency / perturbation / adapter toggle table.
    pub toggles: bool,
    pub criterion: Vec<Criterion>,
    pub modality: Vec<Modality>,
    pub augmentation: Vec<AugMode>,
    pub adapter_depth: Vec<usize>,
    pub lambda: Vec<f64>,
    pub prompt_depth: Vec<usize>,
    pub epochs: Vec<usize>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        AblationAxes {
            toggles: true,
            criterion: vec![Criterion::Cosine, Criterion::L1, Criterion::Mse],
            modality: vec![Modality::TextOnly, Modality::ImageOnly, Modality::Both],
            augmentation: vec![AugMode::None, AugMode::Simple, AugMode::Hard],
            adapter_depth: vec![1, 2, 3],
            lambda: vec![0.1, 1.0, 2.0, 8.0],
            prompt_depth: vec![1, 2, 3, 4],
            epochs: vec![2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub label: String,
    pub config: TrainConfig,
    /// Set on rows whose effective config duplicates an earlier row.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    /// Header of the label column.
    pub axis: String,
    pub rows: Vec<Row>,
}

/// Strips knobs the trainer ignores, so equivalent configs share one run.
pub fn canonical(cfg: &TrainConfig) -> TrainConfig {
    let mut c = cfg.clone();
    c.seed = 0;
    if !c.consistency.enabled {
        c.consistency = ConsistencyConfig {
            enabled: false,
            ..Default::default()
        };
        c.lambda = 0.0;
        c.detach_consistency = false;
    }
    if !c.adapter.enabled {
        c.adapter = AdapterConfig {
            enabled: false,
            ..Default::default()
        };
    }
    if c.prompts.m == 0 {
        c.prompts = PromptConfig {
            m: 0,
            ..Default::default()
        };
    }
    c
}

/// Seed-independent identity of a config.
pub fn config_key(cfg: &TrainConfig) -> String {
    let json = serde_json::to_string(&canonical(cfg)).expect("train config serializes");
    content_hash(json.as_bytes())[..16].to_string()
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// The eight consistency / input-perturbation / adapter combinations. The
/// six meaningful ones come first; perturbation only feeds the consistency
/// term, so the two remaining rows repeat rows 5 and 6 and are marked.
pub fn toggle_section(base: &TrainConfig) -> Section {
    let combos = [
        (true, true, true),
        (true, true, false),
        (true, false, true),
        (true, false, false),
        (false, false, true),
        (false, false, false),
        (false, true, true),
        (false, true, false),
    ];
    let image_aug = match base.consistency.perturb_image {
        AugMode::None => AugMode::Simple,
        a => a,
    };
    let mut rows: Vec<Row> = Vec::new();
    for (cons, pert, adp) in combos {
        let mut c = base.clone();
        c.consistency.enabled = cons;
        c.consistency.perturb_text = pert;
        c.consistency.perturb_image = if pert { image_aug } else { AugMode::None };
        c.adapter.enabled = adp;
        let key = config_key(&c);
        let note = rows
            .iter()
            .position(|r| config_key(&r.config) == key)
            .map(|i| format!("redundant, same run as row {}", i + 1));
        rows.push(Row {
            label: format!("{} {} {}", on_off(cons), on_off(pert), on_off(adp)),
            config: c,
            note,
        });
    }
    Section {
        name: "components".into(),
        axis: "cons. / in. pert. / adp.".into(),
        rows,
    }
}

fn axis<V: Copy>(name: &str, base: &TrainConfig, values: &[V], label: impl Fn(V) -> String, set: impl Fn(&mut TrainConfig, V)) -> Section {
    let rows = values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            set(&mut c, v);
            Row {
                label: label(v),
                config: c,
                note: None,
            }
        })
        .collect();
    Section {
        name: name.into(),
        axis: name.into(),
        rows,
    }
}

fn json_label<V: Serialize>(v: V) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        Ok(other) => other.to_string(),
        Err(_) => "?".into(),
    }
}

/// Every requested section. `layers` bounds the prompt-depth axis.
pub fn plan(base: &TrainConfig, axes: &AblationAxes, layers: usize) -> Result<Vec<Section>> {
    base.validate()?;
    let bad = |m: String| Err(Error::Config(m));
    if let Some(d) = axes.adapter_depth.iter().find(|d| !(1..=3).contains(*d)) {
        return bad(format!("adapter depth must be 1, 2 or 3, got {d}"));
    }
    if let Some(l) = axes.lambda.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return bad(format!("lambda axis value must be finite and >= 0, got {l}"));
    }
    if let Some(d) = axes.prompt_depth.iter().find(|d| **d == 0 || **d > layers) {
        return bad(format!("prompt depth must lie in 1..={layers}, got {d}"));
    }
    if axes.epochs.contains(&0) {
        return bad("epochs axis values must be at least 1".into());
    }
    let mut out = Vec::new();
    if axes.toggles {
        out.push(toggle_section(base));
    }
    let sections = [
        axis("criterion", base, &axes.criterion, json_label, |c, v| c.consistency.criterion = v),
        axis("modality", base, &axes.modality, json_label, |c, v| c.consistency.modality = v),
        axis(
            "augmentation",
            base,
            &axes.augmentation,
            |v| if v == AugMode::None { "same".into() } else { json_label(v) },
            |c, v| c.consistency.perturb_image = v,
        ),
        axis("adapter depth", base, &axes.adapter_depth, |v| v.to_string(), |c, v| c.adapter.layers = v),
        axis("lambda", base, &axes.lambda, |v| format!("{v:?}"), |c, v| c.lambda = v),
        axis("prompt depth", base, &axes.prompt_depth, |v| v.to_string(), |c, v| c.prompts.depth = Some(v)),
        axis("epochs", base, &axes.epochs, |v| v.to_string(), |c, v| c.epochs = v),
    ];
    out.extend(sections.into_iter().filter(|s| !s.rows.is_empty()));
    Ok(out)
}

/// One fine-tuning run: a canonical config at one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Job {
    pub key: String,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Distinct runs needed by `sections`, in first-use order.
pub fn jobs(sections: &[Section], seeds: &[u64]) -> Vec<Job> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for row in sections.iter().flat_map(|s| &s.rows) {
        let key = config_key(&row.config);
        for &seed in seeds {
            if seen.insert((key.clone(), seed)) {
                let mut config = canonical(&row.config);
                config.seed = seed;
                out.push(Job {
                    key: key.clone(),
                    seed,
                    config,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub key: String,
    pub seed: u64,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub deviation: f64,
    pub final_ce: f64,
}

/// Few-shot split at the job seed, fine-tune, base-to-novel evaluation.
pub fn run_job<T: Scalar>(
    backbone: &DualEncoder<T>,
    backbone_hash: &str,
    source: &Dataset,
    job: &Job,
) -> Result<(RunResult, FinetuneCheckpoint<T>)> {
    let split = make_fewshot_split(source, job.config.shots, job.seed)?;
    let ck = finetune(backbone, backbone_hash, &source.content_hash()?, &split, &job.config)?;
    let report = base_to_novel_eval(&Classifier::from_checkpoint(backbone, &ck), source)?;
    let result = RunResult {
        key: job.key.clone(),
        seed: job.seed,
        base_acc: report.base_acc,
        novel_acc: report.novel_acc,
        hm: report.hm,
        deviation: ck.deviation.mean,
        final_ce: ck.final_ce,
    };
    Ok((result, ck))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: String,
    pub note: Option<String>,
    pub key: String,
    pub config: TrainConfig,
    pub runs: Vec<RunResult>,
    /// Medians over seeds.
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionResult {
    pub name: String,
    pub axis: String,
    pub rows: Vec<RowResult>,
}

/// Joins run results back onto the planned rows; every (row, seed) pair
/// must have a result.
pub fn collect(sections: &[Section], seeds: &[u64], results: &[RunResult]) -> Result<Vec<SectionResult>> {
    let median = |runs: &[RunResult], f: fn(&RunResult) -> f64| {
        let v: Vec<f64> = runs.iter().map(f).collect();
        summarize(&v).map(|s| s.median).ok_or_else(|| Error::Empty("seed list".into()))
    };
    sections
        .iter()
        .map(|s| {
            let rows = s
                .rows
                .iter()
                .map(|r| {
                    let key = config_key(&r.config);
                    let runs = seeds
                        .iter()
                        .map(|&seed| {
                            results
                                .iter()
                                .find(|x| x.key == key && x.seed == seed)
                                .cloned()
                                .ok_or_else(|| Error::Config(format!("no result for run {key} at seed {seed}")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(RowResult {
                        label: r.label.clone(),
                        note: r.note.clone(),
                        key,
                        config: r.config.clone(),
                        base_acc: median(&runs, |x| x.base_acc)?,
                        novel_acc: median(&runs, |x| x.novel_acc)?,
                        hm: median(&runs, |x| x.hm)?,
                        deviation: median(&runs, |x| x.deviation)?,
                        runs,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SectionResult {
                name: s.name.clone(),
                axis: s.axis.clone(),
                rows,
            })
        })
        .collect()
}

impl SectionResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new(
            format!("ablation: {} (median over seeds)", self.name),
            &[self.axis.as_str(), "base", "novel", "hm", "deviation", "run", "note"],
        );
        for r in &self.rows {
            t.push(vec![
                r.label.as_str().into(),
                r.base_acc.into(),
                r.novel_acc.into(),
                r.hm.into(),
                r.deviation.into(),
                r.key.as_str().into(),
                r.note.clone().map_or(Cell::Empty, Cell::Text),
            ]);
        }
        t
    }
}
