use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Deviation, StepLoss, TrainConfig};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::prompt::TunedParams;
use crate::scalar::Scalar;
use crate::store::{load_tensor, read_bytes, save_tensor, write_bytes};
use crate::tensor::Tensor;

pub const FINETUNE_VERSION: u32 = 1;

/// Result of one fine-tuning run.
#[derive(Debug, Clone)]
pub struct FinetuneCheckpoint<T> {
    pub backbone_hash: String,
    pub dataset_hash: String,
    pub split_dataset: String,
    pub config: TrainConfig,
    pub tuned: TunedParams<Tensor<T>>,
    pub history: Vec<StepLoss>,
    /// Clean-input cross-entropy over the whole few-shot split, after
    /// rounding to storage precision.
    pub final_ce: f64,
    pub deviation: Deviation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneManifest {
    pub format_version: u32,
    pub backbone_hash: String,
    pub dataset_hash: String,
    pub split_dataset: String,
    pub tensors: Vec<(String, String)>,
    pub final_ce: f64,
    pub deviation: Deviation,
}

fn history_csv(history: &[StepLoss], final_ce: f64) -> String {
    let mut out = String::from("step,ce,cc,total\n");
    for h in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", h.step, h.ce, h.cc, h.total);
    }
    let _ = writeln!(out, "final,{final_ce:?},,");
    out
}

fn parse_history(path: &Path, text: &str) -> Result<(Vec<StepLoss>, Option<f64>)> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut lines = text.lines();
    if lines.next() != Some("step,ce,cc,total") {
        return Err(bad("missing header".into()));
    }
    let mut history = Vec::new();
    let mut final_ce = None;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad(format!("row `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("number `{s}`")));
        if cols[0] == "final" {
            final_ce = Some(num(cols[1])?);
            continue;
        }
        history.push(StepLoss {
            step: cols[0].parse().map_err(|_| bad(format!("step `{}`", cols[0])))?,
            ce: num(cols[1])?,
            cc: num(cols[2])?,
            total: num(cols[3])?,
        });
    }
    Ok((history, final_ce))
}

impl<T: Scalar> FinetuneCheckpoint<T> {
    /// `checkpoint.json`, `config.json`, `history.csv` and `tuned/` tensors.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let tdir = dir.join("tuned");
        let mut tensors = Vec::new();
        for (name, t) in self.tuned.named() {
            tensors.push((name.clone(), save_tensor(&tdir, &name, t)?));
        }
        write_bytes(&dir.join("config.json"), serde_json::to_string_pretty(&self.config)?.as_bytes())?;
        write_bytes(&dir.join("history.csv"), history_csv(&self.history, self.final_ce).as_bytes())?;
        let manifest = FinetuneManifest {
            format_version: FINETUNE_VERSION,
            backbone_hash: self.backbone_hash.clone(),
            dataset_hash: self.dataset_hash.clone(),
            split_dataset: self.split_dataset.clone(),
            tensors,
            final_ce: self.final_ce,
            deviation: self.deviation,
        };
        write_bytes(&dir.join("checkpoint.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    /// Parameter-free checkpoint of the raw backbone: prediction through it
    /// equals zero-shot prediction.
    pub fn zero_shot(backbone_hash: &str) -> Self {
        FinetuneCheckpoint {
            backbone_hash: backbone_hash.to_string(),
            dataset_hash: String::new(),
            split_dataset: String::new(),
            config: TrainConfig::default(),
            tuned: TunedParams {
                prompts: None,
                text_adapter: None,
                image_adapter: None,
            },
            history: Vec::new(),
            final_ce: f64::NAN,
            deviation: Deviation {
                text: 0.0,
                image: 0.0,
                mean: 0.0,
            },
        }
    }
}

/// Loads a checkpoint written by [`FinetuneCheckpoint::save`]; refuses it
/// unless it was trained on the backbone whose hash is `backbone_hash`.
pub fn load_finetune<T: Scalar>(dir: &Path, backbone: &DualEncoder<T>, backbone_hash: &str) -> Result<FinetuneCheckpoint<T>> {
    let mpath = dir.join("checkpoint.json");
    let manifest: FinetuneManifest = serde_json::from_slice(&read_bytes(&mpath)?)?;
    if manifest.format_version != FINETUNE_VERSION {
        return Err(Error::Format {
            path: mpath,
            msg: format!("unsupported checkpoint version {}", manifest.format_version),
        });
    }
    if manifest.backbone_hash != backbone_hash {
        return Err(Error::HashMismatch {
            what: format!("backbone referenced by {}", mpath.display()),
            expected: manifest.backbone_hash,
            found: backbone_hash.to_string(),
        });
    }
    let config: TrainConfig = serde_json::from_slice(&read_bytes(&dir.join("config.json"))?)?;
    let hpath = dir.join("history.csv");
    let text = String::from_utf8(read_bytes(&hpath)?).map_err(|_| Error::Format {
        path: hpath.clone(),
        msg: "not UTF-8".into(),
    })?;
    let (history, _) = parse_history(&hpath, &text)?;
    let mut tuned: TunedParams<Tensor<T>> = TunedParams::init(&backbone.config, &config.prompts, &config.adapter, config.seed)?;
    let slots = tuned.named_mut();
    if slots.len() != manifest.tensors.len() {
        return Err(Error::Format {
            path: mpath,
            msg: "tensor list does not match the configured prompts and adapters".into(),
        });
    }
    let tdir = dir.join("tuned");
    for ((name, slot), (stored, hash)) in slots.into_iter().zip(&manifest.tensors) {
        if name != *stored {
            return Err(Error::Format {
                path: mpath,
                msg: format!("expected tensor `{name}`, found `{stored}`"),
            });
        }
        let t: Tensor<T> = load_tensor(&tdir, &name, Some(hash))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("load_finetune", &[t.shape(), slot.shape()]));
        }
        *slot = t;
    }
    Ok(FinetuneCheckpoint {
        backbone_hash: manifest.backbone_hash,
        dataset_hash: manifest.dataset_hash,
        split_dataset: manifest.split_dataset,
        config,
        tuned,
        history,
        final_ce: manifest.final_ce,
        deviation: manifest.deviation,
    })
}

/// Final-row clean cross-entropy recorded in a `history.csv`.
pub fn history_final_ce(dir: &Path) -> Result<Option<f64>> {
    let path = dir.join("history.csv");
    let text = String::from_utf8(read_bytes(&path)?).map_err(|_| Error::Format {
        path: path.clone(),
        msg: "not UTF-8".into(),
    })?;
    Ok(parse_history(&path, &text)?.1)
}
