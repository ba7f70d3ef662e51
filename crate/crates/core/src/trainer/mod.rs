//! Supervised plus consistency objective and the prompt fine-tuning loop.

mod checkpoint;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, Graph, Param, Var};
use crate::consistency::{consistency_loss, perturb_image, Augmenter, ConsistencyConfig, DescriptionStore};
use crate::data::{template, FewShotSplit};
use crate::encoder::{image_forward, text_forward, DualEncoder, EncoderWeights};
use crate::error::{Error, Result};
use crate::prompt::{build_schedule, tuned_image, tuned_text, AdapterConfig, PromptConfig, PromptSchedule, TunedParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{history_final_ce, load_finetune, FinetuneCheckpoint, FinetuneManifest};

/// Which embeddings the supervised cross-entropy is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisedPath {
    /// Prompted and adapted embeddings; prompts and adapters get gradient.
    Tuned,
    /// Frozen template and frozen image embeddings; only the consistency
    /// term trains anything.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub shots: usize,
    pub seed: u64,
    pub consistency: ConsistencyConfig,
    pub prompts: PromptConfig,
    pub adapter: AdapterConfig,
    pub supervised_path: SupervisedPath,
    /// Keep the consistency value in the loss but block its gradient.
    pub detach_consistency: bool,
    /// Stop after this many steps instead of `epochs` full passes.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 8.0,
            lr: 0.035,
            momentum: 0.9,
            batch_size: 4,
            epochs: 8,
            shots: 16,
            seed: 0,
            consistency: ConsistencyConfig::default(),
            prompts: PromptConfig::default(),
            adapter: AdapterConfig::default(),
            supervised_path: SupervisedPath::Tuned,
            detach_consistency: false,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("need lr > 0 and 0 <= momentum < 1, got {} and {}", self.lr, self.momentum));
        }
        if self.batch_size == 0 || self.shots == 0 || self.epochs == 0 {
            return bad("batch_size, shots and epochs must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub ce: f64,
    pub cc: f64,
    pub total: f64,
}

/// Everything besides the parameters that determines the rest of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainState<T> {
    pub step: usize,
    pub order: Vec<usize>,
    pub cursor: usize,
    pub velocity: Vec<Vec<T>>,
    pub rng: ChaCha8Rng,
    pub history: Vec<StepLoss>,
}

/// Lossless mid-run snapshot: state plus current parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct TrainSnapshot<T> {
    pub state: TrainState<T>,
    pub params: Vec<(String, Vec<T>)>,
}

/// `ce + lambda * cc`.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, ce: Var, cc: Var, lambda: f64) -> Result<Var> {
    let weighted = g.scale(cc, T::of(lambda));
    g.add(ce, weighted)
}

/// Mean over the batch of `-log softmax(cos / tau)` at each label.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, images: Var, classes: Var, labels: &[usize], tau: f64) -> Result<Var> {
    let c = g.value(classes).shape()[0];
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let ct = g.transpose(classes)?;
    let sims = g.matmul(images, ct)?;
    let logits = g.scale(sims, T::of(1.0 / tau));
    g.cross_entropy(logits, labels)
}

/// Fine-tuning run over a frozen backbone.
pub struct Trainer<'a, T> {
    pub backbone: &'a DualEncoder<T>,
    pub split: &'a FewShotSplit,
    pub config: TrainConfig,
    pub params: TunedParams<Tensor<T>>,
    pub state: TrainState<T>,
    store: DescriptionStore,
    augmenter: Augmenter,
    class_tokens: Vec<Vec<u32>>,
    steps_per_epoch: usize,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(backbone: &'a DualEncoder<T>, split: &'a FewShotSplit, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if !backbone.frozen {
            return Err(Error::Config("fine-tuning needs a frozen backbone".into()));
        }
        if split.is_empty() {
            return Err(Error::Empty("few-shot split".into()));
        }
        let params = TunedParams::init(&backbone.config, &config.prompts, &config.adapter, config.seed)?;
        let m = config.prompts.m * usize::from(params.prompts.is_some());
        let class_tokens = split
            .class_names
            .iter()
            .map(|c| {
                let t = backbone.tokenizer.encode_strict(&template(c))?;
                backbone.check_text_len(t.len(), m)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let store = DescriptionStore::from_split(split)?;
        store.validate(&backbone.tokenizer, backbone.config.text_len)?;
        let augmenter = Augmenter::new(
            config.consistency.perturb_image,
            backbone.config.image_size,
            backbone.config.patch_side(),
        );
        let steps_per_epoch = split.len().div_ceil(config.batch_size);
        let state = TrainState {
            step: 0,
            order: Vec::new(),
            cursor: 0,
            velocity: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_f00d),
            history: Vec::new(),
        };
        Ok(Trainer {
            backbone,
            split,
            config,
            params,
            state,
            store,
            augmenter,
            class_tokens,
            steps_per_epoch,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.config.max_steps.unwrap_or(self.config.epochs * self.steps_per_epoch)
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.state.cursor >= self.state.order.len() {
            let mut order: Vec<usize> = (0..self.split.len()).collect();
            order.shuffle(&mut self.state.rng);
            self.state.order = order;
            self.state.cursor = 0;
        }
        let end = (self.state.cursor + self.config.batch_size).min(self.state.order.len());
        let batch = self.state.order[self.state.cursor..end].to_vec();
        self.state.cursor = end;
        batch
    }

    /// Draws the next batch and its perturbations from the run stream.
    pub fn next_inputs(&mut self) -> Result<StepInputs> {
        let batch = self.next_batch();
        let cc = &self.config.consistency;
        let mut inputs = StepInputs {
            labels: batch.iter().map(|&i| self.split.labels[i]).collect(),
            ..Default::default()
        };
        for (&i, &y) in batch.iter().zip(&inputs.labels) {
            let px: &[f32] = &self.split.records[i].pixels;
            if cc.enabled {
                let (a, b) = perturb_image(&self.augmenter, px, &mut self.state.rng)?;
                inputs.frozen_views.push(a);
                inputs.tuned_views.push(b);
                let name = &self.split.class_names[y];
                inputs
                    .descriptions
                    .push(self.store.perturb_text(&self.backbone.tokenizer, name, cc.perturb_text, &mut self.state.rng)?);
            } else {
                inputs.tuned_views.push(px.to_vec());
            }
        }
        Ok(inputs)
    }

    pub fn class_tokens(&self) -> &[Vec<u32>] {
        &self.class_tokens
    }

    /// One optimizer step; returns its loss decomposition.
    pub fn step(&mut self) -> Result<StepLoss> {
        let inputs = self.next_inputs()?;
        let enc = self.backbone;
        let mut g = Graph::new();
        let w = enc.bind(&mut g, false);
        let tv = self.params.bind(&mut g, true);
        let step = self.state.step;
        let Objective { ce, cc, total } =
            objective(&mut g, enc, &w, &tv, &self.config, &self.class_tokens, &inputs).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("fine-tuning step {step}: {what}")),
                other => other,
            })?;
        let record = StepLoss {
            step: self.state.step,
            ce: g.value(ce).item().as_f64(),
            cc: g.value(cc).item().as_f64(),
            total: g.value(total).item().as_f64(),
        };
        if !(record.ce.is_finite() && record.cc.is_finite() && record.total.is_finite()) {
            return Err(Error::NonFinite(format!(
                "fine-tuning step {}: ce={} cc={} total={}",
                record.step, record.ce, record.cc, record.total
            )));
        }
        g.backward(total)?;
        let vars = tv.named();
        let mut owned: Vec<Param<T>> = self
            .params
            .named()
            .into_iter()
            .zip(&vars)
            .map(|((name, t), (_, v))| Param {
                name,
                value: t.clone(),
                grad: g.grad(**v),
            })
            .collect();
        drop(g);
        if !owned.is_empty() {
            let mut refs: Vec<&mut Param<T>> = owned.iter_mut().collect();
            sgd_step(&mut refs, &mut self.state.velocity, self.config.lr, self.config.momentum)?;
        }
        for ((_, slot), p) in self.params.named_mut().into_iter().zip(owned) {
            *slot = p.value;
        }
        self.state.step += 1;
        self.state.history.push(record);
        Ok(record)
    }

    /// Steps until `total_steps`.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.step()?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> TrainSnapshot<T> {
        TrainSnapshot {
            state: self.state.clone(),
            params: self.params.named().into_iter().map(|(n, t)| (n, t.to_vec())).collect(),
        }
    }

    pub fn restore(&mut self, snap: &TrainSnapshot<T>) -> Result<()> {
        let slots = self.params.named_mut();
        if slots.len() != snap.params.len() {
            return Err(Error::Config("snapshot parameter list does not match".into()));
        }
        for ((name, slot), (sname, data)) in slots.into_iter().zip(&snap.params) {
            if name != *sname || slot.len() != data.len() {
                return Err(Error::Config(format!("snapshot parameter `{sname}` does not match `{name}`")));
            }
            *slot = Tensor::new(slot.shape().to_vec(), data.clone())?;
        }
        self.state = snap.state.clone();
        Ok(())
    }

    /// Rounds parameters to storage precision and packages the run.
    pub fn finish(mut self, backbone_hash: &str, dataset_hash: &str) -> Result<FinetuneCheckpoint<T>> {
        self.params.round_to_storage();
        let final_ce = train_split_ce(self.backbone, &self.params, &self.config, self.split)?;
        let deviation = embedding_deviation(self.backbone, &self.params, self.split)?;
        Ok(FinetuneCheckpoint {
            backbone_hash: backbone_hash.to_string(),
            dataset_hash: dataset_hash.to_string(),
            split_dataset: self.split.dataset.clone(),
            config: self.config,
            tuned: self.params,
            history: self.state.history,
            final_ce,
            deviation,
        })
    }
}

/// Inputs of one step after perturbation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInputs {
    pub labels: Vec<usize>,
    /// Seen by the tuned branch.
    pub tuned_views: Vec<Vec<f32>>,
    /// Seen by the frozen branch; empty when consistency is off.
    pub frozen_views: Vec<Vec<f32>>,
    /// Frozen-branch text per sample; empty when consistency is off.
    pub descriptions: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub ce: Var,
    pub cc: Var,
    pub total: Var,
}

/// Builds `ce + lambda * cc` for one batch. Backbone weights `w` must be
/// constants; `tv` holds the tuned parameters.
pub fn objective<T: Scalar>(
    g: &mut Graph<T>,
    enc: &DualEncoder<T>,
    w: &EncoderWeights<Var>,
    tv: &TunedParams<Var>,
    cfg: &TrainConfig,
    class_tokens: &[Vec<u32>],
    inputs: &StepInputs,
) -> Result<Objective> {
    let ecfg = &enc.config;
    let cc_cfg = &cfg.consistency;
    let labels = &inputs.labels;
    let schedule = tv.prompts.as_ref().map(|p| build_schedule(g, p)).transpose()?;
    let tuned_refs: Vec<&[f32]> = inputs.tuned_views.iter().map(Vec::as_slice).collect();
    let tau = enc.tau();
    let (class_emb, img_emb) = tuned_embeddings(g, w, enc, tv, schedule.as_ref(), class_tokens, &tuned_refs)?;
    let ce = match cfg.supervised_path {
        SupervisedPath::Tuned => supervised_loss(g, img_emb, class_emb, labels, tau)?,
        SupervisedPath::Frozen => {
            let c = text_forward(g, &w.text, ecfg, class_tokens, None)?;
            let i = image_forward(g, &w.image, ecfg, &tuned_refs, None)?;
            supervised_loss(g, i, c, labels, tau)?
        }
    };
    if !cc_cfg.enabled {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok(Objective { ce, cc: zero, total: ce });
    }
    let text = if cc_cfg.modality.text() {
        let frozen = text_forward(g, &w.text, ecfg, &inputs.descriptions, None)?;
        let tuned = g.gather_rows(class_emb, labels)?;
        Some((frozen, tuned))
    } else {
        None
    };
    let image = if cc_cfg.modality.image() {
        let refs: Vec<&[f32]> = inputs.frozen_views.iter().map(Vec::as_slice).collect();
        Some((image_forward(g, &w.image, ecfg, &refs, None)?, img_emb))
    } else {
        None
    };
    let mut cc = consistency_loss(g, cc_cfg.criterion, cc_cfg.modality, text, image)?;
    if cfg.detach_consistency {
        let v = g.value(cc).clone();
        cc = g.constant(v);
    }
    let total = total_loss(g, ce, cc, cfg.lambda)?;
    Ok(Objective { ce, cc, total })
}

/// Tuned class embeddings `[C, e]` and tuned image embeddings `[B, e]`.
pub fn tuned_embeddings<T: Scalar>(
    g: &mut Graph<T>,
    w: &EncoderWeights<Var>,
    enc: &DualEncoder<T>,
    tv: &TunedParams<Var>,
    schedule: Option<&PromptSchedule>,
    class_tokens: &[Vec<u32>],
    images: &[&[f32]],
) -> Result<(Var, Var)> {
    let c = tuned_text(g, w, &enc.config, tv, schedule, class_tokens)?;
    let i = tuned_image(g, w, &enc.config, tv, schedule, images)?;
    Ok((c, i))
}

/// Runs the whole few-shot split through the chosen supervised path with
/// clean inputs and returns the mean cross-entropy.
pub fn train_split_ce<T: Scalar>(enc: &DualEncoder<T>, params: &TunedParams<Tensor<T>>, cfg: &TrainConfig, split: &FewShotSplit) -> Result<f64> {
    let tokens = class_tokens(enc, split)?;
    let mut g = Graph::eval();
    let w = enc.bind(&mut g, false);
    let tv = params.bind(&mut g, false);
    let schedule = tv.prompts.as_ref().map(|p| build_schedule(&mut g, p)).transpose()?;
    let images: Vec<&[f32]> = split.records.iter().map(|r| r.pixels.as_slice()).collect();
    let ce = match cfg.supervised_path {
        SupervisedPath::Tuned => {
            let (c, i) = tuned_embeddings(&mut g, &w, enc, &tv, schedule.as_ref(), &tokens, &images)?;
            supervised_loss(&mut g, i, c, &split.labels, enc.tau())?
        }
        SupervisedPath::Frozen => {
            let c = text_forward(&mut g, &w.text, &enc.config, &tokens, None)?;
            let i = image_forward(&mut g, &w.image, &enc.config, &images, None)?;
            supervised_loss(&mut g, i, c, &split.labels, enc.tau())?
        }
    };
    Ok(g.value(ce).item().as_f64())
}

fn class_tokens<T: Scalar>(enc: &DualEncoder<T>, split: &FewShotSplit) -> Result<Vec<Vec<u32>>> {
    split
        .class_names
        .iter()
        .map(|c| enc.tokenizer.encode_strict(&template(c)))
        .collect()
}

/// Mean `‖tuned − frozen‖` over clean inputs of the few-shot split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    /// Over the template text of every split class.
    pub text: f64,
    /// Over every split image.
    pub image: f64,
    /// Average of the two branches.
    pub mean: f64,
}

pub fn embedding_deviation<T: Scalar>(enc: &DualEncoder<T>, params: &TunedParams<Tensor<T>>, split: &FewShotSplit) -> Result<Deviation> {
    let tokens = class_tokens(enc, split)?;
    let images: Vec<&[f32]> = split.records.iter().map(|r| r.pixels.as_slice()).collect();
    let mut g = Graph::eval();
    let w = enc.bind(&mut g, false);
    let tv = params.bind(&mut g, false);
    let schedule = tv.prompts.as_ref().map(|p| build_schedule(&mut g, p)).transpose()?;
    let (tc, ti) = tuned_embeddings(&mut g, &w, enc, &tv, schedule.as_ref(), &tokens, &images)?;
    let fc = text_forward(&mut g, &w.text, &enc.config, &tokens, None)?;
    let fi = image_forward(&mut g, &w.image, &enc.config, &images, None)?;
    let mean_dist = |a: &Tensor<T>, b: &Tensor<T>| {
        (0..a.rows())
            .map(|r| {
                a.row(r)
                    .iter()
                    .zip(b.row(r))
                    .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / a.rows() as f64
    };
    let text = mean_dist(g.value(tc), g.value(fc));
    let image = mean_dist(g.value(ti), g.value(fi));
    Ok(Deviation {
        text,
        image,
        mean: 0.5 * (text + image),
    })
}

/// Fine-tunes prompts and adapters over a frozen backbone.
pub fn finetune<T: Scalar>(
    backbone: &DualEncoder<T>,
    backbone_hash: &str,
    dataset_hash: &str,
    split: &FewShotSplit,
    cfg: &TrainConfig,
) -> Result<FinetuneCheckpoint<T>> {
    let mut trainer = Trainer::new(backbone, split, cfg.clone())?;
    trainer.run()?;
    trainer.finish(backbone_hash, dataset_hash)
}
