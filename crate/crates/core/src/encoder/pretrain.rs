use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{image_forward, text_forward, DualEncoder, TAU_RANGE};
use crate::autodiff::{Graph, Var};
use crate::data::{template, PretrainSplit};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Distinct classes per batch; capped at the number of classes.
    pub batch_classes: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
    /// Evaluate held-out retrieval every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 150,
            batch_classes: 24,
            lr: 2e-3,
            warmup: 100,
            seed: 0,
            eval_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// `(step, held-out zero-shot accuracy)` pairs.
    pub held_out: Vec<(usize, f64)>,
    pub tau: f64,
}

/// Symmetric in-batch InfoNCE between unit-norm image and text rows.
pub fn contrastive_loss<T: Scalar>(g: &mut Graph<T>, img: Var, txt: Var, logit_scale: Var) -> Result<Var> {
    let n = g.value(img).shape()[0];
    let tt = g.transpose(txt)?;
    let sims = g.matmul(img, tt)?;
    let scale = g.exp(logit_scale)?;
    let logits = g.mul(sims, scale)?;
    let labels: Vec<usize> = (0..n).collect();
    let a = g.cross_entropy(logits, &labels)?;
    let lt = g.transpose(logits)?;
    let b = g.cross_entropy(lt, &labels)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, T::of(0.5)))
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.98;
    const EPS: f64 = 1e-8;

    fn step<T: Scalar>(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Option<Tensor<T>>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m[j] = Self::B1 * m[j] + (1.0 - Self::B1) * gj;
                v[j] = Self::B2 * v[j] + (1.0 - Self::B2) * gj * gj;
                let upd = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + Self::EPS);
                *x = T::of(x.as_f64() - upd);
            }
        }
    }
}

/// Zero-shot accuracy of `items` against the template caption of every class.
pub fn retrieval_accuracy<T: Scalar>(enc: &DualEncoder<T>, split: &PretrainSplit, held_out: bool) -> Result<f64> {
    let items = if held_out { &split.held_out } else { &split.train };
    if items.is_empty() {
        return Err(Error::Empty("retrieval items".into()));
    }
    let texts: Vec<String> = split.class_names.iter().map(|c| template(c)).collect();
    let txt = enc.class_text_embeddings(&texts)?;
    let mut correct = 0;
    for chunk in items.chunks(64) {
        let mut g = Graph::eval();
        let w = enc.bind(&mut g, false);
        let imgs: Vec<&[f32]> = chunk.iter().map(|i| i.record.pixels.as_slice()).collect();
        let e = image_forward(&mut g, &w.image, &enc.config, &imgs, None)?;
        let e = g.value(e);
        for (r, item) in chunk.iter().enumerate() {
            let row = e.row(r);
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..txt.rows() {
                let s: f64 = row.iter().zip(txt.row(c)).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
                if s > best.1 {
                    best = (c, s);
                }
            }
            correct += usize::from(best.0 == item.class);
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Contrastive pre-training with Adam on batches of distinct classes.
///
/// Each class in a batch contributes one random image and one random
/// caption. The temperature is learned and clamped to [`TAU_RANGE`]. On
/// return every weight is rounded to storage precision so a checkpoint
/// reload reproduces the in-memory model exactly.
pub fn contrastive_pretrain<T: Scalar>(
    enc: &mut DualEncoder<T>,
    split: &PretrainSplit,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if enc.frozen {
        return Err(Error::Config("cannot pre-train a frozen encoder".into()));
    }
    if cfg.steps == 0 || cfg.lr <= 0.0 || cfg.batch_classes < 2 {
        return Err(Error::Config("pre-training needs steps > 0, lr > 0 and batch_classes >= 2".into()));
    }

    let captions: Vec<Vec<Vec<u32>>> = split
        .captions
        .iter()
        .map(|cs| cs.iter().map(|c| enc.tokenizer.encode_strict(c)).collect())
        .collect::<Result<_>>()?;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); split.num_classes()];
    for (i, it) in split.train.iter().enumerate() {
        by_class[it.class].push(i);
    }
    let classes: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    let batch = cfg.batch_classes.min(classes.len());
    if batch < 2 {
        return Err(Error::Empty("pre-training classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam {
        m: Vec::new(),
        v: Vec::new(),
        t: 0,
    };
    let (lo, hi) = ((1.0 / TAU_RANGE.1).ln(), (1.0 / TAU_RANGE.0).ln());
    let mut report = PretrainReport {
        steps: cfg.steps,
        losses: Vec::with_capacity(cfg.steps),
        held_out: Vec::new(),
        tau: enc.tau(),
    };
    for step in 0..cfg.steps {
        let picked: Vec<usize> = classes.choose_multiple(&mut rng, batch).copied().collect();
        let imgs: Vec<&[f32]> = picked
            .iter()
            .map(|&c| split.train[by_class[c][rng.gen_range(0..by_class[c].len())]].record.pixels.as_slice())
            .collect();
        let seqs: Vec<Vec<u32>> = picked
            .iter()
            .map(|&c| captions[c][rng.gen_range(0..captions[c].len())].clone())
            .collect();
        let mut g = Graph::new();
        let w = enc.bind(&mut g, true);
        let ie = image_forward(&mut g, &w.image, &enc.config, &imgs, None)?;
        let te = text_forward(&mut g, &w.text, &enc.config, &seqs, None)?;
        let loss = contrastive_loss(&mut g, ie, te, w.logit_scale)?;
        let lv = g.value(loss).item().as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("pre-training loss at step {step}")));
        }
        g.backward(loss)?;
        let grads: Vec<Option<Tensor<T>>> = w.named().into_iter().map(|(_, v)| g.grad(*v)).collect();
        let warm = ((step + 1) as f64 / cfg.warmup.max(1) as f64).min(1.0);
        let progress = step as f64 / cfg.steps as f64;
        let lr = cfg.lr * warm * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        adam.step(&mut enc.weights.named_mut(), &grads, lr);
        let ls = enc.weights.logit_scale.data_mut();
        ls[0] = T::of(ls[0].as_f64().clamp(lo, hi));
        report.losses.push(lv);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && !split.held_out.is_empty() {
            let acc = retrieval_accuracy(enc, split, true)?;
            log::info!("pretrain step {} loss {lv:.4} held-out {acc:.3}", step + 1);
            report.held_out.push((step + 1, acc));
        }
    }
    enc.round_to_storage();
    report.tau = enc.tau();
    Ok(report)
}

impl<T: Scalar> DualEncoder<T> {
    /// Rounds every weight through the on-disk precision.
    pub fn round_to_storage(&mut self) {
        for (_, t) in self.weights.named_mut() {
            *t = t.round_to_storage();
        }
    }
}
