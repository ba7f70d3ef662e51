//! Zero-shot and prompted prediction, the three evaluation harnesses and
//! their report tables.

mod table;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{template, Dataset, ImageRecord, Pool};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::prompt::{build_schedule, tuned_image, tuned_text, TunedParams};
use crate::scalar::Scalar;
use crate::store::{combine_hashes, content_hash, encode_f32};
use crate::tensor::Tensor;
use crate::trainer::{FinetuneCheckpoint, TrainConfig};

pub use table::{Cell, Table};

/// Images per forward pass when embedding an evaluation pool.
const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub index: usize,
    pub probs: Vec<f64>,
}

/// Softmax of `sims / tau`; the argmax breaks ties toward the lowest index.
pub fn prediction_from_similarities(sims: &[f64], tau: f64) -> Prediction {
    let mut index = 0;
    for (k, &s) in sims.iter().enumerate() {
        if s > sims[index] {
            index = k;
        }
    }
    let max = sims.get(index).copied().unwrap_or(0.0);
    let exps: Vec<f64> = sims.iter().map(|s| ((s - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    Prediction {
        index,
        probs: exps.into_iter().map(|e| e / z).collect(),
    }
}

/// `2ab / (a + b)`; both zero gives 0 with a warning.
pub fn harmonic_mean(base: f64, novel: f64) -> f64 {
    if base == 0.0 && novel == 0.0 {
        log::warn!("harmonic mean of two zero accuracies taken as 0");
        return 0.0;
    }
    2.0 * base * novel / (base + novel)
}

/// Median and mean of per-seed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub median: f64,
    pub mean: f64,
}

pub fn summarize(values: &[f64]) -> Option<SeedSummary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(SeedSummary {
        median,
        mean: v.iter().sum::<f64>() / n as f64,
    })
}

/// A backbone with optional tuned prompts and adapters. With none it is
/// the zero-shot classifier.
#[derive(Debug, Clone)]
pub struct Classifier<'a, T> {
    pub backbone: &'a DualEncoder<T>,
    pub tuned: TunedParams<Tensor<T>>,
    pub config: Option<TrainConfig>,
}

impl<'a, T: Scalar> Classifier<'a, T> {
    pub fn zero_shot(backbone: &'a DualEncoder<T>) -> Self {
        Classifier {
            backbone,
            tuned: TunedParams {
                prompts: None,
                text_adapter: None,
                image_adapter: None,
            },
            config: None,
        }
    }

    pub fn from_checkpoint(backbone: &'a DualEncoder<T>, ck: &FinetuneCheckpoint<T>) -> Self {
        Classifier {
            backbone,
            tuned: ck.tuned.clone(),
            config: Some(ck.config.clone()),
        }
    }

    /// Every word of every class template is in the vocabulary.
    pub fn check_vocabulary(&self, names: &[String]) -> Result<()> {
        let mut unknown: Vec<String> = names
            .iter()
            .flat_map(|n| self.backbone.tokenizer.unknown_words(&template(n)))
            .collect();
        unknown.sort();
        unknown.dedup();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::VocabularyMiss(unknown))
        }
    }

    /// Unit-norm tuned text embeddings of the class templates, `[C, e]`.
    pub fn class_embeddings(&self, names: &[String]) -> Result<Tensor<T>> {
        if names.is_empty() {
            return Err(Error::Empty("class set".into()));
        }
        self.check_vocabulary(names)?;
        let tokens: Vec<Vec<u32>> = names.iter().map(|n| self.backbone.tokenizer.encode(&template(n))).collect();
        let mut g = Graph::eval();
        let w = self.backbone.bind(&mut g, false);
        let tv = self.tuned.bind(&mut g, false);
        let schedule = tv.prompts.as_ref().map(|p| build_schedule(&mut g, p)).transpose()?;
        let c = tuned_text(&mut g, &w, &self.backbone.config, &tv, schedule.as_ref(), &tokens)?;
        Ok(g.value(c).clone())
    }

    /// Unit-norm tuned image embeddings, `[N, e]`.
    pub fn image_embeddings(&self, images: &[&[f32]]) -> Result<Tensor<T>> {
        let e = self.backbone.config.embed_dim;
        let mut data = Vec::with_capacity(images.len() * e);
        for chunk in images.chunks(CHUNK) {
            let mut g = Graph::eval();
            let w = self.backbone.bind(&mut g, false);
            let tv = self.tuned.bind(&mut g, false);
            let schedule = tv.prompts.as_ref().map(|p| build_schedule(&mut g, p)).transpose()?;
            let i = tuned_image(&mut g, &w, &self.backbone.config, &tv, schedule.as_ref(), chunk)?;
            data.extend_from_slice(g.value(i).data());
        }
        Tensor::new(vec![images.len(), e], data)
    }

    fn predict_embedded(&self, image: &[T], classes: &Tensor<T>) -> Prediction {
        let sims: Vec<f64> = (0..classes.rows())
            .map(|c| classes.row(c).iter().zip(image).map(|(a, b)| (*a * *b).as_f64()).sum())
            .collect();
        prediction_from_similarities(&sims, self.backbone.tau())
    }

    pub fn predict(&self, image: &[f32], names: &[String]) -> Result<Prediction> {
        let classes = self.class_embeddings(names)?;
        let img = self.image_embeddings(&[image])?;
        Ok(self.predict_embedded(img.row(0), &classes))
    }

    /// Predictions for many images against one class set.
    pub fn classify(&self, images: &[&[f32]], names: &[String]) -> Result<Vec<Prediction>> {
        let classes = self.class_embeddings(names)?;
        let imgs = self.image_embeddings(images)?;
        Ok((0..images.len()).map(|i| self.predict_embedded(imgs.row(i), &classes)).collect())
    }

    /// Hash of every backbone and tuned tensor plus the training config.
    pub fn fingerprint(&self) -> Result<String> {
        let mut entries: Vec<(String, String)> = self
            .backbone
            .named_weights()
            .into_iter()
            .chain(self.tuned.named())
            .map(|(n, t)| (n, content_hash(&encode_f32(t))))
            .collect();
        if let Some(cfg) = &self.config {
            entries.push(("config".into(), content_hash(serde_json::to_string(cfg)?.as_bytes())));
        }
        Ok(combine_hashes(entries.iter().map(|(a, b)| (a.as_str(), b.as_str()))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub novel: bool,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

/// Percent correct over `records`, predicting among `classes` (ids into
/// the dataset's class list). Also returns per-class counts.
pub fn pool_accuracy<T: Scalar>(
    cls: &Classifier<'_, T>,
    dataset: &Dataset,
    records: &[&ImageRecord],
    classes: &[usize],
) -> Result<(f64, Vec<(usize, usize)>)> {
    if records.is_empty() {
        return Err(Error::Empty(format!("evaluation pool of `{}`", dataset.name())));
    }
    let all = dataset.class_names();
    let names: Vec<String> = classes.iter().map(|&c| all[c].clone()).collect();
    let images: Vec<&[f32]> = records.iter().map(|r| r.pixels.as_slice()).collect();
    let preds = cls.classify(&images, &names)?;
    let mut counts = vec![(0usize, 0usize); classes.len()];
    for (r, p) in records.iter().zip(&preds) {
        let label = classes
            .iter()
            .position(|&c| c == r.class_id as usize)
            .ok_or_else(|| Error::UnknownClass(all[r.class_id as usize].clone()))?;
        counts[label].1 += 1;
        if p.index == label {
            counts[label].0 += 1;
        }
    }
    let correct: usize = counts.iter().map(|c| c.0).sum();
    Ok((100.0 * correct as f64 / records.len() as f64, counts))
}

/// Base and novel accuracy on held-out test images plus their harmonic
/// mean. Percentages are stored at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub pool: Pool,
    pub base_classes: Vec<String>,
    pub novel_classes: Vec<String>,
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn table(&self) -> Table {
        let mut t = Table::new(format!("base-to-novel: {}", self.dataset), &["dataset", "base", "novel", "hm"]);
        t.push(vec![self.dataset.as_str().into(), self.base_acc.into(), self.novel_acc.into(), self.hm.into()]);
        t
    }

    pub fn per_class_table(&self) -> Table {
        let mut t = Table::new("per-class accuracy", &["class", "split", "correct", "total", "accuracy"]);
        for c in &self.per_class {
            t.push(vec![
                c.class.as_str().into(),
                if c.novel { "novel" } else { "base" }.into(),
                c.correct.to_string().into(),
                c.total.to_string().into(),
                c.accuracy.into(),
            ]);
        }
        t
    }
}

pub fn base_to_novel_eval<T: Scalar>(cls: &Classifier<'_, T>, dataset: &Dataset) -> Result<EvalReport> {
    let split = &dataset.manifest.split;
    let names = dataset.class_names();
    let overlap: Vec<String> = split.base.iter().filter(|c| split.novel.contains(c)).map(|&c| names[c].clone()).collect();
    if !overlap.is_empty() {
        return Err(Error::ClassOverlap(overlap));
    }
    let mut per_class = Vec::new();
    let mut accs = [0.0; 2];
    for (k, (classes, novel)) in [(&split.base, false), (&split.novel, true)].into_iter().enumerate() {
        if classes.is_empty() {
            return Err(Error::Empty(format!("{} class set of `{}`", if novel { "novel" } else { "base" }, dataset.name())));
        }
        let records = dataset.select(Pool::Test, classes);
        let (acc, counts) = pool_accuracy(cls, dataset, &records, classes)?;
        accs[k] = acc;
        for (&c, (correct, total)) in classes.iter().zip(counts) {
            per_class.push(ClassAccuracy {
                class: names[c].clone(),
                novel,
                correct,
                total,
                accuracy: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
            });
        }
    }
    let fingerprint = combine_hashes([("model", cls.fingerprint()?.as_str()), ("dataset", dataset.content_hash()?.as_str())]);
    Ok(EvalReport {
        dataset: dataset.name().to_string(),
        pool: Pool::Test,
        base_classes: split.base.iter().map(|&c| names[c].clone()).collect(),
        novel_classes: split.novel.iter().map(|&c| names[c].clone()).collect(),
        base_acc: accs[0],
        novel_acc: accs[1],
        hm: harmonic_mean(accs[0], accs[1]),
        per_class,
        fingerprint,
    })
}

/// Per-dataset accuracies with their average over the listed rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    pub caption: String,
    /// Evaluated on the source itself; absent for cross-dataset tables.
    pub source: Option<(String, f64)>,
    pub rows: Vec<(String, f64)>,
    /// Mean over `rows`; absent when there are none.
    pub average: Option<f64>,
}

impl TransferTable {
    pub fn table(&self) -> Table {
        let mut columns: Vec<String> = Vec::new();
        let mut cells: Vec<Cell> = Vec::new();
        columns.push("source".into());
        match &self.source {
            Some((name, acc)) => {
                columns.push(name.clone());
                cells.push(self.caption.as_str().into());
                cells.push((*acc).into());
            }
            None => cells.push(self.caption.as_str().into()),
        }
        for (name, acc) in &self.rows {
            columns.push(name.clone());
            cells.push((*acc).into());
        }
        columns.push("average".into());
        cells.push(self.average.into());
        let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
        let mut t = Table::new(String::new(), &cols);
        t.push(cells);
        t
    }
}

fn average(rows: &[(String, f64)]) -> Option<f64> {
    (!rows.is_empty()).then(|| rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64)
}

/// Zero-shot transfer of a source-tuned classifier: accuracy over all
/// classes of each target's test pool.
pub fn cross_dataset_eval<T: Scalar>(cls: &Classifier<'_, T>, source_id: &str, targets: &[&Dataset]) -> Result<TransferTable> {
    let mut unknown = Vec::new();
    for t in targets {
        if let Err(Error::VocabularyMiss(words)) = cls.check_vocabulary(&t.class_names()) {
            unknown.extend(words);
        }
    }
    if !unknown.is_empty() {
        unknown.sort();
        unknown.dedup();
        return Err(Error::VocabularyMiss(unknown));
    }
    let mut rows = Vec::new();
    for t in targets {
        let classes: Vec<usize> = (0..t.manifest.classes.len()).collect();
        let records = t.select(Pool::Test, &classes);
        rows.push((t.name().to_string(), pool_accuracy(cls, t, &records, &classes)?.0));
    }
    Ok(TransferTable {
        caption: source_id.to_string(),
        source: None,
        average: average(&rows),
        rows,
    })
}

/// Accuracy on the base classes of the source and of each shifted variant.
pub fn domain_gen_eval<T: Scalar>(cls: &Classifier<'_, T>, source: &Dataset, variants: &[&Dataset]) -> Result<TransferTable> {
    let names = source.class_names();
    for v in variants {
        if v.class_names() != names {
            return Err(Error::ClassMismatch(format!("`{}` does not share the classes of `{}`", v.name(), source.name())));
        }
        if v.manifest.split.base != source.manifest.split.base {
            return Err(Error::ClassMismatch(format!("`{}` has a different base class set", v.name())));
        }
    }
    let base = &source.manifest.split.base;
    let acc = |d: &Dataset| pool_accuracy(cls, d, &d.select(Pool::Test, base), base).map(|r| r.0);
    let source_acc = acc(source)?;
    let rows = variants.iter().map(|v| Ok((v.name().to_string(), acc(v)?))).collect::<Result<Vec<_>>>()?;
    Ok(TransferTable {
        caption: source.name().to_string(),
        source: Some((source.name().to_string(), source_acc)),
        average: average(&rows),
        rows,
    })
}

#[cfg(test)]
mod tests;
