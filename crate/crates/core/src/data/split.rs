use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{caption_variants, template, Dataset, ImageRecord, Pool};
use crate::error::{Error, Result};

/// Exactly `shots` training images per base class.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    pub dataset: String,
    /// Base class ids in the source dataset; labels index into this list.
    pub class_ids: Vec<usize>,
    pub class_names: Vec<String>,
    pub descriptions: Vec<Vec<String>>,
    pub records: Vec<ImageRecord>,
    pub labels: Vec<usize>,
    /// Per base class, the chosen positions within that class's train pool.
    pub chosen: Vec<Vec<usize>>,
}

impl FewShotSplit {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_ids.len()
    }
}

/// Samples `shots` train-pool images per base class without replacement.
pub fn make_fewshot_split(dataset: &Dataset, shots: usize, seed: u64) -> Result<FewShotSplit> {
    let m = &dataset.manifest;
    if m.split.base.is_empty() {
        return Err(Error::Empty(format!("base class set of `{}`", m.name)));
    }
    if shots == 0 {
        return Err(Error::Config("shots must be at least 1".into()));
    }
    let mut split = FewShotSplit {
        dataset: m.name.clone(),
        class_ids: m.split.base.clone(),
        class_names: Vec::new(),
        descriptions: Vec::new(),
        records: Vec::new(),
        labels: Vec::new(),
        chosen: Vec::new(),
    };
    for (label, &class) in m.split.base.iter().enumerate() {
        let pool = dataset.select(Pool::Train, &[class]);
        if pool.len() < shots {
            return Err(Error::InsufficientSamples {
                class,
                available: pool.len(),
                requested: shots,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64 + 1) << 20));
        let mut picked = sample(&mut rng, pool.len(), shots).into_vec();
        picked.sort_unstable();
        for &i in &picked {
            split.records.push(pool[i].clone());
            split.labels.push(label);
        }
        split.chosen.push(picked);
        split.class_names.push(m.classes[class].name.clone());
        split.descriptions.push(m.classes[class].descriptions.clone());
    }
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct PretrainItem {
    pub record: ImageRecord,
    /// Index into [`PretrainSplit::class_names`].
    pub class: usize,
}

/// Image/caption pairs for contrastive pre-training, pooled across datasets.
#[derive(Debug, Clone, Default)]
pub struct PretrainSplit {
    pub class_names: Vec<String>,
    /// Template, phrasing variants and descriptions, per class.
    pub captions: Vec<Vec<String>>,
    pub train: Vec<PretrainItem>,
    pub held_out: Vec<PretrainItem>,
}

impl PretrainSplit {
    /// Pretrain pools become training pairs, val pools the held-out pairs.
    pub fn from_datasets(datasets: &[&Dataset]) -> Result<Self> {
        let mut split = PretrainSplit::default();
        for ds in datasets {
            let offset = split.class_names.len();
            for c in &ds.manifest.classes {
                if split.class_names.contains(&c.name) {
                    return Err(Error::Config(format!(
                        "class `{}` appears in more than one pre-training dataset",
                        c.name
                    )));
                }
                split.class_names.push(c.name.clone());
                let mut caps = vec![template(&c.name)];
                caps.extend(caption_variants(&c.name));
                caps.extend(c.descriptions.iter().cloned());
                split.captions.push(caps);
            }
            for r in &ds.records {
                let item = PretrainItem {
                    record: r.clone(),
                    class: offset + r.class_id as usize,
                };
                match r.pool {
                    Pool::Pretrain => split.train.push(item),
                    Pool::Val => split.held_out.push(item),
                    _ => {}
                }
            }
        }
        if split.train.is_empty() {
            return Err(Error::Empty("pre-training split".into()));
        }
        Ok(split)
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}
