//! Small fixtures shared by unit tests.

use crate::data::{default_suite, generate_dataset, make_fewshot_split, template, Dataset, FewShotSplit, SuiteConfig};
use crate::encoder::{DualEncoder, EncoderConfig, Tokenizer};

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        width: 16,
        heads: 2,
        text_len: 16,
        patch_grid: 2,
        image_size: 8,
        channels: 3,
        embed_dim: 8,
        mlp_ratio: 2,
    }
}

pub fn tiny_suite_config() -> SuiteConfig {
    SuiteConfig {
        image_size: 8,
        pretrain_per_class: 2,
        train_per_class: 6,
        val_per_class: 1,
        test_per_class: 5,
        shots: 4,
        ..SuiteConfig::default()
    }
}

pub fn tiny_source() -> Dataset {
    let suite = default_suite(&tiny_suite_config()).unwrap();
    generate_dataset(&suite.source).unwrap()
}

pub fn tokenizer_for(datasets: &[&Dataset]) -> Tokenizer {
    let mut sentences = Vec::new();
    for d in datasets {
        for c in &d.manifest.classes {
            sentences.push(template(&c.name));
            sentences.extend(c.descriptions.iter().cloned());
        }
    }
    Tokenizer::build(sentences.iter().map(|s| s.as_str()))
}

/// Randomly initialized, storage-rounded, frozen backbone.
pub fn tiny_backbone(ds: &Dataset, seed: u64) -> DualEncoder<f64> {
    let mut enc = DualEncoder::init(tiny_encoder_config(), tokenizer_for(&[ds]), seed).unwrap();
    enc.round_to_storage();
    enc.clone_frozen()
}

pub fn tiny_split(ds: &Dataset, seed: u64) -> FewShotSplit {
    make_fewshot_split(ds, 4, seed).unwrap()
}
