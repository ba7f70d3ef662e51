use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    describe, generate_dataset, make_shifted_variant, ClassAttributes, ClassSpec, Dataset,
    DatasetManifest, GeneratorParams, Orientation, Palette, Pattern, Shift, SplitSpec,
    FORMAT_VERSION,
};
use crate::error::{Error, Result};
use crate::store::write_bytes;

const SOURCE_NAMES: [&str; 12] = [
    "zorb", "quill", "mave", "tesk", "brin", "plov", "dakk", "fenn", "gruv", "hosk", "jilt", "kemp",
];
const TARGET_NAMES: [[&str; 6]; 3] = [
    ["lurn", "mipp", "nobb", "orrk", "pell", "quon"],
    ["rask", "sorn", "tupp", "ulex", "vorn", "wimm"],
    ["yarr", "zeph", "abbo", "cint", "dulo", "eppa"],
];
const TARGET_IDS: [&str; 3] = ["alpha", "beta", "gamma"];

/// Knobs of the default dataset suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub image_size: usize,
    pub noise: f64,
    pub color_jitter: f64,
    pub base_classes: usize,
    pub pretrain_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub shots: usize,
    /// Shifts applied to the source to build domain-generalization variants.
    pub shifts: Vec<Shift>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 7,
            image_size: 32,
            noise: 0.08,
            color_jitter: 0.08,
            base_classes: 8,
            pretrain_per_class: 48,
            train_per_class: 20,
            val_per_class: 6,
            test_per_class: 30,
            shots: 16,
            shifts: vec![
                Shift::PaletteShift,
                Shift::Noise { sigma: 0.15 },
                Shift::StyleRemap,
            ],
        }
    }
}

/// Manifests of the default suite: one source family and three targets.
#[derive(Debug, Clone)]
pub struct DefaultSuite {
    pub config: SuiteConfig,
    pub source: DatasetManifest,
    pub targets: Vec<DatasetManifest>,
}

/// Generated datasets of a [`DefaultSuite`].
#[derive(Debug, Clone)]
pub struct GeneratedSuite {
    pub source: Dataset,
    pub targets: Vec<Dataset>,
    pub variants: Vec<Dataset>,
}

fn attribute_pool(seed: u64) -> Vec<ClassAttributes> {
    let mut all = Vec::new();
    for pattern in Pattern::ALL {
        for orientation in Orientation::ALL {
            for palette in Palette::ALL {
                for frequency in [2.0, 4.5] {
                    all.push(ClassAttributes {
                        pattern,
                        orientation,
                        palette,
                        frequency,
                    });
                }
            }
        }
    }
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    all
}

fn class(name: &str, attributes: ClassAttributes) -> ClassSpec {
    ClassSpec {
        name: name.to_string(),
        attributes,
        descriptions: describe(name, &attributes),
    }
}

pub fn default_suite(config: &SuiteConfig) -> Result<DefaultSuite> {
    if config.base_classes == 0 || config.base_classes >= SOURCE_NAMES.len() {
        return Err(Error::Config(format!(
            "base_classes must be in 1..{}",
            SOURCE_NAMES.len()
        )));
    }
    let mut attrs = attribute_pool(config.seed).into_iter();
    let generator = |seed: u64| GeneratorParams {
        image_size: config.image_size,
        noise: config.noise,
        color_jitter: config.color_jitter,
        seed,
        shift: None,
    };
    let classes: Vec<ClassSpec> = SOURCE_NAMES
        .iter()
        .map(|n| class(n, attrs.next().expect("enough combinations")))
        .collect();
    let source = DatasetManifest {
        format_version: FORMAT_VERSION,
        name: "source".into(),
        split: SplitSpec {
            base: (0..config.base_classes).collect(),
            novel: (config.base_classes..classes.len()).collect(),
            pretrain_per_class: config.pretrain_per_class,
            train_per_class: config.train_per_class,
            val_per_class: config.val_per_class,
            test_per_class: config.test_per_class,
            shots: config.shots,
        },
        classes,
        generator: generator(config.seed),
    };
    let targets = TARGET_NAMES
        .iter()
        .zip(TARGET_IDS)
        .enumerate()
        .map(|(i, (names, id))| {
            let classes: Vec<ClassSpec> = names
                .iter()
                .map(|n| class(n, attrs.next().expect("enough combinations")))
                .collect();
            DatasetManifest {
                format_version: FORMAT_VERSION,
                name: format!("target_{id}"),
                split: SplitSpec {
                    base: (0..classes.len()).collect(),
                    novel: Vec::new(),
                    pretrain_per_class: config.pretrain_per_class,
                    train_per_class: 0,
                    val_per_class: config.val_per_class,
                    test_per_class: config.test_per_class,
                    shots: config.shots,
                },
                classes,
                generator: generator(config.seed.wrapping_add(1000 * (i as u64 + 1))),
            }
        })
        .collect();
    Ok(DefaultSuite {
        config: config.clone(),
        source,
        targets,
    })
}

impl DefaultSuite {
    pub fn generate(&self) -> Result<GeneratedSuite> {
        let source = generate_dataset(&self.source)?;
        let targets = self
            .targets
            .iter()
            .map(generate_dataset)
            .collect::<Result<Vec<_>>>()?;
        let variants = self
            .config
            .shifts
            .iter()
            .map(|s| make_shifted_variant(&source, *s))
            .collect::<Result<Vec<_>>>()?;
        Ok(GeneratedSuite {
            source,
            targets,
            variants,
        })
    }
}

/// Index of a suite written to disk; paths are relative to the suite root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteIndex {
    pub source: String,
    pub targets: Vec<String>,
    pub variants: Vec<String>,
}

impl GeneratedSuite {
    pub fn all(&self) -> impl Iterator<Item = &Dataset> {
        std::iter::once(&self.source)
            .chain(&self.targets)
            .chain(&self.variants)
    }

    pub fn save(&self, root: &Path) -> Result<SuiteIndex> {
        let dir_name = |d: &Dataset| d.name().replace(['@', '(', ')'], "_");
        for d in self.all() {
            d.save(&root.join(dir_name(d)))?;
        }
        let index = SuiteIndex {
            source: dir_name(&self.source),
            targets: self.targets.iter().map(dir_name).collect(),
            variants: self.variants.iter().map(dir_name).collect(),
        };
        write_bytes(&root.join("suite.json"), serde_json::to_string_pretty(&index)?.as_bytes())?;
        Ok(index)
    }

    pub fn load(root: &Path) -> Result<GeneratedSuite> {
        let path = root.join("suite.json");
        let index: SuiteIndex = serde_json::from_slice(&crate::store::read_bytes(&path)?)?;
        let load = |name: &String| Dataset::load(&root.join(name));
        Ok(GeneratedSuite {
            source: load(&index.source)?,
            targets: index.targets.iter().map(load).collect::<Result<_>>()?,
            variants: index.variants.iter().map(load).collect::<Result<_>>()?,
        })
    }
}
