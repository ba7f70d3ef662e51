//! Procedural synthetic image/text datasets.
//!
//! A dataset directory holds `manifest.json` and `images.bin`. The image
//! store is `b"CPDS"`, format version (`u32`), record count (`u32`), then per
//! record: class id (`u32`), sample seed (`u64`) and `image_size^2 * 3`
//! little-endian `f32` pixels in HWC order. All integers are little-endian.
//! Records are ordered by pool (pretrain, train, val, test), then class, then
//! index, so pool membership follows from the manifest counts.

mod render;
mod shift;
mod split;
mod suite;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::{content_hash, read_bytes, write_bytes};

pub use render::{render_image, Orientation, Palette, Pattern};
pub use shift::{make_shifted_variant, parse_shift, Shift};
pub use split::{make_fewshot_split, FewShotSplit, PretrainItem, PretrainSplit};
pub use suite::{default_suite, DefaultSuite, GeneratedSuite, SuiteConfig, SuiteIndex};

pub const FORMAT_VERSION: u32 = 1;
pub const MAGIC: &[u8; 4] = b"CPDS";
pub const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassAttributes {
    pub pattern: Pattern,
    pub orientation: Orientation,
    pub palette: Palette,
    /// Cycles across the image.
    pub frequency: f64,
}

impl ClassAttributes {
    pub fn scale_word(&self) -> &'static str {
        if self.frequency >= 3.0 {
            "fine"
        } else {
            "coarse"
        }
    }

    pub fn words(&self) -> [&'static str; 4] {
        [
            self.pattern.word(),
            self.orientation.word(),
            self.palette.word(),
            self.scale_word(),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub attributes: ClassAttributes,
    pub descriptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
    pub pretrain_per_class: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub shots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorParams {
    pub image_size: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Uniform per-channel jitter of palette colors.
    pub color_jitter: f64,
    pub seed: u64,
    /// Label-preserving transform applied after rendering.
    #[serde(default)]
    pub shift: Option<Shift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub name: String,
    pub classes: Vec<ClassSpec>,
    pub split: SplitSpec,
    pub generator: GeneratorParams,
}

/// The template sentence used for zero-shot class text.
pub fn template(class_name: &str) -> String {
    format!("a photo of a {class_name}")
}

/// Alternative phrasings used as extra pre-training captions. They place
/// the class word at varying positions.
pub fn caption_variants(class_name: &str) -> Vec<String> {
    [
        "{}",
        "a {}",
        "the {}",
        "a photo of the {}",
        "a small photo of a {}",
        "a blurry photo of the small {}",
        "there is a photo of a big {}",
    ]
    .iter()
    .map(|f| f.replace("{}", class_name))
    .collect()
}

/// Descriptive sentences by template expansion over class attributes.
pub fn describe(name: &str, a: &ClassAttributes) -> Vec<String> {
    let (p, o, c, s) = (
        a.pattern.word(),
        a.orientation.word(),
        a.palette.word(),
        a.scale_word(),
    );
    vec![
        format!("a photo of a {name}, a {o} {p} pattern in {c} tones"),
        format!("a photo of a {name}, which shows {c} {p} texture with {o} structure"),
        format!("a photo of a {name}, a {s} {p} design with {o} lines"),
    ]
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "dataset format version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.classes.is_empty() {
            return Err(Error::Empty(format!("class list of dataset `{}`", self.name)));
        }
        if g.image_size == 0 || !(g.noise >= 0.0) || !(g.color_jitter >= 0.0) {
            return Err(Error::Config(format!("bad generator parameters {g:?}")));
        }
        let n = self.classes.len();
        let s = &self.split;
        if let Some(bad) = s.base.iter().chain(&s.novel).find(|&&c| c >= n) {
            return Err(Error::Config(format!("split refers to class {bad} of {n}")));
        }
        let overlap: Vec<String> = s
            .base
            .iter()
            .filter(|c| s.novel.contains(c))
            .map(|&c| self.classes[c].name.clone())
            .collect();
        if !overlap.is_empty() {
            return Err(Error::ClassOverlap(overlap));
        }
        if let Some(c) = self.classes.iter().find(|c| c.descriptions.is_empty()) {
            return Err(Error::Config(format!("class `{}` has no description", c.name)));
        }
        let mut names: Vec<&str> = self.classes.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != n {
            return Err(Error::Config(format!("duplicate class names in `{}`", self.name)));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.generator.image_size * self.generator.image_size * CHANNELS
    }

    fn pool_count(&self, pool: Pool) -> usize {
        let s = &self.split;
        match pool {
            Pool::Pretrain => s.pretrain_per_class,
            Pool::Train => s.train_per_class,
            Pool::Val => s.val_per_class,
            Pool::Test => s.test_per_class,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Pretrain,
    Train,
    Val,
    Test,
}

impl Pool {
    pub const ALL: [Pool; 4] = [Pool::Pretrain, Pool::Train, Pool::Val, Pool::Test];

    fn tag(self) -> u64 {
        match self {
            Pool::Pretrain => 1,
            Pool::Train => 2,
            Pool::Val => 3,
            Pool::Test => 4,
        }
    }
}

/// One image with its label. Pixels are `[size, size, 3]` HWC in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub class_id: u32,
    pub sample_seed: u64,
    pub pool: Pool,
    pub pixels: Arc<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ImageRecord>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn sample_seed(dataset_seed: u64, pool: Pool, class: usize, index: usize) -> u64 {
    splitmix(splitmix(splitmix(dataset_seed) ^ pool.tag()) ^ ((class as u64) << 32 | index as u64))
}

/// Renders every record described by `manifest`.
pub fn generate_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    let g = &manifest.generator;
    let mut records = Vec::new();
    for pool in Pool::ALL {
        for (class_id, class) in manifest.classes.iter().enumerate() {
            for index in 0..manifest.pool_count(pool) {
                let seed = sample_seed(g.seed, pool, class_id, index);
                let mut pixels = render_image(&class.attributes, g, seed);
                if let Some(shift) = &g.shift {
                    shift.apply(&mut pixels, seed);
                }
                records.push(ImageRecord {
                    class_id: class_id as u32,
                    sample_seed: seed,
                    pool,
                    pixels: Arc::new(pixels),
                });
            }
        }
    }
    Ok(Dataset {
        manifest: manifest.clone(),
        records,
    })
}

impl Dataset {
    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn class_names(&self) -> Vec<String> {
        self.manifest.class_names()
    }

    pub fn pool(&self, pool: Pool) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.pool == pool)
    }

    /// Records of `pool` whose class is in `classes`.
    pub fn select(&self, pool: Pool, classes: &[usize]) -> Vec<&ImageRecord> {
        self.pool(pool)
            .filter(|r| classes.contains(&(r.class_id as usize)))
            .collect()
    }

    pub fn encode_images(&self) -> Vec<u8> {
        let px = self.manifest.pixels_per_image();
        let mut out = Vec::with_capacity(12 + self.records.len() * (12 + px * 4));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.class_id.to_le_bytes());
            out.extend_from_slice(&r.sample_seed.to_le_bytes());
            for p in r.pixels.iter() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.manifest)?)
    }

    /// Content hash over the manifest and image store.
    pub fn content_hash(&self) -> Result<String> {
        let mut bytes = self.manifest_json()?.into_bytes();
        bytes.extend_from_slice(&self.encode_images());
        Ok(content_hash(&bytes))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_bytes(&dir.join("manifest.json"), self.manifest_json()?.as_bytes())?;
        write_bytes(&dir.join("images.bin"), &self.encode_images())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::io(
                &manifest_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset manifest not found"),
            ));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&read_bytes(&manifest_path)?)?;
        manifest.validate()?;
        let path = dir.join("images.bin");
        let bytes = read_bytes(&path)?;
        let bad = |msg: String| Error::Format {
            path: path.clone(),
            msg,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(bad("missing CPDS header".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(bad(format!("image store version {version}")));
        }
        let count = u32_at(8) as usize;
        let px = manifest.pixels_per_image();
        let stride = 12 + px * 4;
        if bytes.len() != 12 + count * stride {
            return Err(bad(format!("{} bytes for {count} records", bytes.len())));
        }
        let mut pools = Vec::with_capacity(count);
        for pool in Pool::ALL {
            pools.extend(std::iter::repeat(pool).take(manifest.pool_count(pool) * manifest.classes.len()));
        }
        if pools.len() != count {
            return Err(bad(format!(
                "{count} records but the manifest describes {}",
                pools.len()
            )));
        }
        let mut records = Vec::with_capacity(count);
        for (i, pool) in pools.into_iter().enumerate() {
            let o = 12 + i * stride;
            let class_id = u32_at(o);
            if class_id as usize >= manifest.classes.len() {
                return Err(bad(format!("record {i} has class id {class_id}")));
            }
            let sample_seed = u64::from_le_bytes(bytes[o + 4..o + 12].try_into().expect("8 bytes"));
            let pixels = bytes[o + 12..o + stride]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push(ImageRecord {
                class_id,
                sample_seed,
                pool,
                pixels: Arc::new(pixels),
            });
        }
        Ok(Dataset { manifest, records })
    }

    /// Writes one plain-text PPM per record of `pool` into `dir`.
    pub fn export_ppm(&self, dir: &Path, pool: Pool, limit: usize) -> Result<usize> {
        let size = self.manifest.generator.image_size;
        let mut written = 0;
        for (i, r) in self.pool(pool).take(limit).enumerate() {
            let mut text = format!("P3\n{size} {size}\n255\n");
            for px in r.pixels.chunks_exact(CHANNELS) {
                let v: Vec<String> = px
                    .iter()
                    .map(|&c| ((c.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                    .collect();
                text.push_str(&v.join(" "));
                text.push('\n');
            }
            let name = &self.manifest.classes[r.class_id as usize].name;
            write_bytes(&dir.join(format!("{i:04}_{name}.ppm")), text.as_bytes())?;
            written += 1;
        }
        Ok(written)
    }
}

/// Accuracy (fraction) of a pixel-space nearest-centroid classifier.
pub fn nearest_centroid_accuracy(fit: &[&ImageRecord], eval: &[&ImageRecord]) -> f64 {
    if fit.is_empty() || eval.is_empty() {
        return 0.0;
    }
    let dim = fit[0].pixels.len();
    let mut classes: Vec<u32> = fit.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let centroids: Vec<Vec<f64>> = classes
        .iter()
        .map(|&c| {
            let members: Vec<_> = fit.iter().filter(|r| r.class_id == c).collect();
            let mut m = vec![0.0; dim];
            for r in &members {
                for (a, &p) in m.iter_mut().zip(r.pixels.iter()) {
                    *a += p as f64;
                }
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            m
        })
        .collect();
    let correct = eval
        .iter()
        .filter(|r| {
            let mut best = (f64::INFINITY, 0);
            for (k, c) in centroids.iter().enumerate() {
                let d: f64 = c
                    .iter()
                    .zip(r.pixels.iter())
                    .map(|(a, &p)| (a - p as f64).powi(2))
                    .sum();
                if d < best.0 {
                    best = (d, k);
                }
            }
            classes[best.1] == r.class_id
        })
        .count();
    correct as f64 / eval.len() as f64
}
