//! Input perturbations and the frozen-versus-tuned consistency loss.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{template, FewShotSplit, CHANNELS};
use crate::encoder::Tokenizer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Cosine,
    L1,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    TextOnly,
    ImageOnly,
    Both,
}

impl Modality {
    pub fn text(self) -> bool {
        matches!(self, Modality::TextOnly | Modality::Both)
    }

    pub fn image(self) -> bool {
        matches!(self, Modality::ImageOnly | Modality::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugMode {
    #[serde(alias = "same")]
    None,
    Simple,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    pub enabled: bool,
    pub criterion: Criterion,
    pub modality: Modality,
    pub perturb_text: bool,
    pub perturb_image: AugMode,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            enabled: true,
            criterion: Criterion::Cosine,
            modality: Modality::Both,
            perturb_text: true,
            perturb_image: AugMode::Simple,
        }
    }
}

/// Class name to descriptive sentences.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptionStore {
    map: BTreeMap<String, Vec<String>>,
}

impl DescriptionStore {
    pub fn new(entries: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<Self> {
        let map: BTreeMap<String, Vec<String>> = entries.into_iter().collect();
        if let Some((name, _)) = map.iter().find(|(_, d)| d.is_empty()) {
            return Err(Error::Config(format!("class `{name}` has no description")));
        }
        Ok(DescriptionStore { map })
    }

    pub fn from_split(split: &FewShotSplit) -> Result<Self> {
        Self::new(split.class_names.iter().cloned().zip(split.descriptions.iter().cloned()))
    }

    pub fn descriptions(&self, class: &str) -> Result<&[String]> {
        self.map
            .get(class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))
    }

    /// Every description tokenizes and fits in `text_len`.
    pub fn validate(&self, tok: &Tokenizer, text_len: usize) -> Result<()> {
        for d in self.map.values().flatten() {
            let len = tok.encode_strict(d)?.len();
            if len > text_len {
                return Err(Error::Overlength { len, limit: text_len });
            }
        }
        Ok(())
    }

    /// Tokens of one uniformly drawn description, or of the template when
    /// `perturb` is off (no draw is made then).
    pub fn perturb_text<R: Rng>(&self, tok: &Tokenizer, class: &str, perturb: bool, rng: &mut R) -> Result<Vec<u32>> {
        let ds = self.descriptions(class)?;
        if !perturb {
            return tok.encode_strict(&template(class));
        }
        tok.encode_strict(&ds[rng.gen_range(0..ds.len())])
    }
}

/// Image augmentation for square HWC images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    pub mode: AugMode,
    pub image_size: usize,
    /// Side of the square erased by hard augmentation.
    pub erase_side: usize,
}

impl Augmenter {
    pub fn new(mode: AugMode, image_size: usize, erase_side: usize) -> Self {
        Augmenter {
            mode,
            image_size,
            erase_side,
        }
    }

    pub fn augment<R: Rng>(&self, image: &[f32], rng: &mut R) -> Result<Vec<f32>> {
        let n = self.image_size * self.image_size * CHANNELS;
        if image.len() != n {
            return Err(Error::shape("augment", &[&[image.len()], &[n]]));
        }
        match self.mode {
            AugMode::None => Ok(image.to_vec()),
            AugMode::Simple => Ok(self.crop_flip(image, rng)),
            AugMode::Hard => {
                let mut out = self.crop_flip(image, rng);
                self.jitter(&mut out, rng);
                self.erase(&mut out, rng);
                Ok(out)
            }
        }
    }

    /// Random resized crop (area in [0.6, 1], aspect in [3/4, 4/3]), bilinear
    /// resampling back to full size, then a horizontal flip with p = 0.5.
    fn crop_flip<R: Rng>(&self, image: &[f32], rng: &mut R) -> Vec<f32> {
        let s = self.image_size as f64;
        let area = rng.gen_range(0.6..=1.0);
        let ratio = rng.gen_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp();
        let cw = (s * (area * ratio).sqrt()).min(s);
        let ch = (s * (area / ratio).sqrt()).min(s);
        let x0 = rng.gen_range(0.0..=s - cw);
        let y0 = rng.gen_range(0.0..=s - ch);
        let flip = rng.gen_bool(0.5);
        let size = self.image_size;
        let last = (size - 1) as f64;
        let mut out = Vec::with_capacity(image.len());
        for oy in 0..size {
            let sy = (y0 + (oy as f64 + 0.5) * ch / s - 0.5).clamp(0.0, last);
            let (y1, fy) = (sy.floor() as usize, sy - sy.floor());
            let y2 = (y1 + 1).min(size - 1);
            for ox in 0..size {
                let ox = if flip { size - 1 - ox } else { ox };
                let sx = (x0 + (ox as f64 + 0.5) * cw / s - 0.5).clamp(0.0, last);
                let (x1, fx) = (sx.floor() as usize, sx - sx.floor());
                let x2 = (x1 + 1).min(size - 1);
                for c in 0..CHANNELS {
                    let at = |y: usize, x: usize| image[(y * size + x) * CHANNELS + c] as f64;
                    let top = at(y1, x1) * (1.0 - fx) + at(y1, x2) * fx;
                    let bot = at(y2, x1) * (1.0 - fx) + at(y2, x2) * fx;
                    out.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
        out
    }

    /// Per-channel brightness and contrast factors in [0.6, 1.4].
    fn jitter<R: Rng>(&self, img: &mut [f32], rng: &mut R) {
        let pixels = img.len() / CHANNELS;
        for c in 0..CHANNELS {
            let b = rng.gen_range(0.6..=1.4);
            let k = rng.gen_range(0.6..=1.4);
            let mean = (0..pixels).map(|p| img[p * CHANNELS + c] as f64).sum::<f64>() / pixels as f64 * b;
            for p in 0..pixels {
                let v = img[p * CHANNELS + c] as f64 * b;
                img[p * CHANNELS + c] = ((v - mean) * k + mean).clamp(0.0, 1.0) as f32;
            }
        }
    }

    /// Fills one randomly placed `erase_side` square with mid-gray.
    fn erase<R: Rng>(&self, img: &mut [f32], rng: &mut R) {
        let side = self.erase_side.min(self.image_size);
        if side == 0 {
            return;
        }
        let y0 = rng.gen_range(0..=self.image_size - side);
        let x0 = rng.gen_range(0..=self.image_size - side);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                let at = (y * self.image_size + x) * CHANNELS;
                img[at..at + CHANNELS].fill(0.5);
            }
        }
    }
}

/// Two independent augmentations: the frozen branch sees the first, the
/// tuned branch the second.
pub fn perturb_image<R: Rng>(aug: &Augmenter, image: &[f32], rng: &mut R) -> Result<(Vec<f32>, Vec<f32>)> {
    let a = aug.augment(image, rng)?;
    let b = aug.augment(image, rng)?;
    Ok((a, b))
}

fn branch_term<T: Scalar>(g: &mut Graph<T>, criterion: Criterion, frozen: Var, tuned: Var) -> Result<Var> {
    let (fs, ts) = (g.value(frozen).shape().to_vec(), g.value(tuned).shape().to_vec());
    if fs != ts {
        return Err(Error::shape("consistency_loss", &[&fs, &ts]));
    }
    if !g.value(frozen).is_finite() || !g.value(tuned).is_finite() {
        return Err(Error::NonFinite("consistency_loss input".into()));
    }
    match criterion {
        Criterion::Cosine => {
            let c = g.cosine_similarity(frozen, tuned)?;
            let m = g.mean(c)?;
            let one = g.constant(crate::tensor::Tensor::scalar(T::one()));
            g.sub(one, m)
        }
        Criterion::L1 => {
            let d = g.sub(tuned, frozen)?;
            let a = g.abs(d);
            g.mean(a)
        }
        Criterion::Mse => {
            let d = g.sub(tuned, frozen)?;
            let sq = g.mul(d, d)?;
            g.mean(sq)
        }
    }
}

/// Sum over the selected modalities of the per-branch distance, each
/// averaged over the batch rows. Pairs are `(frozen, tuned)`; a branch
/// the modality selects must be present.
///
/// With the cosine criterion a branch contributes `1 - cos`, so the
/// two-branch value lies in `[0, 4]`.
pub fn consistency_loss<T: Scalar>(
    g: &mut Graph<T>,
    criterion: Criterion,
    modality: Modality,
    text: Option<(Var, Var)>,
    image: Option<(Var, Var)>,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (wanted, pair, name) in [(modality.text(), text, "text"), (modality.image(), image, "image")] {
        if wanted {
            let (f, t) = pair.ok_or_else(|| Error::Config(format!("consistency on {name} needs {name} embeddings")))?;
            terms.push(branch_term(g, criterion, f, t)?);
        }
    }
    match terms[..] {
        [a] => Ok(a),
        [a, b] => g.add(a, b),
        _ => unreachable!("a modality selects at least one branch"),
    }
}
