//! Miniature dual encoder: a text transformer and a patch-based image
//! transformer projecting into a shared unit-norm embedding space.

mod checkpoint;
mod pretrain;
pub mod tokenizer;
mod weights;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use checkpoint::{load_backbone, save_backbone, BackboneManifest};
pub use pretrain::{
    contrastive_loss, contrastive_pretrain, retrieval_accuracy, PretrainConfig, PretrainReport,
};
pub use tokenizer::Tokenizer;
pub use weights::{Block, EncoderWeights, ImageWeights, LayerNormWeights, Linear, TextWeights, Tower};

/// Bounds of the temperature while it is learned.
pub const TAU_RANGE: (f64, f64) = (0.01, 100.0);
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub text_len: usize,
    pub patch_grid: usize,
    pub image_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 4,
            width: 64,
            heads: 4,
            text_len: 16,
            patch_grid: 4,
            image_size: 32,
            channels: 3,
            embed_dim: 32,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("encoder: {m} ({self:?})")));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.embed_dim == 0 {
            return fail("sizes must be positive");
        }
        if self.width % self.heads != 0 {
            return fail("width must be divisible by heads");
        }
        if self.patch_grid == 0 || self.image_size % self.patch_grid != 0 {
            return fail("image_size must be divisible by patch_grid");
        }
        if self.channels != crate::data::CHANNELS {
            return fail("images have 3 channels");
        }
        if self.text_len < 3 || self.mlp_ratio == 0 {
            return fail("text_len must be at least 3 and mlp_ratio positive");
        }
        Ok(())
    }

    /// Number of image patches.
    pub fn patches(&self) -> usize {
        self.patch_grid * self.patch_grid
    }

    pub fn patch_side(&self) -> usize {
        self.image_size / self.patch_grid
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side() * self.patch_side() * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }
}

/// Image encoder θ, text encoder φ and temperature τ.
#[derive(Debug, Clone)]
pub struct DualEncoder<T> {
    pub config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub weights: EncoderWeights<Tensor<T>>,
    pub frozen: bool,
}

/// Per-layer prompt vectors, each `[m, width]`; layer `j` uses entry `j`.
pub type PromptVars<'a> = Option<&'a [Var]>;

impl<T: Scalar> DualEncoder<T> {
    pub fn init(config: EncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = EncoderWeights::init(&config, tokenizer.vocab_size(), &mut rng);
        Ok(DualEncoder {
            config,
            tokenizer,
            weights,
            frozen: false,
        })
    }

    pub fn tau(&self) -> f64 {
        (-self.weights.logit_scale.item().as_f64()).exp()
    }

    /// Deep copy marked frozen.
    pub fn clone_frozen(&self) -> Self {
        DualEncoder {
            frozen: true,
            ..self.clone()
        }
    }

    /// Registers the weights in `g`: trainable leaves unless frozen or
    /// `trainable` is false.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderWeights<Var> {
        let learn = trainable && !self.frozen;
        self.weights.map(&mut |_, t: &Tensor<T>| {
            if learn {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
    }

    pub fn named_weights(&self) -> Vec<(String, &Tensor<T>)> {
        self.weights.named()
    }

    pub fn weights_bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named_weights(), other.named_weights());
        a.len() == b.len() && a.iter().zip(&b).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
    }

    /// Consistency check of sequence lengths against `text_len`.
    pub fn check_text_len(&self, tokens: usize, prompts: usize) -> Result<()> {
        let len = tokens + prompts;
        if len > self.config.text_len {
            Err(Error::Overlength {
                len,
                limit: self.config.text_len,
            })
        } else {
            Ok(())
        }
    }

    /// Eval-mode text embedding of one token sequence, `[embed_dim]`.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let w = self.bind(&mut g, false);
        let out = text_forward(&mut g, &w.text, &self.config, &[tokens.to_vec()], None)?;
        g.value(out).reshape(&[self.config.embed_dim])
    }

    /// Eval-mode image embedding of one `[size, size, 3]` image, `[embed_dim]`.
    pub fn encode_image(&self, pixels: &[f32]) -> Result<Tensor<T>> {
        let mut g = Graph::eval();
        let w = self.bind(&mut g, false);
        let out = image_forward(&mut g, &w.image, &self.config, &[pixels], None)?;
        g.value(out).reshape(&[self.config.embed_dim])
    }

    /// Template-text embeddings of `classes` in eval mode, `[C, embed_dim]`.
    pub fn class_text_embeddings(&self, texts: &[String]) -> Result<Tensor<T>> {
        let seqs = texts
            .iter()
            .map(|t| self.tokenizer.encode_strict(t))
            .collect::<Result<Vec<_>>>()?;
        let mut g = Graph::eval();
        let w = self.bind(&mut g, false);
        let out = text_forward(&mut g, &w.text, &self.config, &seqs, None)?;
        Ok(g.value(out).clone())
    }
}

/// Splits an HWC image into row-major patches of `(dy, dx, c)` vectors.
pub fn patchify<T: Scalar>(cfg: &EncoderConfig, pixels: &[f32], out: &mut Vec<T>) -> Result<()> {
    if pixels.len() != cfg.pixels() {
        return Err(Error::shape("encode_image", &[&[pixels.len()], &[cfg.pixels()]]));
    }
    let (side, c, size) = (cfg.patch_side(), cfg.channels, cfg.image_size);
    for py in 0..cfg.patch_grid {
        for px in 0..cfg.patch_grid {
            for dy in 0..side {
                let row = (py * side + dy) * size + px * side;
                out.extend(pixels[row * c..(row + side) * c].iter().map(|&p| T::of(p as f64)));
            }
        }
    }
    Ok(())
}

/// Layer-0 prompt rows of a prompted sequence start right after position 0.
const PROMPT_OFFSET: usize = 1;

fn prompt_rows<T: Scalar>(g: &Graph<T>, prompts: PromptVars) -> usize {
    prompts
        .and_then(|p| p.first())
        .map_or(0, |v| g.value(*v).shape()[0])
}

/// Text branch over a batch of `[SOS, .., EOS]` sequences, pooled at EOS.
///
/// With prompts, each sequence becomes `[SOS, u_1..u_m, tokens.., EOS]` and
/// before every prompted layer `j > 0` the `m` prompt positions are replaced
/// with layer `j`'s vectors. Returns unit-norm `[batch, embed_dim]`.
pub fn text_forward<T: Scalar>(
    g: &mut Graph<T>,
    w: &TextWeights<Var>,
    cfg: &EncoderConfig,
    seqs: &[Vec<u32>],
    prompts: PromptVars,
) -> Result<Var> {
    if seqs.is_empty() {
        return Err(Error::Empty("text batch".into()));
    }
    let m = prompt_rows(g, prompts);
    let mut flat = Vec::new();
    let mut spans = Vec::with_capacity(seqs.len());
    let mut positions = Vec::new();
    let mut start = 0;
    for s in seqs {
        if s.len() < 2 {
            return Err(Error::Empty("token sequence".into()));
        }
        let len = s.len() + m;
        if len > cfg.text_len {
            return Err(Error::Overlength {
                len,
                limit: cfg.text_len,
            });
        }
        flat.extend(s.iter().map(|&t| t as usize));
        spans.push((start, len));
        positions.extend(0..len);
        start += len;
    }
    let vocab = g.value(w.token_embedding).shape()[0];
    if let Some(&bad) = flat.iter().find(|&&t| t >= vocab) {
        return Err(Error::Config(format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let tokens = g.gather_rows(w.token_embedding, &flat)?;
    let mut x = match prompts {
        Some(p) if m > 0 => {
            let mut parts = Vec::with_capacity(3 * seqs.len());
            let mut at = 0;
            for s in seqs {
                parts.push(g.slice(tokens, 0, at, PROMPT_OFFSET)?);
                parts.push(p[0]);
                parts.push(g.slice(tokens, 0, at + PROMPT_OFFSET, s.len() - PROMPT_OFFSET)?);
                at += s.len();
            }
            g.concat(&parts, 0)?
        }
        _ => tokens,
    };
    let pos = g.gather_rows(w.position_embedding, &positions)?;
    x = g.add(x, pos)?;
    let x = tower_forward(g, &w.tower, cfg, x, &spans, prompts, m)?;
    let eos: Vec<usize> = spans.iter().map(|(s, l)| s + l - 1).collect();
    let pooled = g.gather_rows(x, &eos)?;
    project(g, &w.tower, pooled)
}

/// Image branch over a batch of HWC images, pooled at the class token.
///
/// Each sequence is `[CLS, v_1..v_m, p_1..p_d]`; vision prompts carry no
/// position embedding. Returns unit-norm `[batch, embed_dim]`.
pub fn image_forward<T: Scalar>(
    g: &mut Graph<T>,
    w: &ImageWeights<Var>,
    cfg: &EncoderConfig,
    images: &[&[f32]],
    prompts: PromptVars,
) -> Result<Var> {
    if images.is_empty() {
        return Err(Error::Empty("image batch".into()));
    }
    let d = cfg.patches();
    let m = prompt_rows(g, prompts);
    let mut patches = Vec::with_capacity(images.len() * d * cfg.patch_dim());
    for img in images {
        patchify(cfg, img, &mut patches)?;
    }
    let px = g.constant(Tensor::from_parts(vec![images.len() * d, cfg.patch_dim()], patches));
    let pe = g.matmul(px, w.patch.weight)?;
    let pe = g.add(pe, w.patch.bias)?;
    let pos_ids: Vec<usize> = (0..images.len()).flat_map(|_| 1..=d).collect();
    let pos = g.gather_rows(w.position_embedding, &pos_ids)?;
    let pe = g.add(pe, pos)?;
    let pos0 = g.slice(w.position_embedding, 0, 0, 1)?;
    let cls = g.add(w.cls, pos0)?;
    let len = 1 + m + d;
    let mut parts = Vec::with_capacity(3 * images.len());
    let mut spans = Vec::with_capacity(images.len());
    for b in 0..images.len() {
        parts.push(cls);
        if let (Some(p), true) = (prompts, m > 0) {
            parts.push(p[0]);
        }
        parts.push(g.slice(pe, 0, b * d, d)?);
        spans.push((b * len, len));
    }
    let x = g.concat(&parts, 0)?;
    let x = tower_forward(g, &w.tower, cfg, x, &spans, prompts, m)?;
    let cls_rows: Vec<usize> = spans.iter().map(|(s, _)| *s).collect();
    let pooled = g.gather_rows(x, &cls_rows)?;
    project(g, &w.tower, pooled)
}

fn project<T: Scalar>(g: &mut Graph<T>, tower: &Tower<Var>, pooled: Var) -> Result<Var> {
    let h = g.layer_norm(pooled, tower.ln_final.gamma, tower.ln_final.beta, LN_EPS)?;
    let e = g.matmul(h, tower.proj)?;
    g.l2_normalize(e)
}

fn linear<T: Scalar>(g: &mut Graph<T>, l: &Linear<Var>, x: Var) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add(y, l.bias)
}

/// Replaces rows `1..=m` of every span with `prompt`.
fn reinject<T: Scalar>(g: &mut Graph<T>, x: Var, spans: &[(usize, usize)], prompt: Var, m: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(3 * spans.len());
    for &(s, l) in spans {
        parts.push(g.slice(x, 0, s, PROMPT_OFFSET)?);
        parts.push(prompt);
        let rest = l - PROMPT_OFFSET - m;
        if rest > 0 {
            parts.push(g.slice(x, 0, s + PROMPT_OFFSET + m, rest)?);
        }
    }
    g.concat(&parts, 0)
}

fn tower_forward<T: Scalar>(
    g: &mut Graph<T>,
    tower: &Tower<Var>,
    cfg: &EncoderConfig,
    mut x: Var,
    spans: &[(usize, usize)],
    prompts: PromptVars,
    m: usize,
) -> Result<Var> {
    let (w, heads) = (cfg.width, cfg.heads);
    let dh = w / heads;
    let scale = T::one() / T::of_usize(dh).sqrt();
    for (layer, block) in tower.blocks.iter().enumerate() {
        if let Some(p) = prompts {
            if layer > 0 && layer < p.len() && m > 0 {
                x = reinject(g, x, spans, p[layer], m)?;
            }
        }
        let h = g.layer_norm(x, block.ln1.gamma, block.ln1.beta, LN_EPS)?;
        let qkv = linear(g, &block.qkv, h)?;
        let mut seq_out = Vec::with_capacity(spans.len());
        for &(s, l) in spans {
            let rows = g.slice(qkv, 0, s, l)?;
            let mut head_out = Vec::with_capacity(heads);
            for hd in 0..heads {
                let q = g.slice(rows, 1, hd * dh, dh)?;
                let k = g.slice(rows, 1, w + hd * dh, dh)?;
                let v = g.slice(rows, 1, 2 * w + hd * dh, dh)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scores = g.scale(scores, scale);
                let att = g.softmax(scores, 1)?;
                head_out.push(g.matmul(att, v)?);
            }
            seq_out.push(g.concat(&head_out, 1)?);
        }
        let att = if seq_out.len() == 1 {
            seq_out[0]
        } else {
            g.concat(&seq_out, 0)?
        };
        let att = linear(g, &block.out, att)?;
        x = g.add(x, att)?;
        let h = g.layer_norm(x, block.ln2.gamma, block.ln2.beta, LN_EPS)?;
        let h = linear(g, &block.fc1, h)?;
        let h = g.gelu(h)?;
        let h = linear(g, &block.fc2, h)?;
        x = g.add(x, h)?;
    }
    Ok(x)
}
