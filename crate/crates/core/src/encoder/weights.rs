use rand::Rng;

use super::EncoderConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default initial temperature.
pub const INIT_TAU: f64 = 0.07;

type MapFn<'f, W, U> = dyn FnMut(&str, &W) -> U + 'f;

#[derive(Debug, Clone)]
pub struct Linear<W> {
    pub weight: W,
    pub bias: W,
}

#[derive(Debug, Clone)]
pub struct LayerNormWeights<W> {
    pub gamma: W,
    pub beta: W,
}

#[derive(Debug, Clone)]
pub struct Block<W> {
    pub ln1: LayerNormWeights<W>,
    pub qkv: Linear<W>,
    pub out: Linear<W>,
    pub ln2: LayerNormWeights<W>,
    pub fc1: Linear<W>,
    pub fc2: Linear<W>,
}

#[derive(Debug, Clone)]
pub struct Tower<W> {
    pub blocks: Vec<Block<W>>,
    pub ln_final: LayerNormWeights<W>,
    pub proj: W,
}

#[derive(Debug, Clone)]
pub struct TextWeights<W> {
    pub token_embedding: W,
    pub position_embedding: W,
    pub tower: Tower<W>,
}

#[derive(Debug, Clone)]
pub struct ImageWeights<W> {
    pub patch: Linear<W>,
    pub cls: W,
    pub position_embedding: W,
    pub tower: Tower<W>,
}

/// All backbone weights; `logit_scale` is `ln(1/τ)`.
#[derive(Debug, Clone)]
pub struct EncoderWeights<W> {
    pub text: TextWeights<W>,
    pub image: ImageWeights<W>,
    pub logit_scale: W,
}

impl<W> Linear<W> {
    fn map<U>(&self, p: &str, f: &mut MapFn<W, U>) -> Linear<U> {
        Linear {
            weight: f(&format!("{p}.weight"), &self.weight),
            bias: f(&format!("{p}.bias"), &self.bias),
        }
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a W)>) {
        out.push((format!("{p}.weight"), &self.weight));
        out.push((format!("{p}.bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut W)>) {
        out.push((format!("{p}.weight"), &mut self.weight));
        out.push((format!("{p}.bias"), &mut self.bias));
    }
}

impl<W> LayerNormWeights<W> {
    fn map<U>(&self, p: &str, f: &mut MapFn<W, U>) -> LayerNormWeights<U> {
        LayerNormWeights {
            gamma: f(&format!("{p}.gamma"), &self.gamma),
            beta: f(&format!("{p}.beta"), &self.beta),
        }
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a W)>) {
        out.push((format!("{p}.gamma"), &self.gamma));
        out.push((format!("{p}.beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut W)>) {
        out.push((format!("{p}.gamma"), &mut self.gamma));
        out.push((format!("{p}.beta"), &mut self.beta));
    }
}

impl<W> Block<W> {
    fn map<U>(&self, p: &str, f: &mut MapFn<W, U>) -> Block<U> {
        Block {
            ln1: self.ln1.map(&format!("{p}.ln1"), f),
            qkv: self.qkv.map(&format!("{p}.qkv"), f),
            out: self.out.map(&format!("{p}.out"), f),
            ln2: self.ln2.map(&format!("{p}.ln2"), f),
            fc1: self.fc1.map(&format!("{p}.fc1"), f),
            fc2: self.fc2.map(&format!("{p}.fc2"), f),
        }
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a W)>) {
        self.ln1.visit(&format!("{p}.ln1"), out);
        self.qkv.visit(&format!("{p}.qkv"), out);
        self.out.visit(&format!("{p}.out"), out);
        self.ln2.visit(&format!("{p}.ln2"), out);
        self.fc1.visit(&format!("{p}.fc1"), out);
        self.fc2.visit(&format!("{p}.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut W)>) {
        self.ln1.visit_mut(&format!("{p}.ln1"), out);
        self.qkv.visit_mut(&format!("{p}.qkv"), out);
        self.out.visit_mut(&format!("{p}.out"), out);
        self.ln2.visit_mut(&format!("{p}.ln2"), out);
        self.fc1.visit_mut(&format!("{p}.fc1"), out);
        self.fc2.visit_mut(&format!("{p}.fc2"), out);
    }
}

impl<W> Tower<W> {
    fn map<U>(&self, p: &str, f: &mut MapFn<W, U>) -> Tower<U> {
        Tower {
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("{p}.blocks.{i}"), f))
                .collect(),
            ln_final: self.ln_final.map(&format!("{p}.ln_final"), f),
            proj: f(&format!("{p}.proj"), &self.proj),
        }
    }

    fn visit<'a>(&'a self, p: &str, out: &mut Vec<(String, &'a W)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{p}.blocks.{i}"), out);
        }
        self.ln_final.visit(&format!("{p}.ln_final"), out);
        out.push((format!("{p}.proj"), &self.proj));
    }

    fn visit_mut<'a>(&'a mut self, p: &str, out: &mut Vec<(String, &'a mut W)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{p}.blocks.{i}"), out);
        }
        self.ln_final.visit_mut(&format!("{p}.ln_final"), out);
        out.push((format!("{p}.proj"), &mut self.proj));
    }
}

impl<W> EncoderWeights<W> {
    /// Same structure with every leaf replaced by `f(name, leaf)`.
    pub fn map<U>(&self, f: &mut MapFn<W, U>) -> EncoderWeights<U> {
        let t = &self.text;
        let i = &self.image;
        EncoderWeights {
            text: TextWeights {
                token_embedding: f("text.token_embedding", &t.token_embedding),
                position_embedding: f("text.position_embedding", &t.position_embedding),
                tower: t.tower.map("text", f),
            },
            image: ImageWeights {
                patch: i.patch.map("image.patch", f),
                cls: f("image.cls", &i.cls),
                position_embedding: f("image.position_embedding", &i.position_embedding),
                tower: i.tower.map("image", f),
            },
            logit_scale: f("logit_scale", &self.logit_scale),
        }
    }

    /// Leaves in a fixed order with dotted names.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        out.push(("text.token_embedding".into(), &self.text.token_embedding));
        out.push(("text.position_embedding".into(), &self.text.position_embedding));
        self.text.tower.visit("text", &mut out);
        self.image.patch.visit("image.patch", &mut out);
        out.push(("image.cls".into(), &self.image.cls));
        out.push(("image.position_embedding".into(), &self.image.position_embedding));
        self.image.tower.visit("image", &mut out);
        out.push(("logit_scale".into(), &self.logit_scale));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut W)> {
        let mut out = Vec::new();
        out.push(("text.token_embedding".into(), &mut self.text.token_embedding));
        out.push(("text.position_embedding".into(), &mut self.text.position_embedding));
        self.text.tower.visit_mut("text", &mut out);
        self.image.patch.visit_mut("image.patch", &mut out);
        out.push(("image.cls".into(), &mut self.image.cls));
        out.push(("image.position_embedding".into(), &mut self.image.position_embedding));
        self.image.tower.visit_mut("image", &mut out);
        out.push(("logit_scale".into(), &mut self.logit_scale));
        out
    }
}

fn dense<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Linear<Tensor<T>> {
    Linear {
        weight: Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng),
        bias: Tensor::zeros(&[fan_out]),
    }
}

fn norm<T: Scalar>(width: usize) -> LayerNormWeights<Tensor<T>> {
    LayerNormWeights {
        gamma: Tensor::filled(&[width], T::one()),
        beta: Tensor::zeros(&[width]),
    }
}

fn tower<T: Scalar, R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Tower<Tensor<T>> {
    let (w, hidden) = (cfg.width, cfg.width * cfg.mlp_ratio);
    let residual_gain = 1.0 / (2.0 * cfg.layers as f64).sqrt();
    Tower {
        blocks: (0..cfg.layers)
            .map(|_| Block {
                ln1: norm(w),
                qkv: dense(rng, w, 3 * w, 1.0),
                out: dense(rng, w, w, residual_gain),
                ln2: norm(w),
                fc1: dense(rng, w, hidden, 1.0),
                fc2: dense(rng, hidden, w, residual_gain),
            })
            .collect(),
        ln_final: norm(w),
        proj: Tensor::randn(&[w, cfg.embed_dim], 1.0 / (w as f64).sqrt(), rng),
    }
}

impl<T: Scalar> EncoderWeights<Tensor<T>> {
    pub fn init<R: Rng>(cfg: &EncoderConfig, vocab: usize, rng: &mut R) -> Self {
        let w = cfg.width;
        let text = TextWeights {
            token_embedding: Tensor::randn(&[vocab, w], 0.5, rng),
            position_embedding: Tensor::randn(&[cfg.text_len, w], 0.1, rng),
            tower: tower(cfg, rng),
        };
        let image = ImageWeights {
            patch: dense(rng, cfg.patch_dim(), w, 1.0),
            cls: Tensor::randn(&[1, w], 0.5, rng),
            position_embedding: Tensor::randn(&[cfg.patches() + 1, w], 0.1, rng),
            tower: tower(cfg, rng),
        };
        EncoderWeights {
            text,
            image,
            logit_scale: Tensor::scalar(T::of((1.0 / INIT_TAU).ln())),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}
