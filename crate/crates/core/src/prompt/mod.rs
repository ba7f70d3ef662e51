//! The only trainable parameters of fine-tuning: per-layer text prompts,
//! text-to-vision couplers and the two output adapters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{image_forward, text_forward, EncoderConfig, EncoderWeights, Linear};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Prompt vectors per layer; 0 disables prompting.
    pub m: usize,
    /// Prompted layers; `None` means every encoder layer.
    pub depth: Option<usize>,
    pub init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            m: 2,
            depth: None,
            init_std: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    Text,
    Image,
    Both,
}

impl Placement {
    pub fn text(self) -> bool {
        matches!(self, Placement::Text | Placement::Both)
    }

    pub fn image(self) -> bool {
        matches!(self, Placement::Image | Placement::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub enabled: bool,
    /// Linear layers per adapter (1 to 3), ReLU between consecutive ones.
    pub layers: usize,
    /// Hidden width; `None` means `embed_dim / 4`.
    pub bottleneck: Option<usize>,
    /// `x + f(x)` re-normalized, versus the bare `f(x)` re-normalized.
    pub residual: bool,
    pub placement: Placement,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            enabled: true,
            layers: 2,
            bottleneck: None,
            residual: true,
            placement: Placement::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Text,
    Image,
}

/// `J` layers of `[m, width]` text prompts plus one coupler per layer.
#[derive(Debug, Clone)]
pub struct PromptSet<W> {
    pub text_prompts: Vec<W>,
    pub couplers: Vec<Linear<W>>,
}

#[derive(Debug, Clone)]
pub struct Adapter<W> {
    pub branch: Branch,
    pub residual: bool,
    /// Bias-free weight matrices, input side first.
    pub layers: Vec<W>,
}

/// Everything fine-tuning learns. Absent parts are simply `None`.
#[derive(Debug, Clone)]
pub struct TunedParams<W> {
    pub prompts: Option<PromptSet<W>>,
    pub text_adapter: Option<Adapter<W>>,
    pub image_adapter: Option<Adapter<W>>,
}

fn linear_named<'a, W>(p: &str, l: &'a Linear<W>, out: &mut Vec<(String, &'a W)>) {
    out.push((format!("{p}.weight"), &l.weight));
    out.push((format!("{p}.bias"), &l.bias));
}

fn linear_named_mut<'a, W>(p: &str, l: &'a mut Linear<W>, out: &mut Vec<(String, &'a mut W)>) {
    out.push((format!("{p}.weight"), &mut l.weight));
    out.push((format!("{p}.bias"), &mut l.bias));
}

fn map_linear<W, U>(l: &Linear<W>, f: &mut impl FnMut(&W) -> U) -> Linear<U> {
    Linear {
        weight: f(&l.weight),
        bias: f(&l.bias),
    }
}

impl<W> Adapter<W> {
    fn prefix(&self) -> &'static str {
        match self.branch {
            Branch::Text => "adapter.text",
            Branch::Image => "adapter.image",
        }
    }

    fn map<U>(&self, f: &mut impl FnMut(&W) -> U) -> Adapter<U> {
        Adapter {
            branch: self.branch,
            residual: self.residual,
            layers: self.layers.iter().map(f).collect(),
        }
    }
}

impl<W> TunedParams<W> {
    /// Trainable tensors with stable dotted names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &W)> {
        let mut out = Vec::new();
        if let Some(p) = &self.prompts {
            for (j, u) in p.text_prompts.iter().enumerate() {
                out.push((format!("prompts.text.{j}"), u));
            }
            for (j, c) in p.couplers.iter().enumerate() {
                linear_named(&format!("prompts.coupler.{j}"), c, &mut out);
            }
        }
        for a in [&self.text_adapter, &self.image_adapter].into_iter().flatten() {
            for (k, w) in a.layers.iter().enumerate() {
                out.push((format!("{}.{k}.weight", a.prefix()), w));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut W)> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.prompts {
            for (j, u) in p.text_prompts.iter_mut().enumerate() {
                out.push((format!("prompts.text.{j}"), u));
            }
            for (j, c) in p.couplers.iter_mut().enumerate() {
                linear_named_mut(&format!("prompts.coupler.{j}"), c, &mut out);
            }
        }
        for a in [&mut self.text_adapter, &mut self.image_adapter].into_iter().flatten() {
            let prefix = a.prefix();
            for (k, w) in a.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.{k}.weight"), w));
            }
        }
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&W) -> U) -> TunedParams<U> {
        TunedParams {
            prompts: self.prompts.as_ref().map(|p| PromptSet {
                text_prompts: p.text_prompts.iter().map(&mut f).collect(),
                couplers: p.couplers.iter().map(|c| map_linear(c, &mut f)).collect(),
            }),
            text_adapter: self.text_adapter.as_ref().map(|a| a.map(&mut f)),
            image_adapter: self.image_adapter.as_ref().map(|a| a.map(&mut f)),
        }
    }

    pub fn depth(&self) -> usize {
        self.prompts.as_ref().map_or(0, |p| p.text_prompts.len())
    }
}

fn uniform_linear<T: Scalar, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, bound: f64) -> Linear<Tensor<T>> {
    Linear {
        weight: if bound == 0.0 {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            Tensor::uniform(&[fan_in, fan_out], bound, rng)
        },
        bias: Tensor::zeros(&[fan_out]),
    }
}

/// Adapter weights. With `residual`, every layer but the last draws from
/// `U(±1e-3)` and the last is zero, so the adapter starts as the identity.
pub fn init_adapter<T: Scalar, R: Rng>(cfg: &AdapterConfig, branch: Branch, embed_dim: usize, rng: &mut R) -> Result<Adapter<Tensor<T>>> {
    let dims = adapter_dims(cfg, embed_dim)?;
    let n = dims.len() - 1;
    let layers = (0..n)
        .map(|k| {
            let bound = if !cfg.residual {
                1.0 / (dims[k] as f64).sqrt()
            } else if k + 1 == n {
                0.0
            } else {
                1e-3
            };
            uniform_linear::<T, R>(rng, dims[k], dims[k + 1], bound).weight
        })
        .collect();
    Ok(Adapter {
        branch,
        residual: cfg.residual,
        layers,
    })
}

/// Widths through the adapter, input first.
pub fn adapter_dims(cfg: &AdapterConfig, embed_dim: usize) -> Result<Vec<usize>> {
    if !(1..=3).contains(&cfg.layers) {
        return Err(Error::Config(format!("adapter layers must be 1, 2 or 3, got {}", cfg.layers)));
    }
    let hidden = cfg.bottleneck.unwrap_or((embed_dim / 4).max(1));
    if hidden == 0 {
        return Err(Error::Config("adapter bottleneck must be positive".into()));
    }
    let mut dims = vec![embed_dim];
    dims.extend(std::iter::repeat(hidden).take(cfg.layers - 1));
    dims.push(embed_dim);
    Ok(dims)
}

/// Prompted layer count implied by `cfg` for an encoder with `layers` layers.
pub fn prompt_depth(cfg: &PromptConfig, layers: usize) -> Result<usize> {
    let depth = cfg.depth.unwrap_or(layers);
    if depth > layers {
        return Err(Error::Config(format!("prompt depth {depth} exceeds {layers} encoder layers")));
    }
    Ok(depth)
}

type Adapters<T> = (Option<Adapter<Tensor<T>>>, Option<Adapter<Tensor<T>>>);

fn init_adapters<T: Scalar>(cfg: &AdapterConfig, embed_dim: usize, rng: &mut ChaCha8Rng) -> Result<Adapters<T>> {
    if !cfg.enabled {
        adapter_dims(cfg, embed_dim)?;
        return Ok((None, None));
    }
    let text = if cfg.placement.text() {
        Some(init_adapter(cfg, Branch::Text, embed_dim, rng)?)
    } else {
        None
    };
    let image = if cfg.placement.image() {
        Some(init_adapter(cfg, Branch::Image, embed_dim, rng)?)
    } else {
        None
    };
    Ok((text, image))
}

impl<T: Scalar> TunedParams<Tensor<T>> {
    /// Prompts from `N(0, init_std²)`, couplers from `U(±1/√width)`.
    pub fn init(enc: &EncoderConfig, prompts: &PromptConfig, adapters: &AdapterConfig, seed: u64) -> Result<Self> {
        let depth = prompt_depth(prompts, enc.layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = enc.width;
        let prompts = if prompts.m == 0 || depth == 0 {
            None
        } else {
            let text_prompts = (0..depth)
                .map(|_| Tensor::randn(&[prompts.m, w], prompts.init_std, &mut rng))
                .collect();
            let couplers = (0..depth)
                .map(|_| uniform_linear(&mut rng, w, w, 1.0 / (w as f64).sqrt()))
                .collect();
            Some(PromptSet { text_prompts, couplers })
        };
        let mut arng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
        let (text_adapter, image_adapter) = init_adapters(adapters, enc.embed_dim, &mut arng)?;
        Ok(TunedParams {
            prompts,
            text_adapter,
            image_adapter,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_storage(&mut self) {
        for (_, t) in self.named_mut() {
            *t = t.round_to_storage();
        }
    }

    /// Registers every tensor in `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> TunedParams<Var> {
        self.map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named(), other.named());
        a.len() == b.len() && a.iter().zip(&b).all(|((n1, t1), (n2, t2))| n1 == n2 && t1.bit_eq(t2))
    }
}

/// `renorm(x + f(x))` with residual, `renorm(f(x))` without. `f` is a
/// bias-free stack of matrices with ReLU between consecutive ones.
pub fn apply_adapter<T: Scalar>(g: &mut Graph<T>, a: &Adapter<Var>, x: Var) -> Result<Var> {
    let input = g.value(a.layers[0]).shape()[0];
    if g.value(x).last_dim() != input {
        return Err(Error::shape("apply_adapter", &[g.value(x).shape(), &[input]]));
    }
    let mut h = x;
    for (k, w) in a.layers.iter().enumerate() {
        if k > 0 {
            h = g.relu(h)?;
        }
        h = g.matmul(h, *w)?;
    }
    let out = if a.residual { g.add(x, h)? } else { h };
    g.l2_normalize(out)
}

/// Per-layer prompt vectors consumed by the two encoder branches.
#[derive(Debug, Clone)]
pub struct PromptSchedule {
    pub text: Vec<Var>,
    /// `coupler_j(u_j)`, recomputed on every call.
    pub vision: Vec<Var>,
}

impl PromptSchedule {
    pub fn m<T: Scalar>(&self, g: &Graph<T>) -> usize {
        self.text.first().map_or(0, |v| g.value(*v).shape()[0])
    }
}

/// Vision prompts derived from the text prompts through the couplers.
pub fn build_schedule<T: Scalar>(g: &mut Graph<T>, p: &PromptSet<Var>) -> Result<PromptSchedule> {
    let mut vision = Vec::with_capacity(p.couplers.len());
    for (u, c) in p.text_prompts.iter().zip(&p.couplers) {
        let v = g.matmul(*u, c.weight)?;
        vision.push(g.add(v, c.bias)?);
    }
    Ok(PromptSchedule {
        text: p.text_prompts.clone(),
        vision,
    })
}

/// Layer-0 inputs of both branches under a schedule.
pub struct PromptedInputs {
    /// Token ids at sequence positions, `None` where a prompt vector sits.
    pub text: Vec<Option<u32>>,
    /// `Err(j)` for the `j`-th vision prompt, `Ok(k)` for patch `k`, after the class token.
    pub image: Vec<std::result::Result<usize, usize>>,
}

/// Layout of the prompted text and image sequences for `tokens`.
pub fn build_prompted_inputs(cfg: &EncoderConfig, m: usize, tokens: &[u32]) -> Result<PromptedInputs> {
    let len = tokens.len() + m;
    if len > cfg.text_len {
        return Err(Error::Overlength {
            len,
            limit: cfg.text_len,
        });
    }
    let mut text = Vec::with_capacity(len);
    if let Some((first, rest)) = tokens.split_first() {
        text.push(Some(*first));
        text.extend(std::iter::repeat(None).take(m));
        text.extend(rest.iter().map(|&t| Some(t)));
    }
    let image = (0..m).map(Err).chain((0..cfg.patches()).map(Ok)).collect();
    Ok(PromptedInputs { text, image })
}

/// Tuned text path: prompted encoder then adapter. Unit-norm `[n, embed_dim]`.
pub fn tuned_text<T: Scalar>(
    g: &mut Graph<T>,
    enc: &EncoderWeights<Var>,
    cfg: &EncoderConfig,
    tuned: &TunedParams<Var>,
    schedule: Option<&PromptSchedule>,
    seqs: &[Vec<u32>],
) -> Result<Var> {
    let e = text_forward(g, &enc.text, cfg, seqs, schedule.map(|s| s.text.as_slice()))?;
    match &tuned.text_adapter {
        Some(a) => apply_adapter(g, a, e),
        None => Ok(e),
    }
}

/// Tuned image path: prompted encoder then adapter.
pub fn tuned_image<T: Scalar>(
    g: &mut Graph<T>,
    enc: &EncoderWeights<Var>,
    cfg: &EncoderConfig,
    tuned: &TunedParams<Var>,
    schedule: Option<&PromptSchedule>,
    images: &[&[f32]],
) -> Result<Var> {
    let e = image_forward(g, &enc.image, cfg, images, schedule.map(|s| s.vision.as_slice()))?;
    match &tuned.image_adapter {
        Some(a) => apply_adapter(g, a, e),
        None => Ok(e),
    }
}

/// Closed-form count of scalars `init` creates.
pub fn expected_parameter_count(enc: &EncoderConfig, prompts: &PromptConfig, adapters: &AdapterConfig) -> Result<usize> {
    let depth = prompt_depth(prompts, enc.layers)?;
    let w = enc.width;
    let prompt_part = if prompts.m == 0 || depth == 0 {
        0
    } else {
        depth * prompts.m * w + depth * (w * w + w)
    };
    let adapter_part = if adapters.enabled {
        let dims = adapter_dims(adapters, enc.embed_dim)?;
        let one: usize = dims.windows(2).map(|d| d[0] * d[1]).sum();
        one * (usize::from(adapters.placement.text()) + usize::from(adapters.placement.image()))
    } else {
        0
    };
    Ok(prompt_part + adapter_part)
}
