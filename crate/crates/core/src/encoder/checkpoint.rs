use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DualEncoder, EncoderConfig, EncoderWeights, Tokenizer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::{combine_hashes, load_tensor, read_bytes, save_tensor, write_bytes};
use crate::tensor::Tensor;

pub const BACKBONE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneManifest {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub vocabulary: Tokenizer,
    pub tau: f64,
    /// `(tensor name, payload hash)` in weight order.
    pub tensors: Vec<(String, String)>,
    /// Hash over `tensors`; identifies the backbone.
    pub hash: String,
}

/// Writes `manifest.json` plus one tensor file pair per weight under
/// `dir/weights/`, returning the backbone hash.
pub fn save_backbone<T: Scalar>(enc: &DualEncoder<T>, dir: &Path) -> Result<String> {
    let wdir = dir.join("weights");
    let mut tensors = Vec::new();
    for (name, t) in enc.named_weights() {
        tensors.push((name.clone(), save_tensor(&wdir, &name, t)?));
    }
    let hash = combine_hashes(tensors.iter().map(|(n, h)| (n.as_str(), h.as_str())));
    let manifest = BackboneManifest {
        format_version: BACKBONE_VERSION,
        config: enc.config.clone(),
        vocabulary: enc.tokenizer.clone(),
        tau: enc.tau(),
        tensors,
        hash: hash.clone(),
    };
    write_bytes(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(hash)
}

/// Loads a backbone saved by [`save_backbone`], verifying every payload hash.
/// The result is frozen.
pub fn load_backbone<T: Scalar>(dir: &Path) -> Result<(DualEncoder<T>, BackboneManifest)> {
    let path = dir.join("manifest.json");
    let manifest: BackboneManifest = serde_json::from_slice(&read_bytes(&path)?)?;
    if manifest.format_version != BACKBONE_VERSION {
        return Err(Error::Format {
            path,
            msg: format!("unsupported backbone version {}", manifest.format_version),
        });
    }
    let combined = combine_hashes(manifest.tensors.iter().map(|(n, h)| (n.as_str(), h.as_str())));
    if combined != manifest.hash {
        return Err(Error::HashMismatch {
            what: path.display().to_string(),
            expected: manifest.hash.clone(),
            found: combined,
        });
    }
    manifest.config.validate()?;
    let skeleton: EncoderWeights<Tensor<T>> = EncoderWeights::init(
        &manifest.config,
        manifest.vocabulary.vocab_size(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    );
    let names: Vec<String> = skeleton.named().into_iter().map(|(n, _)| n).collect();
    let stored: Vec<&String> = manifest.tensors.iter().map(|(n, _)| n).collect();
    if names.iter().collect::<Vec<_>>() != stored {
        return Err(Error::Format {
            path,
            msg: "tensor list does not match the encoder layout".into(),
        });
    }
    let wdir = dir.join("weights");
    let mut weights = skeleton;
    for ((name, slot), (_, hash)) in weights.named_mut().into_iter().zip(&manifest.tensors) {
        let t: Tensor<T> = load_tensor(&wdir, &name, Some(hash))?;
        if t.shape() != slot.shape() {
            return Err(Error::shape("load_backbone", &[t.shape(), slot.shape()]));
        }
        *slot = t;
    }
    let enc = DualEncoder {
        config: manifest.config.clone(),
        tokenizer: manifest.vocabulary.clone(),
        weights,
        frozen: true,
    };
    Ok((enc, manifest))
}
