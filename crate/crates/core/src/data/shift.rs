use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, CHANNELS};
use crate::error::{Error, Result};

/// Label-preserving image transforms for domain-shift evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shift {
    Identity,
    /// Rotates the RGB channels.
    PaletteShift,
    /// Additive Gaussian noise, clamped to `[0, 1]`.
    Noise { sigma: f64 },
    /// Four-level posterization followed by inversion.
    StyleRemap,
    /// Replaces every pixel with uniform noise; no class signal survives.
    Scramble,
}

impl fmt::Display for Shift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shift::Identity => write!(f, "identity"),
            Shift::PaletteShift => write!(f, "palette_shift"),
            Shift::Noise { sigma } => write!(f, "noise({sigma})"),
            Shift::StyleRemap => write!(f, "style_remap"),
            Shift::Scramble => write!(f, "scramble"),
        }
    }
}

/// Parses `identity`, `palette_shift`, `style_remap`, `scramble` or
/// `noise(<sigma>)`.
pub fn parse_shift(id: &str) -> Result<Shift> {
    let id = id.trim();
    match id {
        "identity" => return Ok(Shift::Identity),
        "palette_shift" => return Ok(Shift::PaletteShift),
        "style_remap" => return Ok(Shift::StyleRemap),
        "scramble" => return Ok(Shift::Scramble),
        _ => {}
    }
    let sigma = id
        .strip_prefix("noise(")
        .and_then(|s| s.strip_suffix(')'))
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0);
    sigma
        .map(|sigma| Shift::Noise { sigma })
        .ok_or_else(|| Error::Config(format!("unknown shift id `{id}`")))
}

impl Shift {
    pub(crate) fn apply(&self, pixels: &mut [f32], sample_seed: u64) {
        match *self {
            Shift::Identity => {}
            Shift::PaletteShift => {
                for px in pixels.chunks_exact_mut(CHANNELS) {
                    px.rotate_left(1);
                }
            }
            Shift::Noise { sigma } => {
                if sigma > 0.0 {
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5348_4946_5400_0000);
                    let dist = Normal::new(0.0, sigma).expect("finite sigma");
                    for p in pixels.iter_mut() {
                        *p = (*p as f64 + dist.sample(&mut rng)).clamp(0.0, 1.0) as f32;
                    }
                }
            }
            Shift::StyleRemap => {
                for p in pixels.iter_mut() {
                    *p = 1.0 - (*p * 3.0).round() / 3.0;
                }
            }
            Shift::Scramble => {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5343_5241_4d00_0000);
                for p in pixels.iter_mut() {
                    *p = rng.gen::<f32>();
                }
            }
        }
    }
}

/// Applies `shift` to every record of an unshifted dataset.
pub fn make_shifted_variant(source: &Dataset, shift: Shift) -> Result<Dataset> {
    if source.manifest.generator.shift.is_some() {
        return Err(Error::Config(format!(
            "dataset `{}` is already a shifted variant",
            source.manifest.name
        )));
    }
    let mut manifest = source.manifest.clone();
    manifest.name = format!("{}@{shift}", manifest.name);
    manifest.generator.shift = Some(shift);
    let records = source
        .records
        .iter()
        .map(|r| {
            let mut rec = r.clone();
            if shift != Shift::Identity {
                let mut px = r.pixels.to_vec();
                shift.apply(&mut px, r.sample_seed);
                rec.pixels = Arc::new(px);
            }
            rec
        })
        .collect();
    Ok(Dataset { manifest, records })
}
