use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ClassAttributes, GeneratorParams, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Striped,
    Checkered,
    Dotted,
    Ringed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Horizontal,
    Vertical,
    /// Either diagonal, drawn per image; mirror images stay in the class.
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Palette {
    Warm,
    Cool,
    Forest,
    Dusk,
    Mono,
    Candy,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Striped,
        Pattern::Checkered,
        Pattern::Dotted,
        Pattern::Ringed,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Pattern::Striped => "striped",
            Pattern::Checkered => "checkered",
            Pattern::Dotted => "dotted",
            Pattern::Ringed => "ringed",
        }
    }
}

impl Orientation {
    pub const ALL: [Orientation; 3] = [Orientation::Horizontal, Orientation::Vertical, Orientation::Diagonal];

    pub fn word(self) -> &'static str {
        match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Vertical => "vertical",
            Orientation::Diagonal => "diagonal",
        }
    }

    /// Angle of the direction along which intensity varies.
    fn angle<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            Orientation::Horizontal => PI / 2.0,
            Orientation::Vertical => 0.0,
            Orientation::Diagonal if rng.gen_bool(0.5) => PI / 4.0,
            Orientation::Diagonal => -PI / 4.0,
        }
    }
}

impl Palette {
    pub const ALL: [Palette; 6] = [
        Palette::Warm,
        Palette::Cool,
        Palette::Forest,
        Palette::Dusk,
        Palette::Mono,
        Palette::Candy,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Palette::Warm => "warm",
            Palette::Cool => "cool",
            Palette::Forest => "forest",
            Palette::Dusk => "dusk",
            Palette::Mono => "mono",
            Palette::Candy => "candy",
        }
    }

    /// Foreground and background RGB.
    pub fn colors(self) -> ([f64; 3], [f64; 3]) {
        match self {
            Palette::Warm => ([0.9, 0.3, 0.1], [1.0, 0.8, 0.3]),
            Palette::Cool => ([0.1, 0.3, 0.8], [0.5, 0.9, 0.9]),
            Palette::Forest => ([0.1, 0.5, 0.1], [0.5, 0.35, 0.15]),
            Palette::Dusk => ([0.4, 0.1, 0.5], [0.95, 0.55, 0.4]),
            Palette::Mono => ([0.1, 0.1, 0.1], [0.9, 0.9, 0.9]),
            Palette::Candy => ([0.95, 0.3, 0.6], [0.6, 0.95, 0.6]),
        }
    }
}

/// Renders one `[size, size, 3]` image for a class, deterministic in `seed`.
pub fn render_image(attrs: &ClassAttributes, params: &GeneratorParams, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = params.image_size;
    let angle = attrs.orientation.angle(&mut rng) + rng.gen_range(-0.14..0.14);
    let freq = attrs.frequency * rng.gen_range(0.9..1.1);
    let (nx, ny) = (angle.cos(), angle.sin());
    let (tx, ty) = (-ny, nx);
    let phase_a = rng.gen_range(0.0..2.0 * PI);
    let phase_b = rng.gen_range(0.0..2.0 * PI);
    let center = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
    let (fg, bg) = attrs.palette.colors();
    let j = params.color_jitter;
    let mut jitter = |c: [f64; 3]| c.map(|v| (v + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 }).clamp(0.0, 1.0));
    let (fg, bg) = (jitter(fg), jitter(bg));
    let noise = Normal::new(0.0, params.noise.max(0.0)).expect("finite noise");

    let mut out = Vec::with_capacity(size * size * CHANNELS);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let along = nx * u + ny * v;
            let across = tx * u + ty * v;
            let s = match attrs.pattern {
                Pattern::Striped => 0.5 + 0.5 * (2.0 * PI * freq * along + phase_a).sin(),
                Pattern::Checkered => {
                    let a = (2.0 * PI * freq * along + phase_a).sin();
                    let b = (PI * freq * across + phase_b).sin();
                    0.5 + 0.5 * (a * b).signum() * (a * b).abs().sqrt()
                }
                Pattern::Dotted => {
                    let a = (2.0 * PI * freq * along + phase_a).cos().max(0.0);
                    let b = (PI * freq * across + phase_b).cos().max(0.0);
                    (a * b).sqrt()
                }
                Pattern::Ringed => {
                    let (du, dv) = (u - center.0, v - center.1);
                    let pa = nx * du + ny * dv;
                    let pc = tx * du + ty * dv;
                    let d = (pa * pa + 0.25 * pc * pc).sqrt();
                    0.5 + 0.5 * (2.0 * PI * freq * d + phase_a).sin()
                }
            };
            for c in 0..CHANNELS {
                let mut p = bg[c] + (fg[c] - bg[c]) * s;
                if params.noise > 0.0 {
                    p += noise.sample(&mut rng);
                }
                out.push(p.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}
