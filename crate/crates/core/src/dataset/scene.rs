//! Captioned single-shape scenes and their procedural renderer.

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;

use crate::error::{Error, Result};
use crate::image_grid::Image;
use crate::providers::color_table;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sh| sh.name() == s)
    }

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Diamond => dx.abs() + dy.abs() <= r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub fn word(self) -> Option<&'static str> {
        match self {
            Size::Small => Some("small"),
            Size::Medium => None,
            Size::Large => Some("large"),
        }
    }

    fn radius_fraction(self) -> f64 {
        match self {
            Size::Small => 0.16,
            Size::Medium => 0.26,
            Size::Large => 0.38,
        }
    }
}

/// "a [small|large] {color} {shape} on a {color} background".
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub size: Size,
    pub color: String,
    pub shape: Shape,
    pub background: String,
}

static CAPTION: Lazy<Regex> = Lazy::new(|| {
    Regex::new(r"^an? (?:(small|large) )?([a-z]+) ([a-z]+) on an? ([a-z]+) background$")
        .expect("caption pattern compiles")
});

impl Scene {
    pub fn parse(caption: &str) -> Result<Self> {
        let caps = CAPTION
            .captures(caption.trim())
            .ok_or_else(|| Error::Validation(format!("unrecognised caption {caption:?}")))?;
        let size = match caps.get(1).map(|m| m.as_str()) {
            Some("small") => Size::Small,
            Some("large") => Size::Large,
            _ => Size::Medium,
        };
        let known = |c: &str| -> Result<String> {
            if color_table().contains_key(c) {
                Ok(c.to_string())
            } else {
                Err(Error::Validation(format!("unknown colour {c:?} in caption {caption:?}")))
            }
        };
        let shape = Shape::parse(&caps[3])
            .ok_or_else(|| Error::Validation(format!("unknown shape {:?} in caption {caption:?}", &caps[3])))?;
        Ok(Self {
            size,
            color: known(&caps[2])?,
            shape,
            background: known(&caps[4])?,
        })
    }

    pub fn caption(&self) -> String {
        let size = self.size.word().map(|w| format!("{w} ")).unwrap_or_default();
        format!(
            "a {size}{} {} on a {} background",
            self.color,
            self.shape.name(),
            self.background
        )
    }
}

/// Anything that turns a caption pair into an image pair.
pub trait PairSynthesizer: Send + Sync {
    fn synthesize(&self, caption_in: &str, caption_out: &str, size: usize, seed: u64) -> Result<(Image, Image)>;
}

/// Renders both captions with shared seeded geometry. The edit is applied
/// with a seeded strength, and a small fraction of draws fail outright.
#[derive(Clone, Debug)]
pub struct ProceduralSynthesizer {
    pub failure_rate: f64,
    pub texture: f64,
}

impl Default for ProceduralSynthesizer {
    fn default() -> Self {
        Self {
            failure_rate: 0.1,
            texture: 0.03,
        }
    }
}

fn lerp(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + s * (b[i] - a[i]))
}

fn render(
    size: usize,
    shape: Shape,
    radius: f64,
    center: (f64, f64),
    fg: [f64; 3],
    bg: [f64; 3],
    texture: &[f64],
) -> Image {
    let mut img = Image::filled(size, size, 3, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - center.0, y as f64 + 0.5 - center.1);
            let c = if shape.contains(dx, dy, radius) { fg } else { bg };
            for ch in 0..3 {
                img.set(y, x, ch, (c[ch] + texture[y * size + x]).clamp(0.0, 1.0));
            }
        }
    }
    img.quantized()
}

impl PairSynthesizer for ProceduralSynthesizer {
    fn synthesize(&self, caption_in: &str, caption_out: &str, size: usize, seed: u64) -> Result<(Image, Image)> {
        let a = Scene::parse(caption_in)?;
        let b = Scene::parse(caption_out)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if rng.random::<f64>() < self.failure_rate {
            return Err(Error::Validation(format!("synthesis of {caption_out:?} failed")));
        }
        let s = size as f64;
        let center = (
            s / 2.0 + rng.random_range(-0.12..0.12) * s,
            s / 2.0 + rng.random_range(-0.12..0.12) * s,
        );
        let jitter = rng.random_range(0.9..1.1);
        let strength = rng.random_range(0.55..1.0);
        let texture: Vec<f64> = (0..size * size)
            .map(|_| rng.random_range(-self.texture..=self.texture))
            .collect();
        let colors = color_table();
        let (fa, ba) = (colors[&a.color], colors[&a.background]);
        let (fb, bb) = (lerp(fa, colors[&b.color], strength), lerp(ba, colors[&b.background], strength));
        let ra = a.size.radius_fraction() * s * jitter;
        let rb = (ra + strength * (b.size.radius_fraction() * s * jitter - ra)).max(1.0);
        Ok((
            render(size, a.shape, ra, center, fa, ba, &texture),
            render(size, b.shape, rb, center, fb, bb, &texture),
        ))
    }
}
