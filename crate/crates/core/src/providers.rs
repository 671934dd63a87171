//! Embedding, segmentation and instruction-rewriting providers.
//!
//! Each capability is a trait so real models can be plugged in through an
//! [`AdapterRegistry`]. The mock implementations are deterministic and cheap,
//! and their tables live in `assets/mock_providers.toml`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use once_cell::sync::Lazy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::image_grid::Image;

/// Regularizer inside the square root of the mock embedder's standard deviation.
pub const STD_EPS: f64 = 1e-12;

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_image(&self, img: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Vec<f64>;
    /// Vector-Jacobian product of [`Embedder::embed_image`] at `img`, or
    /// `None` for non-differentiable providers.
    fn image_vjp(&self, img: &Image, upstream: &[f64]) -> Option<Image>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segmentation {
    pub height: usize,
    pub width: usize,
    /// Row-major class id per pixel.
    pub label_map: Vec<u32>,
    /// `(id, name)` for every id present in `label_map`, ascending by id.
    pub classes: Vec<(u32, String)>,
}

impl Segmentation {
    pub fn class_name(&self, id: u32) -> Option<&str> {
        self.classes
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, n)| n.as_str())
    }

    pub fn count(&self, id: u32) -> usize {
        self.label_map.iter().filter(|&&l| l == id).count()
    }
}

pub trait Segmenter: Send + Sync {
    fn segment(&self, img: &Image) -> Result<Segmentation>;
}

pub trait InstructionUnifier: Send + Sync {
    fn unify(&self, instruction: &str) -> Result<String>;
    /// Subset of `classes` (order kept) that belong to any selected category.
    fn filter_classes(&self, classes: &[String], selected: &[String]) -> Vec<String>;
}

#[derive(Debug, Deserialize)]
struct MockTables {
    channels: usize,
    text: TextTable,
    segmenter: SegmenterTable,
    categories: BTreeMap<String, Vec<String>>,
    unifier: UnifierTable,
}

#[derive(Debug, Deserialize)]
struct TextTable {
    word_scale: f64,
    colors: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Deserialize)]
struct SegmenterTable {
    achromatic_spread: f64,
    bright_threshold: f64,
    skin_ratio_g: f64,
    skin_ratio_b: f64,
    classes: Vec<ClassEntry>,
}

#[derive(Debug, Deserialize)]
struct ClassEntry {
    id: u32,
    name: String,
    bin: String,
}

#[derive(Debug, Deserialize)]
struct UnifierTable {
    strip_prefixes: Vec<String>,
    rules: Vec<RuleEntry>,
    paraphrases: Vec<ParaphraseClass>,
}

#[derive(Debug, Deserialize)]
struct RuleEntry {
    pattern: String,
    replace: String,
}

/// A set of instructions that must all unify to `canonical`.
#[derive(Clone, Debug, Deserialize)]
pub struct ParaphraseClass {
    pub canonical: String,
    pub variants: Vec<String>,
}

static TABLES: Lazy<MockTables> = Lazy::new(|| {
    toml::from_str(include_str!("../assets/mock_providers.toml"))
        .expect("bundled mock provider tables are valid")
});

/// Colour words known to the mock text embedder and scene renderer.
pub fn color_table() -> &'static BTreeMap<String, [f64; 3]> {
    &TABLES.text.colors
}

/// Every `(id, name)` the mock segmenter can emit.
pub fn class_table() -> Vec<(u32, String)> {
    TABLES
        .segmenter
        .classes
        .iter()
        .map(|c| (c.id, c.name.clone()))
        .collect()
}

pub fn category_table() -> &'static BTreeMap<String, Vec<String>> {
    &TABLES.categories
}

pub fn paraphrase_classes() -> &'static [ParaphraseClass] {
    &TABLES.unifier.paraphrases
}

/// Default categories for selective matching.
pub fn default_selected_classes() -> Vec<String> {
    vec!["person".into(), "face".into(), "animal".into()]
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Row ranges `[top, bottom]` splitting `len` into halves; a length-1 axis
/// uses the whole axis for both halves.
fn halves(len: usize) -> [(usize, usize); 2] {
    if len < 2 {
        [(0, len), (0, len)]
    } else {
        [(0, len / 2), (len / 2, len)]
    }
}

fn quadrant_ranges(h: usize, w: usize) -> [((usize, usize), (usize, usize)); 4] {
    let [r0, r1] = halves(h);
    let [c0, c1] = halves(w);
    [(r0, c0), (r0, c1), (r1, c0), (r1, c1)]
}

/// Per-quadrant channel statistics.
///
/// Layout: for each image quadrant (row-major) the `C` channel means followed
/// by the `C` channel standard deviations, giving `2 * C * 4` entries.
#[derive(Clone, Debug)]
pub struct MockEmbedder {
    channels: usize,
}

impl Default for MockEmbedder {
    fn default() -> Self {
        Self {
            channels: TABLES.channels,
        }
    }
}

impl MockEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    fn word_vector(&self, word: &str) -> Vec<f64> {
        let dim = self.dim();
        let c = self.channels;
        if let Some(rgb) = TABLES.text.colors.get(word) {
            let mut v = vec![0.0; dim];
            for q in 0..4 {
                for ch in 0..c {
                    v[q * 2 * c + ch] = rgb[ch % 3];
                }
            }
            return v;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(word.as_bytes()));
        let s = TABLES.text.word_scale;
        (0..dim).map(|_| rng.random_range(-s..=s)).collect()
    }

    fn check_channels(&self, img: &Image) -> Result<()> {
        if img.channels() != self.channels {
            return Err(Error::Dimension(format!(
                "mock embedder expects {} channels, got {}",
                self.channels,
                img.channels()
            )));
        }
        Ok(())
    }
}

impl Embedder for MockEmbedder {
    fn dim(&self) -> usize {
        2 * self.channels * 4
    }

    fn embed_image(&self, img: &Image) -> Result<Vec<f64>> {
        self.check_channels(img)?;
        let c = self.channels;
        let mut out = vec![0.0; self.dim()];
        for (q, ((y0, y1), (x0, x1))) in quadrant_ranges(img.height(), img.width())
            .into_iter()
            .enumerate()
        {
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += img.get(y, x, ch);
                    }
                }
                let mean = sum / n;
                let mut var = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = img.get(y, x, ch) - mean;
                        var += d * d;
                    }
                }
                out[q * 2 * c + ch] = mean;
                out[q * 2 * c + c + ch] = (var / n + STD_EPS).sqrt();
            }
        }
        Ok(out)
    }

    /// Bag of words: colour words contribute their RGB in every quadrant's
    /// mean slots, other words a fixed pseudo-random vector. Empty text
    /// embeds to zero.
    fn embed_text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        for word in text
            .split(|ch: char| !ch.is_alphanumeric())
            .filter(|w| !w.is_empty())
        {
            let word = word.to_lowercase();
            for (a, b) in v.iter_mut().zip(self.word_vector(&word)) {
                *a += b;
            }
        }
        v
    }

    fn image_vjp(&self, img: &Image, upstream: &[f64]) -> Option<Image> {
        if img.channels() != self.channels || upstream.len() != self.dim() {
            return None;
        }
        let c = self.channels;
        let (h, w) = (img.height(), img.width());
        let mut grad = Image::filled(h, w, c, 0.0);
        for (q, ((y0, y1), (x0, x1))) in quadrant_ranges(h, w).into_iter().enumerate() {
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            for ch in 0..c {
                let mut sum = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        sum += img.get(y, x, ch);
                    }
                }
                let mean = sum / n;
                let mut var = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = img.get(y, x, ch) - mean;
                        var += d * d;
                    }
                }
                let std = (var / n + STD_EPS).sqrt();
                let g_mean = upstream[q * 2 * c + ch];
                let g_std = upstream[q * 2 * c + c + ch];
                for y in y0..y1 {
                    for x in x0..x1 {
                        let d = img.get(y, x, ch) - mean;
                        let g = g_mean / n + g_std * d / (n * std);
                        grad.set(y, x, ch, grad.get(y, x, ch) + g);
                    }
                }
            }
        }
        Some(grad)
    }
}

/// Colour-bin segmentation against the fixed class table.
#[derive(Clone, Debug, Default)]
pub struct MockSegmenter;

impl MockSegmenter {
    pub fn new() -> Self {
        Self
    }

    /// Class id of one RGB pixel.
    pub fn classify(rgb: &[f64]) -> u32 {
        let t = &TABLES.segmenter;
        let (r, g, b) = (rgb[0], rgb[1], rgb[2]);
        let max = r.max(g).max(b);
        let min = r.min(g).min(b);
        let band = if max >= t.bright_threshold { "bright" } else { "dark" };
        let bin = if max - min < t.achromatic_spread {
            format!("achromatic-{band}")
        } else if r >= g && r >= b {
            if band == "bright" && g >= t.skin_ratio_g * r && b >= t.skin_ratio_b * r {
                "skin".to_string()
            } else {
                format!("red-{band}")
            }
        } else if g >= b {
            format!("green-{band}")
        } else {
            format!("blue-{band}")
        };
        t.classes
            .iter()
            .find(|c| c.bin == bin)
            .map(|c| c.id)
            .expect("every bin has a class")
    }
}

impl Segmenter for MockSegmenter {
    fn segment(&self, img: &Image) -> Result<Segmentation> {
        if img.channels() < 3 {
            return Err(Error::Dimension(format!(
                "mock segmenter needs RGB input, got {} channels",
                img.channels()
            )));
        }
        let (h, w) = (img.height(), img.width());
        let mut label_map = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                label_map.push(Self::classify(img.pixel(y, x)));
            }
        }
        let present: BTreeSet<u32> = label_map.iter().copied().collect();
        let classes = TABLES
            .segmenter
            .classes
            .iter()
            .filter(|c| present.contains(&c.id))
            .map(|c| (c.id, c.name.clone()))
            .collect();
        Ok(Segmentation {
            height: h,
            width: w,
            label_map,
            classes,
        })
    }
}

/// Rule-table instruction canonicalizer.
pub struct MockUnifier {
    rules: Vec<(Regex, String)>,
    prefixes: Vec<String>,
}

impl fmt::Debug for MockUnifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MockUnifier")
            .field("rules", &self.rules.len())
            .finish()
    }
}

impl Default for MockUnifier {
    fn default() -> Self {
        let rules = TABLES
            .unifier
            .rules
            .iter()
            .map(|r| {
                (
                    Regex::new(&r.pattern).expect("bundled unifier pattern compiles"),
                    r.replace.clone(),
                )
            })
            .collect();
        Self {
            rules,
            prefixes: TABLES.unifier.strip_prefixes.clone(),
        }
    }
}

impl MockUnifier {
    pub fn new() -> Self {
        Self::default()
    }

    fn normalize(&self, s: &str) -> String {
        let mut out = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
        loop {
            let trimmed = out
                .trim_end_matches(|c: char| ".!?;:,".contains(c) || c.is_whitespace())
                .to_string();
            let stripped = self
                .prefixes
                .iter()
                .find_map(|p| trimmed.strip_prefix(p.as_str()))
                .map(|s| s.trim_start().to_string())
                .unwrap_or_else(|| trimmed.clone());
            if stripped == out {
                return out;
            }
            out = stripped;
        }
    }
}

impl InstructionUnifier for MockUnifier {
    fn unify(&self, instruction: &str) -> Result<String> {
        let norm = self.normalize(instruction);
        if norm.is_empty() {
            return Err(Error::Validation(format!(
                "instruction {instruction:?} is empty after normalization"
            )));
        }
        for (re, rep) in &self.rules {
            if re.is_match(&norm) {
                return Ok(re.replace(&norm, rep.as_str()).into_owned());
            }
        }
        Ok(norm)
    }

    fn filter_classes(&self, classes: &[String], selected: &[String]) -> Vec<String> {
        let mut wanted: BTreeSet<&str> = BTreeSet::new();
        for s in selected {
            match TABLES.categories.get(s) {
                Some(members) => wanted.extend(members.iter().map(String::as_str)),
                None => {
                    wanted.insert(s.as_str());
                }
            }
        }
        classes
            .iter()
            .filter(|c| wanted.contains(c.as_str()))
            .cloned()
            .collect()
    }
}

/// Which implementation backs a provider slot: `mock` or `external:<name>`.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum ProviderChoice {
    #[default]
    Mock,
    External(String),
}

impl std::str::FromStr for ProviderChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mock" => Ok(ProviderChoice::Mock),
            other => match other.strip_prefix("external:") {
                Some(name) if !name.is_empty() => Ok(ProviderChoice::External(name.to_string())),
                _ => Err(Error::Config(format!(
                    "provider must be `mock` or `external:<adapter-name>`, got {other:?}"
                ))),
            },
        }
    }
}

impl fmt::Display for ProviderChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProviderChoice::Mock => f.write_str("mock"),
            ProviderChoice::External(n) => write!(f, "external:{n}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct ProviderConfig {
    pub embedder: ProviderChoice,
    pub segmenter: ProviderChoice,
    pub unifier: ProviderChoice,
}

type Factory<T> = Box<dyn Fn() -> Result<Arc<T>> + Send + Sync>;

/// Named constructors for real-model adapters.
#[derive(Default)]
pub struct AdapterRegistry {
    embedders: HashMap<String, Factory<dyn Embedder>>,
    segmenters: HashMap<String, Factory<dyn Segmenter>>,
    unifiers: HashMap<String, Factory<dyn InstructionUnifier>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_embedder(
        &mut self,
        name: &str,
        f: impl Fn() -> Result<Arc<dyn Embedder>> + Send + Sync + 'static,
    ) {
        self.embedders.insert(name.to_string(), Box::new(f));
    }

    pub fn register_segmenter(
        &mut self,
        name: &str,
        f: impl Fn() -> Result<Arc<dyn Segmenter>> + Send + Sync + 'static,
    ) {
        self.segmenters.insert(name.to_string(), Box::new(f));
    }

    pub fn register_unifier(
        &mut self,
        name: &str,
        f: impl Fn() -> Result<Arc<dyn InstructionUnifier>> + Send + Sync + 'static,
    ) {
        self.unifiers.insert(name.to_string(), Box::new(f));
    }
}

fn lookup<T: ?Sized>(map: &HashMap<String, Factory<T>>, kind: &str, name: &str) -> Result<Arc<T>> {
    map.get(name)
        .ok_or_else(|| Error::Config(format!("no external {kind} adapter named {name:?} is registered")))
        .and_then(|f| f())
}

/// The three providers a run uses.
#[derive(Clone)]
pub struct Providers {
    pub embedder: Arc<dyn Embedder>,
    pub segmenter: Arc<dyn Segmenter>,
    pub unifier: Arc<dyn InstructionUnifier>,
}

impl fmt::Debug for Providers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Providers")
            .field("embedder_dim", &self.embedder.dim())
            .finish_non_exhaustive()
    }
}

impl Providers {
    pub fn mock() -> Self {
        Self {
            embedder: Arc::new(MockEmbedder::new()),
            segmenter: Arc::new(MockSegmenter::new()),
            unifier: Arc::new(MockUnifier::new()),
        }
    }

    pub fn from_config(cfg: &ProviderConfig, registry: &AdapterRegistry) -> Result<Self> {
        let embedder: Arc<dyn Embedder> = match &cfg.embedder {
            ProviderChoice::Mock => Arc::new(MockEmbedder::new()),
            ProviderChoice::External(n) => lookup(&registry.embedders, "embedder", n)?,
        };
        let segmenter: Arc<dyn Segmenter> = match &cfg.segmenter {
            ProviderChoice::Mock => Arc::new(MockSegmenter::new()),
            ProviderChoice::External(n) => lookup(&registry.segmenters, "segmenter", n)?,
        };
        let unifier: Arc<dyn InstructionUnifier> = match &cfg.unifier {
            ProviderChoice::Mock => Arc::new(MockUnifier::new()),
            ProviderChoice::External(n) => lookup(&registry.unifiers, "unifier", n)?,
        };
        Ok(Self {
            embedder,
            segmenter,
            unifier,
        })
    }
}
