//! Paired-edit dataset generation: prompts, synthesis with best-of-K
//! filtering, grid packing, the train/test split and the on-disk layout.

pub mod manifest;
pub mod scene;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::directional_similarity;
use crate::image_grid::{compose, mask_query, Image, ImageGrid};
use crate::providers::{default_selected_classes, Embedder, Providers};
use crate::seed::{derive_seed, stream};
use crate::selective::build_mask;

pub use manifest::{GroupEntry, LoadedRecord, Manifest, ManifestHeader, PackedEntry, PairEntry, Split};
pub use scene::{PairSynthesizer, ProceduralSynthesizer, Scene, Shape, Size};

/// Colours an edited object may take. The first three segment as living classes.
pub const OBJECT_COLORS: [&str; 8] = ["red", "tan", "brown", "green", "blue", "purple", "navy", "white"];
pub const BACKGROUND_COLORS: [&str; 7] = ["green", "olive", "blue", "navy", "white", "black", "gray"];

/// One instruction and the caption pairs that realise it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupPrompt {
    pub instruction: String,
    pub caption_pairs: Vec<(String, String)>,
}

pub trait PromptGenerator: Send + Sync {
    fn generate(&self, seed: u64) -> Result<GroupPrompt>;
}

/// Seeded templates over four edit families: object recolour, background
/// recolour, shape change and resize. Instructions use varied phrasings.
#[derive(Clone, Debug)]
pub struct MockPromptGenerator {
    pub pairs_per_group: usize,
}

impl Default for MockPromptGenerator {
    fn default() -> Self {
        Self { pairs_per_group: 5 }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str], avoid: &[&str]) -> &'a str {
    let allowed: Vec<&str> = items.iter().copied().filter(|c| !avoid.contains(c)).collect();
    allowed.choose(rng).copied().expect("palette has a colour left")
}

fn random_size(rng: &mut ChaCha8Rng) -> Size {
    *[Size::Small, Size::Medium, Size::Large].choose(rng).expect("non-empty")
}

fn scene(size: Size, color: &str, shape: Shape, background: &str) -> Scene {
    Scene {
        size,
        color: color.to_string(),
        shape,
        background: background.to_string(),
    }
}

impl PromptGenerator for MockPromptGenerator {
    fn generate(&self, seed: u64) -> Result<GroupPrompt> {
        if self.pairs_per_group == 0 {
            return Err(Error::Config("pairs_per_group must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = rng.random_range(0..4);
        let n = self.pairs_per_group;
        let mut pairs = Vec::with_capacity(n);
        let instruction = match family {
            0 => {
                let shape = *Shape::ALL.choose(&mut rng).expect("non-empty");
                let target = pick(&mut rng, &OBJECT_COLORS, &[]);
                for _ in 0..n {
                    let from = pick(&mut rng, &OBJECT_COLORS, &[target]);
                    let bg = pick(&mut rng, &BACKGROUND_COLORS, &[target, from]);
                    let size = random_size(&mut rng);
                    pairs.push((scene(size, from, shape, bg), scene(size, target, shape, bg)));
                }
                let s = shape.name();
                let phrasings = [
                    format!("Make the {s} {target}."),
                    format!("Paint the {s} {target}"),
                    format!("change the {s} to {target}"),
                    format!("please turn the {s} {target}"),
                    format!("Color the {s} {target}!"),
                ];
                phrasings.choose(&mut rng).expect("non-empty").clone()
            }
            1 => {
                let target = pick(&mut rng, &BACKGROUND_COLORS, &[]);
                for _ in 0..n {
                    let shape = *Shape::ALL.choose(&mut rng).expect("non-empty");
                    let bg = pick(&mut rng, &BACKGROUND_COLORS, &[target]);
                    let fg = pick(&mut rng, &OBJECT_COLORS, &[target, bg]);
                    let size = random_size(&mut rng);
                    pairs.push((scene(size, fg, shape, bg), scene(size, fg, shape, target)));
                }
                let phrasings = [
                    format!("Make the background {target}."),
                    format!("Paint the background {target}"),
                    format!("Could you colour the background {target}?"),
                    format!("change the background to {target}"),
                ];
                phrasings.choose(&mut rng).expect("non-empty").clone()
            }
            2 => {
                let from = *Shape::ALL.choose(&mut rng).expect("non-empty");
                let others: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != from).collect();
                let to = *others.choose(&mut rng).expect("non-empty");
                for _ in 0..n {
                    let fg = pick(&mut rng, &OBJECT_COLORS, &[]);
                    let bg = pick(&mut rng, &BACKGROUND_COLORS, &[fg]);
                    let size = random_size(&mut rng);
                    pairs.push((scene(size, fg, from, bg), scene(size, fg, to, bg)));
                }
                let (a, b) = (from.name(), to.name());
                let phrasings = [
                    format!("Turn the {a} into a {b}."),
                    format!("Make the {a} a {b}"),
                    format!("Replace the {a} with a {b}"),
                    format!("change the {a} to a {b}"),
                ];
                phrasings.choose(&mut rng).expect("non-empty").clone()
            }
            _ => {
                let shape = *Shape::ALL.choose(&mut rng).expect("non-empty");
                let bigger = rng.random_bool(0.5);
                for _ in 0..n {
                    let fg = pick(&mut rng, &OBJECT_COLORS, &[]);
                    let bg = pick(&mut rng, &BACKGROUND_COLORS, &[fg]);
                    let (from, to) = if bigger {
                        (*[Size::Small, Size::Medium].choose(&mut rng).expect("non-empty"), Size::Large)
                    } else {
                        (*[Size::Large, Size::Medium].choose(&mut rng).expect("non-empty"), Size::Small)
                    };
                    pairs.push((scene(from, fg, shape, bg), scene(to, fg, shape, bg)));
                }
                let (s, word) = (shape.name(), if bigger { "bigger" } else { "smaller" });
                let phrasings = [
                    format!("Make the {s} {word}."),
                    format!("make the {s} {word}"),
                    format!("Please make the {s} {word}!"),
                ];
                phrasings.choose(&mut rng).expect("non-empty").clone()
            }
        };
        Ok(GroupPrompt {
            instruction,
            caption_pairs: pairs.into_iter().map(|(a, b)| (a.caption(), b.caption())).collect(),
        })
    }
}

/// Index of the highest finite score, first on ties.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(v) = s.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub caption_in: String,
    pub caption_out: String,
    pub input: Image,
    pub output: Image,
    pub score: f64,
    pub candidate_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EditGroup {
    pub index: usize,
    pub instruction: String,
    pub seed: u64,
    pub pairs: Vec<ImagePair>,
}

impl EditGroup {
    pub fn id(&self) -> String {
        format!("g{:04}", self.index)
    }
}

/// Draw `k` candidates per caption pair and keep the one with the highest
/// directional similarity. Pairs where every candidate failed are dropped;
/// the group is dropped (`None`) when fewer than two pairs remain.
pub fn synthesize_group(
    index: usize,
    prompt: &GroupPrompt,
    synth: &dyn PairSynthesizer,
    emb: &dyn Embedder,
    k: usize,
    size: usize,
    seed: u64,
) -> Result<Option<EditGroup>> {
    if k == 0 {
        return Err(Error::Config("candidates per pair must be positive".into()));
    }
    let mut pairs = Vec::new();
    for (j, (cin, cout)) in prompt.caption_pairs.iter().enumerate() {
        let mut candidates = Vec::with_capacity(k);
        let mut scores = Vec::with_capacity(k);
        for c in 0..k {
            let cseed = derive_seed(seed, j as u64, c as u64);
            match synth.synthesize(cin, cout, size, cseed) {
                Ok((a, b)) => {
                    let s = directional_similarity(&a, &b, cin, cout, emb)?;
                    scores.push(Some(s));
                    candidates.push(Some((a, b, cseed)));
                }
                Err(e) => {
                    log::debug!("candidate {c} for {cout:?} failed: {e}");
                    scores.push(None);
                    candidates.push(None);
                }
            }
        }
        match select_best(&scores) {
            Some(b) => {
                let (input, output, candidate_seed) = candidates[b].take().expect("scored candidate exists");
                pairs.push(ImagePair {
                    caption_in: cin.clone(),
                    caption_out: cout.clone(),
                    input,
                    output,
                    score: scores[b].expect("scored"),
                    candidate_seed,
                });
            }
            None => log::info!("dropping pair {cin:?} -> {cout:?}: all {k} candidates failed"),
        }
    }
    if pairs.len() < 2 {
        log::info!(
            "dropping group {index} ({:?}): {} usable pair(s)",
            prompt.instruction,
            pairs.len()
        );
        return Ok(None);
    }
    Ok(Some(EditGroup {
        index,
        instruction: prompt.instruction.clone(),
        seed,
        pairs,
    }))
}

/// A packed 2x2 training grid: example pair on top, query pair below.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedGrid {
    pub example: usize,
    pub query: usize,
    pub train_grid: ImageGrid,
    pub cond_grid: ImageGrid,
}

/// Shuffle the group's pairs and pack consecutive ones as (example, query).
/// A leftover odd pair becomes the query of one more grid with a random
/// other pair as its example, so `n` pairs give `ceil(n / 2)` grids.
pub fn pack_group(group: &EditGroup, grey: f64, seed: u64) -> Result<Vec<PackedGrid>> {
    let n = group.pairs.len();
    if n < 2 {
        return Err(Error::Validation(format!(
            "group {} has {n} pair(s); packing needs at least 2",
            group.id()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(n.div_ceil(2));
    for chunk in order.chunks(2) {
        let (example, query) = match *chunk {
            [e, q] => (e, q),
            [q] => {
                let others: Vec<usize> = (0..n).filter(|&i| i != q).collect();
                (*others.choose(&mut rng).expect("n >= 2"), q)
            }
            _ => unreachable!("chunks of two"),
        };
        let (e, q) = (&group.pairs[example], &group.pairs[query]);
        let train_grid = compose(&e.input, &e.output, &q.input, &q.output)?;
        let cond_grid = mask_query(&train_grid, grey)?;
        out.push(PackedGrid {
            example,
            query,
            train_grid,
            cond_grid,
        });
    }
    Ok(out)
}

/// Seeded split of `n` groups: `round(n · test_fraction)` go to test.
pub fn split_groups(n: usize, test_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} is outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut out = vec![Split::Train; n];
    for &i in &order[..n_test] {
        out[i] = Split::Test;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub groups: usize,
    pub seed: u64,
    pub candidates_per_pair: usize,
    pub pairs_per_group: usize,
    pub image_size: usize,
    pub test_fraction: f64,
    pub grey: f64,
    pub selected_classes: Vec<String>,
    pub failure_rate: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            groups: 40,
            seed: 0,
            candidates_per_pair: 5,
            pairs_per_group: 5,
            image_size: 32,
            test_fraction: 0.2,
            grey: 0.5,
            selected_classes: default_selected_classes(),
            failure_rate: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::Validation("dataset needs at least one group".into()));
        }
        if self.candidates_per_pair == 0 || self.pairs_per_group < 2 {
            return Err(Error::Config(
                "candidates_per_pair must be >= 1 and pairs_per_group >= 2".into(),
            ));
        }
        if self.image_size < 4 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be even and at least 4",
                self.image_size
            )));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) || !(0.0..=1.0).contains(&self.grey) {
            return Err(Error::Config("test_fraction and grey must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.failure_rate) {
            return Err(Error::Config(format!("failure_rate {} must lie in [0, 1)", self.failure_rate)));
        }
        Ok(())
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Generate, filter, pack and split a dataset into `out_dir`, then write
/// its manifest.
pub fn build_dataset(
    cfg: &DatasetConfig,
    out_dir: &Path,
    providers: &Providers,
    prompts: &dyn PromptGenerator,
    synth: &dyn PairSynthesizer,
) -> Result<Manifest> {
    cfg.validate()?;
    ensure_dir(out_dir)?;
    let mut groups = Vec::new();
    for gi in 0..cfg.groups {
        let prompt = prompts.generate(derive_seed(cfg.seed, stream::PROMPTS, gi as u64))?;
        let seed = derive_seed(cfg.seed, stream::SYNTHESIS, gi as u64);
        if let Some(g) = synthesize_group(
            gi,
            &prompt,
            synth,
            providers.embedder.as_ref(),
            cfg.candidates_per_pair,
            cfg.image_size,
            seed,
        )? {
            groups.push(g);
        }
    }
    if groups.is_empty() {
        return Err(Error::Validation(format!(
            "all {} groups were dropped during synthesis",
            cfg.groups
        )));
    }
    let splits = split_groups(groups.len(), cfg.test_fraction, derive_seed(cfg.seed, stream::SPLIT, 0))?;

    let mut group_entries = Vec::new();
    let mut packed_entries = Vec::new();
    for (g, split) in groups.iter().zip(splits) {
        let id = g.id();
        let pair_dir = out_dir.join("pairs").join(&id);
        ensure_dir(&pair_dir)?;
        let mut pairs = Vec::new();
        for (j, p) in g.pairs.iter().enumerate() {
            let input = format!("pairs/{id}/{j}_in.png");
            let output = format!("pairs/{id}/{j}_out.png");
            p.input.save_png(&out_dir.join(&input))?;
            p.output.save_png(&out_dir.join(&output))?;
            pairs.push(PairEntry {
                index: j,
                caption_in: p.caption_in.clone(),
                caption_out: p.caption_out.clone(),
                input,
                output,
                score: p.score,
                candidate_seed: p.candidate_seed,
            });
        }
        group_entries.push(GroupEntry {
            id: id.clone(),
            split,
            instruction: g.instruction.clone(),
            unified: providers.unifier.unify(&g.instruction)?,
            seed: g.seed,
            pairs,
        });

        ensure_dir(&out_dir.join("packed"))?;
        for pg in pack_group(g, cfg.grey, derive_seed(cfg.seed, stream::PACKING, g.index as u64))? {
            let rid = format!("r{:04}", packed_entries.len());
            let mask = build_mask(
                &pg.train_grid,
                providers.segmenter.as_ref(),
                providers.unifier.as_ref(),
                &cfg.selected_classes,
            )?;
            let (train_grid, cond_grid, mask_path) = (
                format!("packed/{rid}_train_grid.png"),
                format!("packed/{rid}_cond_grid.png"),
                format!("packed/{rid}_mask.png"),
            );
            pg.train_grid.save_png(&out_dir.join(&train_grid))?;
            pg.cond_grid.save_png(&out_dir.join(&cond_grid))?;
            mask.save_png(&out_dir.join(&mask_path))?;
            packed_entries.push(PackedEntry {
                id: rid,
                group: id.clone(),
                split,
                example: pg.example,
                query: pg.query,
                train_grid,
                cond_grid,
                mask: mask_path,
                mask_pixels: mask.count(),
                mask_classes: mask.source_classes,
            });
        }
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        header: ManifestHeader {
            version: manifest::MANIFEST_VERSION,
            seed: cfg.seed,
            groups_requested: cfg.groups,
            candidates_per_pair: cfg.candidates_per_pair,
            image_size: cfg.image_size,
            test_fraction: cfg.test_fraction,
            grey: cfg.grey,
            selected_classes: cfg.selected_classes.clone(),
        },
        groups: group_entries,
        packed: packed_entries,
    };
    let path = manifest.write()?;
    log::info!(
        "wrote {} groups ({} train / {} test records) to {}",
        manifest.groups.len(),
        manifest.records(Split::Train).len(),
        manifest.records(Split::Test).len(),
        path.display()
    );
    Ok(manifest)
}

/// Build with the mock prompt generator and procedural synthesizer.
pub fn build_default_dataset(cfg: &DatasetConfig, out_dir: &Path, providers: &Providers) -> Result<Manifest> {
    let prompts = MockPromptGenerator {
        pairs_per_group: cfg.pairs_per_group,
    };
    let synth = ProceduralSynthesizer {
        failure_rate: cfg.failure_rate,
        ..ProceduralSynthesizer::default()
    };
    build_dataset(cfg, out_dir, providers, &prompts, &synth)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join(manifest::MANIFEST_FILE)
}
