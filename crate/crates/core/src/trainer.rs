//! Joint training of the noise-prediction loss with the editing-shift and
//! selective-area losses, instruction dropout and unification augmentation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::dataset::{LoadedRecord, Manifest, Split};
use crate::diffusion::{forward_noise, reconstruct_x0_graph, Denoiser, DenoiserConfig};
use crate::editing_shift::{grid_shift, training_shift_loss_graph};
use crate::error::{Error, Result};
use crate::image_grid::{mask_examples, ImageGrid};
use crate::instruction::{augment_batch, text_embedding, InstructionRecord};
use crate::nn::{Bound, ParamStore};
use crate::providers::{Embedder, InstructionUnifier};
use crate::seed::{derive_seed, stream};
use crate::selective::{selective_area_loss_graph, SelectiveMask};
use crate::tensor::Tensor;

/// How a dropped record loses its instructions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMode {
    /// A coin flip drops either the text or the example row.
    #[default]
    Either,
    /// Both are dropped together.
    Both,
}

impl std::str::FromStr for DropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "either" => Ok(DropMode::Either),
            "both" => Ok(DropMode::Both),
            other => Err(Error::Config(format!("drop mode must be either or both, got {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dropped {
    #[default]
    None,
    Text,
    Visual,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_es: f64,
    pub lambda_sam: f64,
    pub drop_fraction: f64,
    pub drop_mode: DropMode,
    pub liu_fraction: f64,
    /// Seed for batches, noise, dropout and augmentation.
    pub seed: u64,
    /// Seed for parameter initialisation.
    pub model_seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only the final one.
    pub checkpoint_every: usize,
    pub sam_normalize_by_mask: bool,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            lambda_es: 0.1,
            lambda_sam: 1.0,
            drop_fraction: 0.15,
            drop_mode: DropMode::Either,
            liu_fraction: 0.5,
            seed: 0,
            model_seed: 0,
            checkpoint_every: 100,
            sam_normalize_by_mask: false,
            model: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.learning_rate, self.weight_decay, self.lambda_es, self.lambda_sam];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(
                "learning_rate, weight_decay, lambda_es and lambda_sam must be finite and >= 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_fraction) || !(0.0..=1.0).contains(&self.liu_fraction) {
            return Err(Error::Config("drop_fraction and liu_fraction must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.model.validate()
    }

    fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_es: self.lambda_es,
            lambda_sam: self.lambda_sam,
            sam_normalize_by_mask: self.sam_normalize_by_mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_es: f64,
    pub lambda_sam: f64,
    pub sam_normalize_by_mask: bool,
}

/// One record as seen by a training step.
#[derive(Clone, Debug)]
pub struct TrainRecord {
    pub id: String,
    pub text: String,
    pub train_grid: ImageGrid,
    pub cond_grid: ImageGrid,
    pub mask: SelectiveMask,
    pub dropped: Dropped,
}

impl TrainRecord {
    pub fn from_loaded(rec: &LoadedRecord) -> Self {
        Self {
            id: rec.id.clone(),
            text: rec.instruction.clone(),
            train_grid: rec.train_grid.clone(),
            cond_grid: rec.cond_grid.clone(),
            mask: rec.mask.clone(),
            dropped: Dropped::None,
        }
    }
}

/// With probability `drop_fraction`, blank the text or grey the example row
/// of the conditioning grid (or both, per `mode`).
pub fn apply_dropout<R: Rng + ?Sized>(
    record: &TrainRecord,
    drop_fraction: f64,
    mode: DropMode,
    grey: f64,
    rng: &mut R,
) -> Result<TrainRecord> {
    if !(0.0..=1.0).contains(&drop_fraction) {
        return Err(Error::Config(format!("drop fraction {drop_fraction} is outside [0, 1]")));
    }
    let mut out = record.clone();
    if !rng.random_bool(drop_fraction) {
        return Ok(out);
    }
    let which = match mode {
        DropMode::Either if rng.random_bool(0.5) => Dropped::Text,
        DropMode::Either => Dropped::Visual,
        DropMode::Both => Dropped::Both,
    };
    if matches!(which, Dropped::Text | Dropped::Both) {
        out.text.clear();
    }
    if matches!(which, Dropped::Visual | Dropped::Both) {
        out.cond_grid = mask_examples(&out.cond_grid, grey)?;
    }
    out.dropped = which;
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub diffusion: f64,
    pub shift: f64,
    pub selective: f64,
    pub total: f64,
}

impl LossTerms {
    fn all_finite(&self) -> bool {
        [self.diffusion, self.shift, self.selective, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    fn add_scaled(&mut self, o: &LossTerms, s: f64) {
        self.diffusion += s * o.diffusion;
        self.shift += s * o.shift;
        self.selective += s * o.selective;
        self.total += s * o.total;
    }
}

struct LossVars {
    diffusion: Var,
    shift: Option<Var>,
    selective: Option<Var>,
    total: Var,
}

/// Composite loss of one record at timestep `t` with noise `eps`.
#[allow(clippy::too_many_arguments)]
fn record_loss(
    g: &mut Graph,
    p: &Bound,
    model: &Denoiser,
    rec: &TrainRecord,
    t: usize,
    eps: &Tensor,
    w: &LossWeights,
    emb: &Arc<dyn Embedder>,
) -> Result<LossVars> {
    let sched = model.schedule();
    let x0 = model.encode_grid(&rec.train_grid)?;
    let x_t = forward_noise(&x0, t, eps, sched)?;
    let cond = model.encode_grid(&rec.cond_grid)?;
    let text = text_embedding(&rec.text, emb.as_ref(), model.config().text_dim)?;

    let xv = g.constant(x_t);
    let cv = g.constant(cond);
    let eps_hat = model.forward(g, p, xv, t, &text, Some(cv))?;
    let ev = g.constant(eps.clone());
    let d = g.sub(eps_hat, ev);
    let sq = g.sum_sq(d);
    let diffusion = g.scale(sq, 1.0 / eps.len() as f64);
    let mut total = diffusion;

    let shift = if w.lambda_es > 0.0 {
        let truth = grid_shift(&rec.train_grid, emb.as_ref())?;
        let l = training_shift_loss_graph(g, eps_hat, xv, t, &truth, sched, model.latent(), emb)?;
        let s = g.scale(l, w.lambda_es);
        total = g.add(total, s);
        Some(l)
    } else {
        None
    };
    let selective = if w.lambda_sam > 0.0 {
        let x0_hat = reconstruct_x0_graph(g, xv, eps_hat, t, sched)?;
        let decoded = model.latent().decode_graph(g, x0_hat);
        let pseudo = g.clamp01(decoded);
        let truth = rec.train_grid.image().to_chw();
        let l = selective_area_loss_graph(g, pseudo, &truth, &rec.mask, w.sam_normalize_by_mask)?;
        let s = g.scale(l, w.lambda_sam);
        total = g.add(total, s);
        Some(l)
    } else {
        None
    };
    Ok(LossVars {
        diffusion,
        shift,
        selective,
        total,
    })
}

/// Loss terms and the gradient of the total with respect to every
/// trainable parameter (`None` for frozen ones).
pub fn composite_loss_and_grads(
    model: &Denoiser,
    rec: &TrainRecord,
    t: usize,
    eps: &Tensor,
    w: &LossWeights,
    emb: &Arc<dyn Embedder>,
) -> Result<(LossTerms, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let p = model.store().bind(&mut g);
    let vars = record_loss(&mut g, &p, model, rec, t, eps, w, emb)?;
    let val = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
    let terms = LossTerms {
        diffusion: g.value(vars.diffusion).item(),
        shift: val(vars.shift),
        selective: val(vars.selective),
        total: g.value(vars.total).item(),
    };
    let grads = g.backward(vars.total)?;
    let out = model
        .store()
        .iter()
        .map(|(id, param)| {
            param
                .trainable
                .then(|| grads.get_or_zeros(p[id], &param.value))
        })
        .collect();
    Ok((terms, out))
}

/// Loss terms only, on a constant tape.
pub fn composite_loss(
    model: &Denoiser,
    rec: &TrainRecord,
    t: usize,
    eps: &Tensor,
    w: &LossWeights,
    emb: &Arc<dyn Embedder>,
) -> Result<LossTerms> {
    let mut g = Graph::new();
    let p = model.store().bind_constant(&mut g);
    let vars = record_loss(&mut g, &p, model, rec, t, eps, w, emb)?;
    let val = |v: Option<Var>| v.map(|v| g.value(v).item()).unwrap_or(0.0);
    Ok(LossTerms {
        diffusion: g.value(vars.diffusion).item(),
        shift: val(vars.shift),
        selective: val(vars.selective),
        total: g.value(vars.total).item(),
    })
}

/// Adam with decoupled weight decay over the trainable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(store: &ParamStore, learning_rate: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: OptimizerState {
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    /// Apply update number `step` (1-based) to the trainable parameters.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], step: usize) -> Result<()> {
        let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        if ids.len() != self.state.m.len() || grads.len() != store.len() {
            return Err(Error::Checkpoint("optimizer state does not match the parameter store".into()));
        }
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        for (k, id) in ids.into_iter().enumerate() {
            let Some(grad) = &grads[id.index()] else {
                continue;
            };
            let (m, v) = (&mut self.state.m[k], &mut self.state.v[k]);
            let param = store.get_mut(id);
            for (((pv, &gv), mv), vv) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
                *pv -= self.learning_rate * (update + self.weight_decay * *pv);
            }
        }
        Ok(())
    }
}

/// Model, optimizer and the number of completed steps.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Denoiser,
    pub model_seed: u64,
    pub optimizer: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        let model = Denoiser::new(cfg.model.clone(), cfg.model_seed)?;
        let optimizer = AdamW::new(model.store(), cfg.learning_rate, cfg.weight_decay);
        Ok(Self {
            model,
            model_seed: cfg.model_seed,
            optimizer,
            step: 0,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint, cfg: &TrainConfig) -> Result<Self> {
        let mut optimizer = AdamW::new(ck.model.store(), cfg.learning_rate, cfg.weight_decay);
        if let Some(state) = ck.optimizer {
            if state.m.len() != optimizer.state.m.len() {
                return Err(Error::Checkpoint("optimizer state does not match the model".into()));
            }
            optimizer.state = state;
        }
        Ok(Self {
            model: ck.model,
            model_seed: ck.model_seed,
            optimizer,
            step: ck.step,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            model_seed: self.model_seed,
            step: self.step,
            optimizer: Some(self.optimizer.state.clone()),
        }
    }
}

/// One optimizer step on `batch`: sample a timestep in `[1, T-1]` and noise
/// per record, average the composite losses and update trainable parameters.
pub fn train_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[TrainRecord],
    cfg: &TrainConfig,
    emb: &Arc<dyn Embedder>,
    rng: &mut R,
) -> Result<LossTerms> {
    if batch.is_empty() {
        return Err(Error::Validation("training batch is empty".into()));
    }
    let w = cfg.weights();
    let t_max = state.model.schedule().steps();
    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossTerms::default();
    let mut acc: Vec<Option<Tensor>> = vec![None; state.model.store().len()];
    for rec in batch {
        let t = rng.random_range(1..t_max);
        let x0 = state.model.encode_grid(&rec.train_grid)?;
        let eps = Tensor::randn(x0.shape(), rng);
        let (terms, grads) = composite_loss_and_grads(&state.model, rec, t, &eps, &w, emb)?;
        if !terms.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step + 1,
                record: rec.id.clone(),
                detail: format!(
                    "t={t} dropped={:?} text={:?} diffusion={} shift={} selective={} mask_pixels={}",
                    rec.dropped,
                    rec.text,
                    terms.diffusion,
                    terms.shift,
                    terms.selective,
                    rec.mask.count()
                ),
            });
        }
        mean.add_scaled(&terms, scale);
        for (a, gr) in acc.iter_mut().zip(grads) {
            if let Some(gr) = gr {
                match a {
                    Some(a) => a.add_assign(&gr.map(|v| v * scale)),
                    None => *a = Some(gr.map(|v| v * scale)),
                }
            }
        }
    }
    if let Some((i, _)) = acc.iter().enumerate().find(|(_, g)| g.as_ref().is_some_and(|g| !g.all_finite())) {
        return Err(Error::NonFiniteLoss {
            step: state.step + 1,
            record: batch.iter().map(|r| r.id.as_str()).collect::<Vec<_>>().join(","),
            detail: format!("non-finite gradient for {}", state.model.store().iter().nth(i).expect("index").1.name),
        });
    }
    state.step += 1;
    state.optimizer.update(state.model.store_mut(), &acc, state.step)?;
    Ok(mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub diffusion: f64,
    pub shift: f64,
    pub selective: f64,
    pub total: f64,
    pub unified: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Mean total loss over steps `range` (indices into `steps`).
    pub fn mean_total(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let s = self.steps.get(range)?;
        (!s.is_empty()).then(|| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64)
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for r in &self.steps {
            writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Where [`train`] writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
}

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("checkpoint_{step:06}.ckpt"))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}

/// Load every training record of a manifest.
pub fn load_training_records(manifest: &Manifest) -> Result<Vec<TrainRecord>> {
    let recs = manifest.load_records(Split::Train)?;
    if recs.is_empty() {
        return Err(Error::Validation("manifest has no training records".into()));
    }
    Ok(recs.iter().map(TrainRecord::from_loaded).collect())
}

/// Run `cfg.steps` steps from `state`: pick a seeded batch, unify a
/// fraction of its instructions, apply dropout, then step. All randomness
/// is derived from `(cfg.seed, step)`, so resuming reproduces the run.
pub fn train_records(
    state: &mut TrainState,
    records: &[TrainRecord],
    cfg: &TrainConfig,
    grey: f64,
    emb: &Arc<dyn Embedder>,
    uni: &dyn InstructionUnifier,
    out: Option<TrainOutput<'_>>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::Validation("no training records".into()));
    }
    if let Some(o) = &out {
        fs::create_dir_all(o.dir).map_err(|e| Error::io(o.dir, e))?;
    }
    state.optimizer.learning_rate = cfg.learning_rate;
    state.optimizer.weight_decay = cfg.weight_decay;
    let mut report = TrainReport::default();
    while state.step < cfg.steps {
        let step = state.step as u64;
        let mut brng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::BATCH, step));
        let picked: Vec<&TrainRecord> = (0..cfg.batch_size)
            .map(|_| &records[brng.random_range(0..records.len())])
            .collect();
        let instr: Vec<InstructionRecord> = picked.iter().map(|r| InstructionRecord::new(r.text.clone())).collect();
        let instr = augment_batch(&instr, uni, cfg.liu_fraction, derive_seed(cfg.seed, stream::UNIFY, step))?;
        let mut drng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::DROPOUT, step));
        let batch = picked
            .iter()
            .zip(&instr)
            .map(|(r, ir)| {
                let mut r = (*r).clone();
                r.text = ir.text().to_string();
                apply_dropout(&r, cfg.drop_fraction, cfg.drop_mode, grey, &mut drng)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut nrng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream::NOISE, step));
        let terms = train_step(state, &batch, cfg, emb, &mut nrng)?;
        let rec = StepRecord {
            step: state.step,
            diffusion: terms.diffusion,
            shift: terms.shift,
            selective: terms.selective,
            total: terms.total,
            unified: instr.iter().filter(|r| r.used_unified).count(),
            dropped: batch.iter().filter(|r| r.dropped != Dropped::None).count(),
        };
        log::debug!("step {} total {:.5} (diff {:.5}, es {:.5}, sam {:.5})", rec.step, rec.total, rec.diffusion, rec.shift, rec.selective);
        if state.step % 25 == 0 {
            log::info!("step {}/{} total loss {:.5}", state.step, cfg.steps, rec.total);
        }
        report.steps.push(rec);
        if let Some(o) = &out {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                let p = checkpoint_path(o.dir, state.step);
                state.to_checkpoint().save(&p)?;
                report.checkpoints.push(p);
            }
        }
    }
    if let Some(o) = &out {
        let p = final_checkpoint_path(o.dir);
        state.to_checkpoint().save(&p)?;
        report.checkpoints.push(p);
        report.write_log(&o.dir.join("train_log.jsonl"))?;
        plot_losses(&report, &o.dir.join("loss_curve.png"))?;
    }
    Ok(report)
}

/// Train from a manifest, optionally resuming from a checkpoint.
pub fn train(
    manifest: &Manifest,
    cfg: &TrainConfig,
    emb: &Arc<dyn Embedder>,
    uni: &dyn InstructionUnifier,
    resume: Option<Checkpoint>,
    out: Option<TrainOutput<'_>>,
) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    let records = load_training_records(manifest)?;
    let mut state = match resume {
        Some(ck) => {
            if ck.model.config() != &cfg.model {
                return Err(Error::Config("checkpoint model config differs from the training config".into()));
            }
            TrainState::from_checkpoint(ck, cfg)?
        }
        None => TrainState::new(cfg)?,
    };
    let report = train_records(&mut state, &records, cfg, manifest.header.grey, emb, uni, out)?;
    Ok((state, report))
}

/// Log-scale loss curves: total (black), diffusion (blue), shift (red),
/// selective (green).
pub fn plot_losses(report: &TrainReport, path: &Path) -> Result<()> {
    let (w, h) = (480u32, 240u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let series: [(fn(&StepRecord) -> f64, [u8; 3]); 4] = [
        (|r| r.diffusion, [40, 80, 220]),
        (|r| r.shift, [220, 50, 50]),
        (|r| r.selective, [40, 160, 60]),
        (|r| r.total, [0, 0, 0]),
    ];
    let vals: Vec<f64> = report
        .steps
        .iter()
        .flat_map(|r| series.iter().map(move |(f, _)| f(r)))
        .filter(|v| *v > 0.0 && v.is_finite())
        .map(f64::log10)
        .collect();
    if vals.len() >= 2 {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
        let n = report.steps.len().max(2) - 1;
        let to_px = |i: usize, v: f64| -> (i64, i64) {
            let x = 10.0 + (w as f64 - 20.0) * i as f64 / n as f64;
            let y = 10.0 + (h as f64 - 20.0) * (1.0 - (v.log10() - lo) / (hi - lo));
            (x.round() as i64, y.round() as i64)
        };
        for (f, color) in series {
            let mut prev: Option<(i64, i64)> = None;
            for (i, r) in report.steps.iter().enumerate() {
                let v = f(r);
                if !(v > 0.0 && v.is_finite()) {
                    prev = None;
                    continue;
                }
                let p = to_px(i, v);
                if let Some(q) = prev {
                    draw_line(&mut img, q, p, color);
                }
                prev = Some(p);
            }
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn draw_line(img: &mut image::RgbImage, a: (i64, i64), b: (i64, i64), color: [u8; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).max(1);
    for s in 0..=steps {
        let x = a.0 + (b.0 - a.0) * s / steps;
        let y = a.1 + (b.1 - a.1) * s / steps;
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(color));
        }
    }
}
