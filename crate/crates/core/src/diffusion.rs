//! Noise schedule, forward noising, x0 reconstruction, the conditioned
//! denoiser and its guided sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::image_grid::{quadrant_origin, Image, ImageGrid};
use crate::nn::{Bound, Conv, Init, Linear, ParamStore, ResBlock};
use crate::ssm::{InjectionBlock, Ss2dBlock, Ss2dDims};
use crate::tensor::Tensor;

pub const DEFAULT_TIMESTEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;
const COSINE_OFFSET: f64 = 0.008;

/// Cumulative signal levels `α_0 = 1 > α_1 > … > α_T = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule with `α_T` pinned to exactly zero.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 1 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let u = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let mut alphas: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        alphas[0] = 1.0;
        alphas[steps] = 0.0;
        Self::from_alphas(alphas)
    }

    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        if alphas.len() < 2 || alphas[0] != 1.0 || *alphas.last().unwrap() != 0.0 {
            return Err(Error::Validation(
                "schedule must start at 1, end at 0 and have at least one step".into(),
            ));
        }
        if alphas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Validation("schedule must be strictly decreasing".into()));
        }
        Ok(Self { alphas })
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alphas.get(t).copied().ok_or_else(|| {
            Error::Range(format!("timestep {t} outside 0..={}", self.steps()))
        })
    }
}

/// `√α_t · x0 + √(1-α_t) · eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    x0.ensure_same_shape(eps, "noise")?;
    let a = sched.alpha(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x0.zip_map(eps, |x, e| sa * x + sn * e))
}

/// `(x_t - √(1-α_t) · eps_hat) / √α_t`, undefined when `α_t = 0`.
pub fn reconstruct_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    x_t.ensure_same_shape(eps_hat, "predicted noise")?;
    let a = sched.alpha(t)?;
    if a <= 0.0 {
        return Err(Error::Singularity { t });
    }
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_t.zip_map(eps_hat, |x, e| (x - sn * e) / sa))
}

/// [`reconstruct_x0`] on the tape.
pub fn reconstruct_x0_graph(g: &mut Graph, x_t: Var, eps_hat: Var, t: usize, sched: &NoiseSchedule) -> Result<Var> {
    let a = sched.alpha(t)?;
    if a <= 0.0 {
        return Err(Error::Singularity { t });
    }
    let scaled = g.scale(eps_hat, (1.0 - a).sqrt());
    let diff = g.sub(x_t, scaled);
    Ok(g.scale(diff, 1.0 / a.sqrt()))
}

/// A noised training latent.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub x_t: Tensor,
    pub t: usize,
    pub eps: Tensor,
}

/// Map between images and the space the denoiser works in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    /// Pixels are the latent.
    #[default]
    Identity,
    /// 2x average-pool encoder with a nearest-neighbour decoder.
    Downsample2,
}

impl LatentKind {
    pub fn factor(self) -> usize {
        match self {
            LatentKind::Identity => 1,
            LatentKind::Downsample2 => 2,
        }
    }

    pub fn encode(self, img: &Image) -> Result<Tensor> {
        let f = self.factor();
        if img.height() % f != 0 || img.width() % f != 0 {
            return Err(Error::Dimension(format!(
                "image {}x{} is not divisible by the latent factor {f}",
                img.height(),
                img.width()
            )));
        }
        let chw = img.to_chw();
        Ok(match self {
            LatentKind::Identity => chw,
            LatentKind::Downsample2 => {
                let mut g = Graph::new();
                let x = g.constant(chw);
                let y = g.avg_pool2(x);
                g.value(y).clone()
            }
        })
    }

    pub fn decode(self, latent: &Tensor) -> Image {
        match self {
            LatentKind::Identity => Image::from_chw(latent),
            LatentKind::Downsample2 => {
                let mut g = Graph::new();
                let x = g.constant(latent.clone());
                let y = g.upsample2(x);
                Image::from_chw(g.value(y))
            }
        }
    }

    /// [`LatentKind::decode`] on the tape, yielding a `[C, H, W]` image map.
    pub fn decode_graph(self, g: &mut Graph, latent: Var) -> Var {
        match self {
            LatentKind::Identity => latent,
            LatentKind::Downsample2 => g.upsample2(latent),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub channels: usize,
    /// Feature width per resolution level; each further level halves the resolution.
    pub widths: Vec<usize>,
    pub time_dim: usize,
    /// Dimension of text embeddings fed to the model.
    pub text_dim: usize,
    pub ssm_inner: usize,
    pub ssm_state: usize,
    pub timesteps: usize,
    pub latent: LatentKind,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            widths: vec![8, 16, 16],
            time_dim: 16,
            text_dim: 24,
            ssm_inner: 4,
            ssm_state: 4,
            timesteps: DEFAULT_TIMESTEPS,
            latent: LatentKind::Identity,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a non-empty list of positive sizes".into()));
        }
        if self.channels == 0 || self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(Error::Config(
                "channels must be positive and time_dim an even number >= 2".into(),
            ));
        }
        if self.ssm_inner == 0 || self.ssm_state == 0 || self.text_dim == 0 {
            return Err(Error::Config("ssm sizes and text_dim must be positive".into()));
        }
        if self.timesteps < 2 {
            return Err(Error::Config("timesteps must be at least 2".into()));
        }
        Ok(())
    }

    /// Grid sides must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        2 * self.latent.factor() * (1 << (self.widths.len() - 1))
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Option<Conv>,
    block: InjectionBlock,
    time_proj: Linear,
    text_proj: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    merge: Conv,
    block: ResBlock,
    time_proj: Linear,
    text_proj: Linear,
}

#[derive(Clone, Debug)]
struct Layout {
    time_mlp: Linear,
    in_conv: Conv,
    condition_encoder: Ss2dBlock,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    out_conv: Conv,
}

/// Small encoder-decoder noise predictor with a frozen base, a trainable
/// copy of each encoder block behind zero-initialised scan blocks, and
/// trainable text projections.
///
/// Parameter names are namespaced `base.*` (frozen), `control.*`, `ssm.*`
/// and `text.*` (trainable).
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    layout: Layout,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::cosine(config.timesteps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let w = &config.widths;
        let u = Init::Uniform;

        let time_mlp = Linear::new(&mut store, "base.time_mlp", config.time_dim, config.time_dim, u, false, &mut rng);
        let in_conv = Conv::new(&mut store, "base.in_conv", c, w[0], 3, u, false, &mut rng);
        let condition_encoder = Ss2dBlock::new(
            &mut store,
            "ssm.condition_encoder",
            Ss2dDims {
                c_in: c,
                c_out: c,
                inner: config.ssm_inner,
                state: config.ssm_state,
            },
            &mut rng,
        );
        let mut encoder = Vec::new();
        for (i, &width) in w.iter().enumerate() {
            let down = (i > 0).then(|| {
                Conv::new(&mut store, &format!("base.enc{i}.down"), w[i - 1], width, 3, u, false, &mut rng)
            });
            let frozen = ResBlock::new(&mut store, &format!("base.enc{i}.block"), width, false, &mut rng);
            let time_proj =
                Linear::new(&mut store, &format!("base.enc{i}.time_proj"), config.time_dim, width, u, false, &mut rng);
            let text_proj = Linear::new(
                &mut store,
                &format!("text.enc{i}.proj"),
                config.text_dim,
                width,
                Init::Zeros,
                true,
                &mut rng,
            );
            let block = InjectionBlock::wrap(
                &mut store,
                &format!("enc{i}"),
                frozen,
                width,
                c,
                config.ssm_inner,
                config.ssm_state,
                &mut rng,
            );
            encoder.push(EncoderLevel {
                down,
                block,
                time_proj,
                text_proj,
            });
        }
        let mut decoder = Vec::new();
        for i in (0..w.len() - 1).rev() {
            let merge = Conv::new(&mut store, &format!("base.dec{i}.merge"), w[i + 1] + w[i], w[i], 3, u, false, &mut rng);
            let block = ResBlock::new(&mut store, &format!("base.dec{i}.block"), w[i], false, &mut rng);
            let time_proj =
                Linear::new(&mut store, &format!("base.dec{i}.time_proj"), config.time_dim, w[i], u, false, &mut rng);
            let text_proj = Linear::new(
                &mut store,
                &format!("text.dec{i}.proj"),
                config.text_dim,
                w[i],
                Init::Zeros,
                true,
                &mut rng,
            );
            decoder.push(DecoderLevel {
                merge,
                block,
                time_proj,
                text_proj,
            });
        }
        let out_conv = Conv::new(&mut store, "base.out_conv", w[0], c, 3, u, false, &mut rng);
        Ok(Self {
            config,
            schedule,
            store,
            layout: Layout {
                time_mlp,
                in_conv,
                condition_encoder,
                encoder,
                decoder,
                out_conv,
            },
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn latent(&self) -> LatentKind {
        self.config.latent
    }

    /// Latent of a whole grid, after checking it fits the network.
    pub fn encode_grid(&self, grid: &ImageGrid) -> Result<Tensor> {
        let img = grid.image();
        let m = self.config.size_multiple();
        if img.height() % m != 0 || img.width() % m != 0 {
            return Err(Error::Dimension(format!(
                "grid {}x{} must have sides divisible by {m}",
                img.height(),
                img.width()
            )));
        }
        if img.channels() != self.config.channels {
            return Err(Error::Dimension(format!(
                "grid has {} channels, model expects {}",
                img.channels(),
                self.config.channels
            )));
        }
        self.config.latent.encode(img)
    }

    fn check_latent(&self, x: &Tensor, what: &str) -> Result<()> {
        let s = x.shape();
        let m = self.config.size_multiple() / self.config.latent.factor();
        if s.len() != 3 || s[0] != self.config.channels || s[1] % m != 0 || s[2] % m != 0 {
            return Err(Error::Dimension(format!(
                "{what} must be [{}, H, W] with H and W divisible by {m}, got {s:?}",
                self.config.channels
            )));
        }
        Ok(())
    }

    fn time_embedding(&self, t: usize) -> Tensor {
        let half = self.config.time_dim / 2;
        let mut v = Vec::with_capacity(2 * half);
        for i in 0..half {
            let freq = (-(1000f64).ln() * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).sin());
        }
        for i in 0..half {
            let freq = (-(1000f64).ln() * i as f64 / half as f64).exp();
            v.push((t as f64 * freq).cos());
        }
        Tensor::from_vec(v)
    }

    /// Noise prediction on the tape. `cond` is the latent of the
    /// conditioning grid; without it only the frozen and text paths run.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        x_t: Var,
        t: usize,
        text: &[f64],
        cond: Option<Var>,
    ) -> Result<Var> {
        self.schedule.alpha(t)?;
        self.check_latent(g.value(x_t), "noised latent")?;
        if text.len() != self.config.text_dim {
            return Err(Error::Dimension(format!(
                "text embedding has {} entries, model expects {}",
                text.len(),
                self.config.text_dim
            )));
        }
        if let Some(c) = cond {
            if g.value(c).shape() != g.value(x_t).shape() {
                return Err(Error::Dimension(format!(
                    "condition latent {:?} does not match noised latent {:?}",
                    g.value(c).shape(),
                    g.value(x_t).shape()
                )));
            }
        }
        let l = &self.layout;
        let temb = g.constant(self.time_embedding(t));
        let temb = l.time_mlp.forward(g, p, temb);
        let temb = g.silu(temb);
        let text = g.constant(Tensor::from_vec(text.to_vec()));

        let mut cond = cond.map(|c| {
            let e = l.condition_encoder.forward(g, p, c);
            g.add(c, e)
        });
        let mut h = l.in_conv.forward(g, p, x_t);
        let mut skips = Vec::with_capacity(l.encoder.len());
        for level in &l.encoder {
            if let Some(down) = &level.down {
                h = g.avg_pool2(h);
                h = down.forward(g, p, h);
                cond = cond.map(|c| g.avg_pool2(c));
            }
            let tb = level.time_proj.forward(g, p, temb);
            let xb = level.text_proj.forward(g, p, text);
            let bias = g.add(tb, xb);
            h = level.block.forward(g, p, h, cond, Some(bias), Some(bias));
            skips.push(h);
        }
        skips.pop();
        for level in &l.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            h = g.upsample2(h);
            h = g.concat(h, skip);
            h = level.merge.forward(g, p, h);
            let tb = level.time_proj.forward(g, p, temb);
            let xb = level.text_proj.forward(g, p, text);
            let bias = g.add(tb, xb);
            h = level.block.forward(g, p, h, Some(bias));
        }
        let h = g.silu(h);
        Ok(l.out_conv.forward(g, p, h))
    }

    /// Noise prediction for concrete inputs.
    pub fn predict_noise(&self, x_t: &Tensor, t: usize, text: &[f64], cond_grid: Option<&ImageGrid>) -> Result<Tensor> {
        let cond = cond_grid.map(|c| self.encode_grid(c)).transpose()?;
        self.predict_noise_latent(x_t, t, text, cond.as_ref())
    }

    pub fn predict_noise_latent(&self, x_t: &Tensor, t: usize, text: &[f64], cond: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind_constant(&mut g);
        let x = g.constant(x_t.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let y = self.forward(&mut g, &p, x, t, text, c)?;
        Ok(g.value(y).clone())
    }

    /// Generate the bottom-right quadrant of `cond_grid`.
    pub fn sample(&self, cond_grid: &ImageGrid, text: &[f64], opts: &SampleOptions, seed: u64) -> Result<ImageGrid> {
        opts.validate(self.schedule.steps())?;
        let known = self.encode_grid(cond_grid)?;
        let (_, lh, lw) = known.chw();
        let query = query_mask(&known);
        let uncond_text = vec![0.0; text.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = sampling_timesteps(self.schedule.steps(), opts.steps);

        let mut x = Tensor::randn(known.shape(), &mut rng);
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = ts.get(i + 1).copied().unwrap_or(0);
            if opts.mode == SampleMode::Reclamp {
                let noise = Tensor::randn(known.shape(), &mut rng);
                let noised = forward_noise(&known, t, &noise, &self.schedule)?;
                x = blend(&x, &noised, &query);
            }
            let eps_c = self.predict_noise_latent(&x, t, text, Some(&known))?;
            let eps = if opts.guidance_scale == 1.0 {
                eps_c
            } else {
                let eps_u = self.predict_noise_latent(&x, t, &uncond_text, Some(&known))?;
                let s = opts.guidance_scale;
                eps_u.zip_map(&eps_c, |u, c| u + s * (c - u))
            };
            let a = self.schedule.alpha(t)?;
            let a_prev = self.schedule.alpha(t_prev)?;
            let x0 = reconstruct_x0(&x, &eps, t, &self.schedule)?.map(|v| v.clamp(0.0, 1.0));
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            let eps_dir = x.zip_map(&x0, |xv, x0v| (xv - sa * x0v) / sn);
            let sigma = opts.eta * ((1.0 - a_prev) / (1.0 - a)).sqrt() * (1.0 - a / a_prev).max(0.0).sqrt();
            let dir_scale = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
            let z = if sigma > 0.0 {
                Some(Tensor::randn(known.shape(), &mut rng))
            } else {
                None
            };
            let mut next = x0.zip_map(&eps_dir, |x0v, e| a_prev.sqrt() * x0v + dir_scale * e);
            if let Some(z) = z {
                next = next.zip_map(&z, |v, zv| v + sigma * zv);
            }
            x = next;
        }
        if opts.mode == SampleMode::Reclamp {
            x = blend(&x, &known, &query);
        }
        debug_assert_eq!(x.chw(), (self.config.channels, lh, lw));
        let img = self.config.latent.decode(&x).clamped();
        ImageGrid::from_image(img)
    }
}

/// 1 on the bottom-right quadrant, 0 elsewhere, shaped like `latent`.
fn query_mask(latent: &Tensor) -> Tensor {
    let (c, h, w) = latent.chw();
    let (oy, ox) = quadrant_origin(3, h / 2, w / 2);
    let mut m = Tensor::zeros(&[c, h, w]);
    for ch in 0..c {
        for y in oy..h {
            for x in ox..w {
                m.data_mut()[(ch * h + y) * w + x] = 1.0;
            }
        }
    }
    m
}

/// `mask ? generated : known`.
fn blend(generated: &Tensor, known: &Tensor, mask: &Tensor) -> Tensor {
    let mut out = known.clone();
    for ((o, &gv), &m) in out.data_mut().iter_mut().zip(generated.data()).zip(mask.data()) {
        if m > 0.0 {
            *o = gv;
        }
    }
    out
}

/// Evenly spaced timesteps from `T - 1` down to 1, rounded and deduplicated.
pub fn sampling_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let hi = (t_max - 1).max(1) as f64;
    let mut ts: Vec<usize> = if steps <= 1 {
        vec![hi as usize]
    } else {
        (0..steps)
            .map(|i| (hi - (hi - 1.0) * i as f64 / (steps - 1) as f64).round() as usize)
            .collect()
    };
    ts.dedup();
    ts
}

/// How the three known quadrants are treated while sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Overwrite them with a freshly noised copy of the condition every step.
    #[default]
    Reclamp,
    /// Let the model generate the whole grid.
    Free,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reclamp" => Ok(SampleMode::Reclamp),
            "free" => Ok(SampleMode::Free),
            other => Err(Error::Config(format!("sample mode must be reclamp or free, got {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleOptions {
    pub steps: usize,
    pub guidance_scale: f64,
    /// 1 gives ancestral sampling, 0 a deterministic trajectory.
    pub eta: f64,
    pub mode: SampleMode,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            steps: 20,
            guidance_scale: DEFAULT_GUIDANCE,
            eta: 1.0,
            mode: SampleMode::Reclamp,
        }
    }
}

impl SampleOptions {
    fn validate(&self, t_max: usize) -> Result<()> {
        if self.steps < 1 || self.steps > t_max {
            return Err(Error::Validation(format!(
                "sampling steps must be in 1..={t_max}, got {}",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) || !self.guidance_scale.is_finite() {
            return Err(Error::Validation(
                "eta must be in [0, 1] and the guidance scale finite".into(),
            ));
        }
        Ok(())
    }
}
