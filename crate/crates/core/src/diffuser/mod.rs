//! Pixel-space denoising diffusion with latent recording and seeding.
//!
//! Every generation records the first `w + 1` latents it visits
//! (`z_T … z_{T-w}`); a later generation can be started from any recorded
//! latent instead of Gaussian noise.

mod model;
mod schedule;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use model::{time_embedding, Denoiser};
pub use schedule::{NoiseSchedule, ScheduleConfig};

use crate::captioner::contextualize;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::nn::{adam_step, Checkpoint, OptimConfig, ParamStore, Tape, Tensor};
use crate::rng::stream;
use crate::synthio::{SceneImage, Task};

const PREFIX: &str = "diffuser.";
const LATENT_MAGIC: &[u8; 7] = b"COSEQZ1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffuserConfig {
    pub schedule: ScheduleConfig,
    pub hidden: usize,
    pub time_dim: usize,
    pub image_size: usize,
    /// Probability of replacing the condition by the null condition in training.
    pub cond_dropout: f64,
    /// Classifier-free guidance scale.
    pub guidance: f32,
    /// Start a seeded generation at the seed's own iteration instead of `T`.
    pub resume_at_source_iter: bool,
    /// Fraction of the ancestral noise injected per reverse step.
    pub eta: f32,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for DiffuserConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            hidden: 256,
            time_dim: 32,
            image_size: 16,
            cond_dropout: 0.1,
            guidance: 1.5,
            resume_at_source_iter: false,
            eta: 1.0,
            optim: OptimConfig {
                learning_rate: 1e-3,
                batch_size: 64,
                epochs: 40,
                ..OptimConfig::default()
            },
            seed: 0,
        }
    }
}

impl DiffuserConfig {
    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.time_dim == 0 || self.time_dim % 2 != 0 || self.hidden == 0 {
            return Err(Error::Config("time width must be even and widths positive".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("cond_dropout {}", self.cond_dropout)));
        }
        self.optim.validate()
    }
}

/// A partially denoised tensor, in model space (`2·pixel − 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    /// Step whose generation visited this latent.
    pub source_step: usize,
    /// Reverse iteration at which it was visited.
    pub iteration: usize,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Gaussian,
    Seed(Latent),
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub image: SceneImage,
    pub recorded: Vec<Latent>,
}

/// One row of a batched generation.
pub struct Request {
    /// Text embedding of the caption; `None` samples unconditionally.
    pub cond: Option<Vec<f32>>,
    pub init: Init,
    /// Tag written into the recorded latents.
    pub step: usize,
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiffuserReport {
    pub init_loss: f32,
    pub epoch_losses: Vec<f32>,
    pub caption_mismatches: usize,
}

#[derive(Clone, Debug)]
pub struct Diffuser {
    cfg: DiffuserConfig,
    schedule: NoiseSchedule,
    store: ParamStore,
    net: Denoiser,
    prior_mean: Tensor,
    prior_std: Tensor,
    trained: bool,
}

pub fn to_model_space(img: &SceneImage) -> Tensor {
    Tensor::from_vec(img.pixels.iter().map(|&v| 2.0 * v - 1.0).collect())
}

pub fn to_image(z: &[f32], size: usize) -> SceneImage {
    let pixels = z.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)).collect();
    SceneImage::from_pixels(size, size, pixels).expect("latent matches image size")
}

impl Diffuser {
    pub fn new(cfg: DiffuserConfig, cond_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let schedule = NoiseSchedule::linear(&cfg.schedule)?;
        let mut rng = stream(cfg.seed, &[0xd1f]);
        let mut store = ParamStore::new();
        let p = cfg.pixels();
        let net = Denoiser::new(&mut store, p, cfg.time_dim, cond_dim, cfg.hidden, cfg.schedule.steps, &mut rng);
        Ok(Self {
            schedule,
            store,
            net,
            prior_mean: Tensor::zeros(&[p]),
            prior_std: Tensor::full(&[p], 1.0),
            trained: false,
            cfg,
        })
    }

    pub fn config(&self) -> &DiffuserConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut DiffuserConfig {
        &mut self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    pub fn cond_dim(&self) -> usize {
        self.net.cond_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Dependency { module: "diffuser" })
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Unit-normalized text embedding scaled to unit per-entry variance;
    /// `None` is the null condition.
    pub fn prepare_condition(&self, cond: Option<&[f32]>) -> Result<Vec<f32>> {
        let d = self.net.cond_dim;
        match cond {
            None => Ok(vec![0.0; d]),
            Some(c) if c.len() != d => Err(Error::dim("diffuser condition", d, c.len())),
            Some(c) => {
                let n = crate::nn::ops::l2_norm(c);
                if n == 0.0 {
                    return Ok(vec![0.0; d]);
                }
                let s = (d as f32).sqrt() / n;
                Ok(c.iter().map(|v| v * s).collect())
            }
        }
    }

    /// Predicted noise for a batch of latents at the given iterations.
    pub fn predict_noise(&self, z: Tensor, ts: &[usize], conds: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let y = self.net.forward(&mut tape, &self.store, z, ts, conds)?;
        Ok(tape.value(y).clone())
    }

    pub fn generate(
        &self,
        cond: Option<&[f32]>,
        init: Init,
        record_w: usize,
        rng: ChaCha8Rng,
    ) -> Result<Generation> {
        let mut out = self.generate_batch(
            vec![Request {
                cond: cond.map(|c| c.to_vec()),
                init,
                step: 0,
                rng,
            }],
            record_w,
        )?;
        Ok(out.pop().expect("one request"))
    }

    /// Runs every request through the full reverse process. Rows only share
    /// matrix products, which compute each row independently, so a row's
    /// result does not depend on the rest of the batch.
    pub fn generate_batch(&self, requests: Vec<Request>, record_w: usize) -> Result<Vec<Generation>> {
        self.sample_with(requests, record_w, |z, ts, c| self.predict_noise(z, ts, c))
    }

    /// The reverse process of [`Diffuser::generate_batch`] with a supplied
    /// noise predictor in place of the trained network.
    pub fn sample_with(
        &self,
        requests: Vec<Request>,
        record_w: usize,
        mut predict: impl FnMut(Tensor, &[usize], Tensor) -> Result<Tensor>,
    ) -> Result<Vec<Generation>> {
        let t_max = self.steps();
        if record_w >= t_max {
            return Err(Error::Domain(format!("record window {record_w} must be below {t_max}")));
        }
        let p = self.cfg.pixels();
        struct Row {
            z: Vec<f32>,
            start: usize,
            cond: Option<Vec<f32>>,
            step: usize,
            rng: ChaCha8Rng,
            recorded: Vec<Latent>,
        }
        let mut rows = Vec::with_capacity(requests.len());
        for mut r in requests {
            let (z, start) = match r.init {
                Init::Gaussian => {
                    let z = (0..p)
                        .map(|i| {
                            let n: f32 = r.rng.sample(StandardNormal);
                            self.prior_mean.data()[i] + self.prior_std.data()[i] * n
                        })
                        .collect();
                    (z, t_max)
                }
                Init::Seed(l) => {
                    if l.tensor.len() != p {
                        return Err(Error::dim("seed latent", p, l.tensor.len()));
                    }
                    self.schedule.check_iter(l.iteration)?;
                    let start = if self.cfg.resume_at_source_iter { l.iteration } else { t_max };
                    (l.tensor.into_data(), start)
                }
            };
            let cond = match r.cond {
                Some(c) => Some(self.prepare_condition(Some(&c))?),
                None => None,
            };
            rows.push(Row {
                z,
                start,
                cond,
                step: r.step,
                rng: r.rng,
                recorded: Vec::with_capacity(record_w + 1),
            });
        }
        let null = vec![0.0f32; self.net.cond_dim];
        let top = rows.iter().map(|r| r.start).max().unwrap_or(0);
        for t in (1..=top).rev() {
            let active: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].start >= t).collect();
            if active.is_empty() {
                continue;
            }
            let mut zs = Vec::new();
            let mut cs = Vec::new();
            let mut slots = Vec::with_capacity(active.len());
            for &i in &active {
                let r = &mut rows[i];
                if t + record_w >= r.start {
                    r.recorded.push(Latent {
                        source_step: r.step,
                        iteration: t,
                        tensor: Tensor::from_vec(r.z.clone()),
                    });
                }
                let uncond = zs.len() / p;
                zs.extend_from_slice(&r.z);
                cs.extend_from_slice(&null);
                let guided = r.cond.as_ref().map(|c| {
                    zs.extend_from_slice(&r.z);
                    cs.extend_from_slice(c);
                    uncond + 1
                });
                slots.push((uncond, guided));
            }
            let m = zs.len() / p;
            let eps = predict(
                Tensor::new(vec![m, p], zs)?,
                &vec![t; m],
                Tensor::new(vec![m, self.net.cond_dim], cs)?,
            )?;
            let ab = self.schedule.alpha_bar(t);
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            let (c_x0, c_eps, sigma) = self.schedule.reverse_step(t, self.cfg.eta as f64);
            let (c_x0, c_eps, sigma) = (c_x0 as f32, c_eps as f32, sigma as f32);
            let s = self.cfg.guidance;
            for (&i, &(u, g)) in active.iter().zip(&slots) {
                let r = &mut rows[i];
                let eu = eps.row(u);
                for j in 0..p {
                    let e = match g {
                        Some(g) => eu[j] + s * (eps.row(g)[j] - eu[j]),
                        None => eu[j],
                    };
                    let x0 = ((r.z[j] - sb * e) / sa).clamp(-1.0, 1.0);
                    let e = (r.z[j] - sa * x0) / sb;
                    r.z[j] = c_x0 * x0 + c_eps * e;
                }
                if t > 1 && sigma > 0.0 {
                    for v in r.z.iter_mut() {
                        let n: f32 = r.rng.sample(StandardNormal);
                        *v += sigma * n;
                    }
                }
            }
        }
        Ok(rows
            .into_iter()
            .map(|r| Generation {
                image: to_image(&r.z, self.cfg.image_size),
                recorded: r.recorded,
            })
            .collect())
    }

    /// Noise-prediction training on images with optional conditions (text
    /// embeddings). Also fits the Gaussian used for unseeded starts.
    pub fn fit(&mut self, images: &[&SceneImage], conds: &[Option<Vec<f32>>]) -> Result<DiffuserReport> {
        if images.is_empty() || images.len() != conds.len() {
            return Err(Error::dim("diffuser training set", images.len(), conds.len()));
        }
        let p = self.cfg.pixels();
        let x0s: Vec<Tensor> = images.iter().map(|i| to_model_space(i)).collect();
        if x0s.iter().any(|x| x.len() != p) {
            return Err(Error::dim("diffuser training image", p, x0s[0].len()));
        }
        self.fit_prior(&x0s);
        let prepared: Vec<Vec<f32>> = conds
            .iter()
            .map(|c| self.prepare_condition(c.as_deref()))
            .collect::<Result<_>>()?;
        let cfg = self.cfg.optim.clone();
        let t_max = self.steps();
        let mut order: Vec<usize> = (0..images.len()).collect();
        let mut report = DiffuserReport::default();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut stream(self.cfg.seed, &[0x0de, epoch as u64]));
            let (mut total, mut batches) = (0.0f64, 0usize);
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let mut rng = stream(self.cfg.seed, &[0x0e5, epoch as u64, b as u64]);
                let n = chunk.len();
                let mut zs = Vec::with_capacity(n * p);
                let mut eps = Vec::with_capacity(n * p);
                let mut ts = Vec::with_capacity(n);
                let mut cs = Vec::with_capacity(n * self.net.cond_dim);
                for &i in chunk {
                    let t = rng.random_range(1..=t_max);
                    let e: Vec<f32> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
                    let e = Tensor::from_vec(e);
                    let z = self.schedule.forward_noise(&x0s[i], t, &e)?;
                    zs.extend_from_slice(z.data());
                    eps.extend_from_slice(e.data());
                    ts.push(t);
                    if rng.random_bool(self.cfg.cond_dropout) {
                        cs.extend(std::iter::repeat_n(0.0, self.net.cond_dim));
                    } else {
                        cs.extend_from_slice(&prepared[i]);
                    }
                }
                let mut tape = Tape::new();
                let pred = self.net.forward(
                    &mut tape,
                    &self.store,
                    Tensor::new(vec![n, p], zs)?,
                    &ts,
                    Tensor::new(vec![n, self.net.cond_dim], cs)?,
                )?;
                let loss = tape.mse(pred, Tensor::new(vec![n, p], eps)?)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("diffuser loss at epoch {epoch}")));
                }
                if epoch == 0 && b == 0 {
                    report.init_loss = value;
                }
                tape.backward(loss)?.accumulate(&tape, &mut self.store);
                adam_step(&mut self.store, &cfg)?;
                total += value as f64;
                batches += 1;
            }
            let mean = (total / batches as f64) as f32;
            log::info!("diffuser epoch {epoch}: loss {mean:.4}");
            report.epoch_losses.push(mean);
        }
        self.trained = true;
        Ok(report)
    }

    /// Per-pixel moments of `z_T` under the forward process.
    pub fn fit_prior(&mut self, x0s: &[Tensor]) {
        let p = self.cfg.pixels();
        let n = x0s.len() as f64;
        let ab = self.schedule.alpha_bar(self.steps());
        let mut mean = vec![0.0f64; p];
        let mut sq = vec![0.0f64; p];
        for x in x0s {
            for (j, &v) in x.data().iter().enumerate() {
                mean[j] += v as f64;
                sq[j] += (v as f64) * (v as f64);
            }
        }
        let mut m = Vec::with_capacity(p);
        let mut s = Vec::with_capacity(p);
        for j in 0..p {
            let mu = mean[j] / n;
            let var = (sq[j] / n - mu * mu).max(0.0);
            m.push((ab.sqrt() * mu) as f32);
            s.push((ab * var + 1.0 - ab).sqrt() as f32);
        }
        self.prior_mean = Tensor::from_vec(m);
        self.prior_std = Tensor::from_vec(s);
    }

    pub fn prior(&self) -> (&Tensor, &Tensor) {
        (&self.prior_mean, &self.prior_std)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, t) in self.store.named_values() {
            c.push(format!("{PREFIX}{name}"), t);
        }
        let betas: Vec<f32> = self.schedule.betas().iter().map(|&b| b as f32).collect();
        c.push(format!("{PREFIX}schedule.betas"), Tensor::from_vec(betas));
        c.push(format!("{PREFIX}prior.mean"), self.prior_mean.clone());
        c.push(format!("{PREFIX}prior.std"), self.prior_std.clone());
        c.push_scalar(format!("{PREFIX}config.time_dim"), self.cfg.time_dim as f32);
        c.push_scalar(format!("{PREFIX}config.guidance"), self.cfg.guidance);
        c.push_scalar(format!("{PREFIX}config.cond_dropout"), self.cfg.cond_dropout as f32);
        c.push_scalar(format!("{PREFIX}config.eta"), self.cfg.eta);
        c.push_scalar(format!("{PREFIX}meta.trained"), if self.trained { 1.0 } else { 0.0 });
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let key = |n: &str| format!("{PREFIX}{n}");
        let records = c.with_prefix(PREFIX);
        let mut store = ParamStore::new();
        for (name, t) in records.iter().filter(|(n, _)| n.starts_with("den.")) {
            store.add(name.clone(), t.clone());
        }
        let time_dim = c.scalar(&key("config.time_dim"))? as usize;
        let net = Denoiser::bind(&store, time_dim)?;
        let betas: Vec<f64> = c
            .require(&key("schedule.betas"))?
            .data()
            .iter()
            .map(|&b| b as f64)
            .collect();
        let schedule = NoiseSchedule::from_betas(betas)?;
        if schedule.steps() != net.steps {
            return Err(Error::dim("diffuser checkpoint iterations", schedule.steps(), net.steps));
        }
        let side = ((net.pixels / 3) as f64).sqrt().round() as usize;
        let cfg = DiffuserConfig {
            schedule: ScheduleConfig {
                steps: schedule.steps(),
                beta_start: schedule.beta(1),
                beta_end: schedule.beta(schedule.steps()),
            },
            hidden: net.hidden,
            time_dim,
            image_size: side,
            guidance: c.scalar(&key("config.guidance"))?,
            cond_dropout: c.scalar(&key("config.cond_dropout"))? as f64,
            eta: c.scalar(&key("config.eta"))?,
            ..DiffuserConfig::default()
        };
        Ok(Self {
            schedule,
            net,
            store,
            prior_mean: c.require(&key("prior.mean"))?.clone(),
            prior_std: c.require(&key("prior.std"))?.clone(),
            trained: c.scalar(&key("meta.trained"))? == 1.0,
            cfg,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Trains on every step of `tasks`, conditioning on the embedded caption that
/// the captioner produces from the raw text and the task history.
pub fn train_diffuser(tasks: &[Task], embedder: &Embedder, cfg: DiffuserConfig) -> Result<(Diffuser, DiffuserReport)> {
    embedder.require_trained()?;
    let mut captions = Vec::new();
    let mut images = Vec::new();
    let mut mismatches = 0;
    for t in tasks {
        for s in &t.steps {
            let c = contextualize(&s.raw_text, &t.steps[..s.index - 1], None)?;
            if c != s.resolved_text {
                mismatches += 1;
            }
            captions.push(c);
            images.push(&s.gt_scene);
        }
    }
    let mut conds = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(256) {
        let refs: Vec<&str> = chunk.iter().map(String::as_str).collect();
        let t = embedder.encode_texts(&refs)?;
        conds.extend((0..chunk.len()).map(|i| Some(t.row(i).to_vec())));
    }
    let mut d = Diffuser::new(cfg, embedder.d())?;
    let mut report = d.fit(&images, &conds)?;
    report.caption_mismatches = mismatches;
    Ok((d, report))
}

/// The first `w + 1` recorded latents of each earlier step, ordered by step,
/// then by iteration from `T` down.
pub fn candidate_latents(recordings: &[Vec<Latent>], w: usize) -> Result<Vec<Latent>> {
    let mut out = Vec::with_capacity(recordings.len() * (w + 1));
    for (i, rec) in recordings.iter().enumerate() {
        if rec.len() < w + 1 {
            return Err(Error::State(format!(
                "step {} recorded {} latents, {} needed",
                i + 1,
                rec.len(),
                w + 1
            )));
        }
        for l in &rec[..w + 1] {
            if l.source_step != i + 1 {
                return Err(Error::State(format!(
                    "latent tagged with step {} found in the recordings of step {}",
                    l.source_step,
                    i + 1
                )));
            }
        }
        if rec[..w + 1].windows(2).any(|p| p[0].iteration <= p[1].iteration) {
            return Err(Error::State(format!("recordings of step {} are out of order", i + 1)));
        }
        out.extend_from_slice(&rec[..w + 1]);
    }
    Ok(out)
}

/// Flat binary dump: magic, `u32` count, then per latent `u32` step,
/// `u32` iteration, `u32` rank, dims and `f32` values (little-endian).
pub fn write_latents(path: &Path, latents: &[Latent]) -> Result<()> {
    let mut out = LATENT_MAGIC.to_vec();
    out.extend_from_slice(&(latents.len() as u32).to_le_bytes());
    for l in latents {
        for v in [l.source_step as u32, l.iteration as u32, l.tensor.shape().len() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &d in l.tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in l.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_latents(path: &Path) -> Result<Vec<Latent>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = || Error::Format {
        what: "latent dump",
        reason: "truncated or corrupt".into(),
    };
    if bytes.len() < LATENT_MAGIC.len() + 4 || &bytes[..LATENT_MAGIC.len()] != LATENT_MAGIC {
        return Err(bad());
    }
    let mut pos = LATENT_MAGIC.len();
    let u32_at = |pos: &mut usize| -> Result<u32> {
        let b = bytes.get(*pos..*pos + 4).ok_or_else(bad)?;
        *pos += 4;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let count = u32_at(&mut pos)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let step = u32_at(&mut pos)? as usize;
        let iteration = u32_at(&mut pos)? as usize;
        let rank = u32_at(&mut pos)? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_bits(u32_at(&mut pos)?));
        }
        out.push(Latent {
            source_step: step,
            iteration,
            tensor: Tensor::new(shape, data)?,
        });
    }
    if pos != bytes.len() {
        return Err(bad());
    }
    Ok(out)
}
