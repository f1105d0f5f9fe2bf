//! Dual text/image encoder trained with a symmetric contrastive loss.
//!
//! Text: mean of token embeddings, then a two-layer MLP. Image: flattened
//! pixels (centred to `[-1, 1]`), then a two-layer MLP. Both map to `d`.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, ops, Checkpoint, Linear, OptimConfig, ParamStore, Tape, Tensor, Var};
use crate::rng::stream;
use crate::synthio::grammar::{tokenize, vocabulary};
use crate::synthio::{SceneImage, Task};

pub const MAX_TOKENS: usize = 400;
const PREFIX: &str = "embedder.";
const OUT_GAIN: f32 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub d: usize,
    pub token_dim: usize,
    pub text_hidden: usize,
    pub image_hidden: usize,
    pub image_size: usize,
    pub temperature: f32,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            token_dim: 64,
            text_hidden: 128,
            image_hidden: 256,
            image_size: 16,
            temperature: 0.07,
            optim: OptimConfig {
                learning_rate: 3e-3,
                batch_size: 128,
                epochs: 24,
                ..OptimConfig::default()
            },
            seed: 0,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::Config(format!("embedding width {} must be even", self.d)));
        }
        if self.optim.batch_size < 2 {
            return Err(Error::Config("contrastive batches need at least 2 pairs".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {}", self.temperature)));
        }
        self.optim.validate()
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size * 3
    }
}

/// Encoder outputs for one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEmbedding {
    pub text_vec: Vec<f32>,
    pub image_vec: Vec<f32>,
}

impl SceneEmbedding {
    pub fn normalized(&self) -> SceneEmbedding {
        SceneEmbedding {
            text_vec: ops::normalized(&self.text_vec),
            image_vec: ops::normalized(&self.image_vec),
        }
    }
}

/// Cosine similarity; a zero vector gives 0.
pub fn similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::dim("similarity", a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    if aa == 0.0 || bb == 0.0 {
        log::warn!("cosine similarity with a zero vector is taken as 0");
        return Ok(0.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0) as f32)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbedderReport {
    pub first_batch_loss: f32,
    pub epoch_losses: Vec<f32>,
    pub held_out_top1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Embedder {
    cfg: EmbedderConfig,
    store: ParamStore,
    vocab: HashMap<String, usize>,
    table: crate::nn::ParamId,
    text: [Linear; 2],
    image: [Linear; 2],
    trained: bool,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig) -> Result<Self> {
        cfg.validate()?;
        let words = vocabulary();
        let mut rng = stream(cfg.seed, &[0xe3b]);
        let mut store = ParamStore::new();
        let table = store.add(
            "text.table",
            Tensor::randn(&[words.len(), cfg.token_dim], 1.0, &mut rng),
        );
        let text = [
            Linear::new(&mut store, "text.l1", cfg.token_dim, cfg.text_hidden, true, 2f32.sqrt(), &mut rng),
            Linear::new(&mut store, "text.l2", cfg.text_hidden, cfg.d, true, OUT_GAIN, &mut rng),
        ];
        let image = [
            Linear::new(&mut store, "image.l1", cfg.pixels(), cfg.image_hidden, true, 2f32.sqrt(), &mut rng),
            Linear::new(&mut store, "image.l2", cfg.image_hidden, cfg.d, true, OUT_GAIN, &mut rng),
        ];
        // Outputs start close to a per-tower constant, so every pair scores
        // alike and the first contrastive loss sits at ln(batch).
        for l in [&text[1], &image[1]] {
            store.get_mut(l.bias.expect("bias")).value = Tensor::randn(&[cfg.d], 1.0, &mut rng);
        }
        let vocab = words.into_iter().enumerate().map(|(i, w)| (w, i)).collect();
        Ok(Self {
            cfg,
            store,
            vocab,
            table,
            text,
            image,
            trained: false,
        })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    pub fn d(&self) -> usize {
        self.cfg.d
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Dependency { module: "embedder" })
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn token_ids(&self, text: &str) -> Result<Vec<usize>> {
        let toks = tokenize(text);
        if toks.len() > MAX_TOKENS {
            return Err(Error::Domain(format!(
                "{} tokens exceed the limit of {MAX_TOKENS}",
                toks.len()
            )));
        }
        toks.into_iter()
            .map(|t| {
                self.vocab
                    .get(t)
                    .copied()
                    .ok_or_else(|| Error::Vocabulary(t.to_string()))
            })
            .collect()
    }

    pub fn image_input(&self, images: &[&SceneImage]) -> Result<Tensor> {
        let p = self.cfg.pixels();
        let mut data = Vec::with_capacity(images.len() * p);
        for img in images {
            if img.height != self.cfg.image_size || img.width != self.cfg.image_size {
                return Err(Error::dim(
                    "encode_image",
                    format!("{0}x{0}", self.cfg.image_size),
                    format!("{}x{}", img.height, img.width),
                ));
            }
            data.extend(img.pixels.iter().map(|&v| 2.0 * v - 1.0));
        }
        Tensor::new(vec![images.len(), p], data)
    }

    pub(crate) fn text_forward(&self, tape: &mut Tape, store: &ParamStore, bags: Vec<Vec<usize>>) -> Result<Var> {
        let table = tape.param(store, self.table);
        let pooled = tape.embed_mean(table, bags)?;
        let h = self.text[0].forward(tape, store, pooled)?;
        let h = tape.relu(h);
        self.text[1].forward(tape, store, h)
    }

    pub(crate) fn image_forward(&self, tape: &mut Tape, store: &ParamStore, x: Tensor) -> Result<Var> {
        let x = tape.input(x);
        let h = self.image[0].forward(tape, store, x)?;
        let h = tape.relu(h);
        self.image[1].forward(tape, store, h)
    }

    pub fn encode_texts(&self, texts: &[&str]) -> Result<Tensor> {
        if texts.is_empty() {
            return Err(Error::Domain("no texts to encode".into()));
        }
        let bags = texts
            .iter()
            .map(|t| self.token_ids(t))
            .collect::<Result<Vec<_>>>()?;
        let mut tape = Tape::new();
        let y = self.text_forward(&mut tape, &self.store, bags)?;
        Ok(tape.value(y).clone())
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f32>> {
        Ok(self.encode_texts(&[text])?.into_data())
    }

    pub fn encode_images(&self, images: &[&SceneImage]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Domain("no images to encode".into()));
        }
        let x = self.image_input(images)?;
        let mut tape = Tape::new();
        let y = self.image_forward(&mut tape, &self.store, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn encode_image(&self, img: &SceneImage) -> Result<Vec<f32>> {
        Ok(self.encode_images(&[img])?.into_data())
    }

    pub fn embed_scene(&self, text: &str, img: &SceneImage) -> Result<SceneEmbedding> {
        Ok(SceneEmbedding {
            text_vec: self.encode_text(text)?,
            image_vec: self.encode_image(img)?,
        })
    }

    /// Symmetric InfoNCE over a batch of aligned pairs; returns the loss node.
    pub fn contrastive_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bags: Vec<Vec<usize>>,
        images: Tensor,
    ) -> Result<Var> {
        let n = bags.len();
        let t = self.text_forward(tape, store, bags)?;
        let v = self.image_forward(tape, store, images)?;
        let t = tape.normalize_rows(t)?;
        let v = tape.normalize_rows(v)?;
        let sims = tape.matmul_nt(t, v)?;
        let logits = tape.scale(sims, 1.0 / self.cfg.temperature);
        let labels: Vec<usize> = (0..n).collect();
        let t2i = tape.softmax_cross_entropy(logits, &labels)?;
        let logits_t = tape.transpose(logits)?;
        let i2t = tape.softmax_cross_entropy(logits_t, &labels)?;
        let both = tape.add(t2i, i2t)?;
        Ok(tape.scale(both, 0.5))
    }

    /// Trains on `(caption, scene)` pairs in shuffled batches.
    pub fn train(&mut self, pairs: &[(String, SceneImage)]) -> Result<EmbedderReport> {
        let cfg = self.cfg.optim.clone();
        if pairs.len() < 2 {
            return Err(Error::Config("need at least 2 training pairs".into()));
        }
        let bags_all = pairs
            .iter()
            .map(|(t, _)| self.token_ids(t))
            .collect::<Result<Vec<_>>>()?;
        let mut report = EmbedderReport::default();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut stream(self.cfg.seed, &[0xe90c, epoch as u64]));
            let mut total = 0.0f64;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                let bags: Vec<Vec<usize>> = chunk.iter().map(|&i| bags_all[i].clone()).collect();
                let imgs: Vec<&SceneImage> = chunk.iter().map(|&i| &pairs[i].1).collect();
                let x = self.image_input(&imgs)?;
                let mut tape = Tape::new();
                let loss = self.contrastive_loss(&mut tape, &self.store, bags, x)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("embedder loss at epoch {epoch}")));
                }
                if epoch == 0 && batches == 0 {
                    report.first_batch_loss = value;
                }
                tape.backward(loss)?.accumulate(&tape, &mut self.store);
                adam_step(&mut self.store, &cfg)?;
                total += value as f64;
                batches += 1;
            }
            let mean = (total / batches.max(1) as f64) as f32;
            log::info!("embedder epoch {epoch}: loss {mean:.4}");
            report.epoch_losses.push(mean);
        }
        self.trained = true;
        Ok(report)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, t) in self.store.named_values() {
            c.push(format!("{PREFIX}{name}"), t);
        }
        c.push_scalar(format!("{PREFIX}meta.trained"), if self.trained { 1.0 } else { 0.0 });
        c.push_scalar(format!("{PREFIX}config.temperature"), self.cfg.temperature);
        c
    }

    /// Rebuilds an embedder from checkpoint records; widths come from the
    /// stored tensor shapes.
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            Ok(c.require(&format!("{PREFIX}{name}"))?.shape().to_vec())
        };
        let table = shape("text.table")?;
        let text1 = shape("text.l1.weight")?;
        let text2 = shape("text.l2.weight")?;
        let image1 = shape("image.l1.weight")?;
        let side = ((image1[0] / 3) as f64).sqrt().round() as usize;
        if table[0] != vocabulary().len() || side * side * 3 != image1[0] {
            return Err(Error::Format {
                what: "embedder checkpoint",
                reason: "vocabulary or image size does not match this build".into(),
            });
        }
        let cfg = EmbedderConfig {
            d: text2[1],
            token_dim: table[1],
            text_hidden: text1[1],
            image_hidden: image1[1],
            image_size: side,
            temperature: c.scalar(&format!("{PREFIX}config.temperature"))?,
            ..EmbedderConfig::default()
        };
        let mut e = Embedder::new(cfg)?;
        e.store.assign_named(&c.with_prefix(PREFIX))?;
        e.trained = c.scalar(&format!("{PREFIX}meta.trained"))? == 1.0;
        Ok(e)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// `(resolved_text, gt_scene)` for every step of the given tasks.
pub fn caption_pairs(tasks: &[Task]) -> Vec<(String, SceneImage)> {
    tasks
        .iter()
        .flat_map(|t| t.steps.iter())
        .map(|s| (s.resolved_text.clone(), s.gt_scene.clone()))
        .collect()
}

/// Text→image top-1 accuracy within consecutive batches of `batch` pairs
/// after a fixed shuffle; a trailing partial batch is dropped.
pub fn retrieval_top1(e: &Embedder, pairs: &[(String, SceneImage)], batch: usize, seed: u64) -> Result<f64> {
    if batch < 2 || pairs.len() < batch {
        return Err(Error::Config(format!("{} pairs cannot fill a batch of {batch}", pairs.len())));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut stream(seed, &[0x7e7]));
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in order.chunks_exact(batch) {
        let texts: Vec<&str> = chunk.iter().map(|&i| pairs[i].0.as_str()).collect();
        let imgs: Vec<&SceneImage> = chunk.iter().map(|&i| &pairs[i].1).collect();
        let t = e.encode_texts(&texts)?;
        let v = e.encode_images(&imgs)?;
        for i in 0..batch {
            let sims: Vec<f32> = (0..batch)
                .map(|j| similarity(t.row(i), v.row(j)))
                .collect::<Result<_>>()?;
            if ops::argmax(&sims) == Some(i) {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

pub fn train_embedder(train: &[Task], held_out: &[Task], cfg: EmbedderConfig) -> Result<(Embedder, EmbedderReport)> {
    let mut e = Embedder::new(cfg)?;
    let mut report = e.train(&caption_pairs(train))?;
    let held = caption_pairs(held_out);
    if held.len() >= 32 {
        report.held_out_top1 = Some(retrieval_top1(&e, &held, 32, e.cfg.seed)?);
    }
    Ok((e, report))
}
