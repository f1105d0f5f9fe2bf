//! End-to-end synthesis of a scene sequence for one task.
//!
//! Step 1 draws `B` Gaussian-initialized candidates and keeps the one whose
//! image embedding is closest to the caption. Every later step seeds one
//! candidate from each of the first `w + 1` recorded latents of every
//! earlier chosen generation and lets the selection head pick among them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::captioner::contextualize_texts;
use crate::diffuser::{candidate_latents, Diffuser, Generation, Init, Latent, Request};
use crate::embedder::{similarity, Embedder, SceneEmbedding};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream};
use crate::selector::SelectionHead;
use crate::synthio::{SceneImage, Task};

pub const TRACE_FORMAT: &str = "coseq-trace-v1";
pub const MANIFEST_FORMAT: &str = "coseq-sequence-v1";

/// How steps after the first are initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "offset")]
pub enum Seeding {
    /// Candidates from every recorded latent of every earlier step, chosen
    /// by the selection head.
    Contrastive,
    /// A single generation seeded from the previous step's latent `offset`
    /// iterations into its reverse process.
    Fixed(usize),
    /// A single Gaussian-initialized generation per step.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Window of recorded latents per step (`w + 1` latents each).
    pub w: usize,
    /// First-step candidates.
    pub b: usize,
    pub seeding: Seeding,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            w: 3,
            b: 4,
            seeding: Seeding::Contrastive,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.b == 0 {
            return Err(Error::Config("first step needs at least one candidate".into()));
        }
        if self.w >= steps {
            return Err(Error::Config(format!("window {} must be below {steps} iterations", self.w)));
        }
        if let Seeding::Fixed(k) = self.seeding {
            if k >= steps {
                return Err(Error::Domain(format!("latent position {k} must be below {steps}")));
            }
        }
        Ok(())
    }

    /// Latents each chosen generation must keep.
    fn record_window(&self) -> usize {
        match self.seeding {
            Seeding::Fixed(k) => k.max(self.w),
            _ => self.w,
        }
    }
}

pub struct Models<'a> {
    pub embedder: &'a Embedder,
    pub diffuser: &'a Diffuser,
    pub selector: &'a SelectionHead,
}

impl Models<'_> {
    pub fn require_trained(&self) -> Result<()> {
        self.embedder.require_trained()?;
        self.diffuser.require_trained()?;
        self.selector.require_trained()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCandidate {
    /// Step whose latent seeded this candidate; `None` for Gaussian starts.
    pub source_step: Option<usize>,
    pub source_iter: Option<usize>,
    pub score: f32,
    /// Selection probability; absent where no softmax is taken.
    pub prob: Option<f32>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub raw_text: String,
    pub caption: String,
    pub candidates: Vec<TraceCandidate>,
    pub chosen: usize,
    pub chosen_source: Option<(usize, usize)>,
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub format: String,
    pub task_id: usize,
    pub config: PipelineConfig,
    pub guidance: f32,
    pub eta: f32,
    pub steps: Vec<TraceStep>,
}

impl GenerationTrace {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::Format { what: "trace", reason };
        if self.format != TRACE_FORMAT {
            return Err(bad(format!("format {}", self.format)));
        }
        for (k, s) in self.steps.iter().enumerate() {
            if s.step != k + 1 {
                return Err(bad(format!("step {} at position {}", s.step, k + 1)));
            }
            if s.chosen >= s.candidates.len() {
                return Err(bad(format!("step {} chose {} of {}", s.step, s.chosen, s.candidates.len())));
            }
            let probs: Vec<f32> = s.candidates.iter().filter_map(|c| c.prob).collect();
            if !probs.is_empty() {
                let total: f64 = probs.iter().map(|&p| p as f64).sum();
                if (total - 1.0).abs() > 1e-6 {
                    return Err(bad(format!("step {} probabilities sum to {total}", s.step)));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }
}

/// A generated sequence and how it was chosen.
#[derive(Clone, Debug)]
pub struct Synthesis {
    pub images: Vec<SceneImage>,
    pub captions: Vec<String>,
    pub trace: GenerationTrace,
}

fn candidate_seed(cfg: &PipelineConfig, task: usize, step: usize, candidate: usize) -> u64 {
    derive_seed(cfg.seed, &[task as u64, step as u64, candidate as u64])
}

/// Generates `b` Gaussian-initialized candidates for the first caption and
/// keeps the one most similar to it. Returns every candidate generation so
/// callers can inspect them; the trace entry marks the chosen one.
pub fn synthesize_first(
    task_id: usize,
    caption: &str,
    cfg: &PipelineConfig,
    embedder: &Embedder,
    diffuser: &Diffuser,
) -> Result<(Vec<Generation>, Vec<TraceCandidate>, usize)> {
    let cond = embedder.encode_text(caption)?;
    let seeds: Vec<u64> = (0..cfg.b).map(|c| candidate_seed(cfg, task_id, 1, c)).collect();
    let requests = seeds
        .iter()
        .map(|&s| Request {
            cond: Some(cond.clone()),
            init: Init::Gaussian,
            step: 1,
            rng: stream(s, &[]),
        })
        .collect();
    let gens = diffuser.generate_batch(requests, cfg.record_window())?;
    let images: Vec<&SceneImage> = gens.iter().map(|g| &g.image).collect();
    let (scores, chosen) = first_image_scores(&cond, &embedder.encode_images(&images)?.into_rows())?;
    let candidates = scores
        .into_iter()
        .zip(seeds)
        .map(|(score, seed)| TraceCandidate {
            source_step: None,
            source_iter: None,
            score,
            prob: None,
            seed,
        })
        .collect();
    Ok((gens, candidates, chosen))
}

/// Cosine similarity of each image embedding to the caption embedding and
/// the index of the best one (lowest index on ties).
pub fn first_image_scores(text: &[f32], images: &[Vec<f32>]) -> Result<(Vec<f32>, usize)> {
    let scores = images
        .iter()
        .map(|v| similarity(text, v))
        .collect::<Result<Vec<_>>>()?;
    let chosen = crate::nn::ops::argmax(&scores)
        .ok_or_else(|| Error::Domain("first step has no candidates".into()))?;
    Ok((scores, chosen))
}

/// Synthesizes every step of `task` from its raw texts.
pub fn synthesize_task(task: &Task, models: &Models, cfg: &PipelineConfig) -> Result<Synthesis> {
    models.embedder.require_trained()?;
    models.diffuser.require_trained()?;
    if cfg.seeding == Seeding::Contrastive {
        models.selector.require_trained()?;
    }
    let t_max = models.diffuser.steps();
    cfg.validate(t_max)?;
    if task.steps.is_empty() {
        return Err(Error::Domain(format!("task {} has no steps", task.id)));
    }
    let raw: Vec<&str> = task.steps.iter().map(|s| s.raw_text.as_str()).collect();
    let mut captions: Vec<String> = Vec::with_capacity(raw.len());
    let mut images: Vec<SceneImage> = Vec::with_capacity(raw.len());
    let mut history: Vec<SceneEmbedding> = Vec::with_capacity(raw.len());
    let mut recordings = Vec::with_capacity(raw.len());
    let mut steps = Vec::with_capacity(raw.len());
    let record_w = cfg.record_window();
    for n in 1..=raw.len() {
        let caption = contextualize_texts(raw[n - 1], &raw[..n - 1], None)?;
        let cond = models.embedder.encode_text(&caption)?;
        let (gen, candidates, chosen, chosen_source) = if n == 1 {
            let (mut gens, cands, chosen) =
                synthesize_first(task.id, &caption, cfg, models.embedder, models.diffuser)?;
            (gens.swap_remove(chosen), cands, chosen, None)
        } else {
            let latents = match cfg.seeding {
                Seeding::Contrastive => candidate_latents(&recordings, cfg.w)?,
                Seeding::Fixed(k) => {
                    let prev: &Vec<Latent> = &recordings[n - 2];
                    vec![prev
                        .iter()
                        .find(|l| l.iteration == t_max - k)
                        .cloned()
                        .ok_or_else(|| Error::State(format!("step {} did not record iteration {}", n - 1, t_max - k)))?]
                }
                Seeding::Independent => Vec::new(),
            };
            let tags: Vec<Option<(usize, usize)>> = if latents.is_empty() {
                vec![None]
            } else {
                latents.iter().map(|l| Some((l.source_step, l.iteration))).collect()
            };
            let seeds: Vec<u64> = (0..tags.len()).map(|c| candidate_seed(cfg, task.id, n, c)).collect();
            let inits: Vec<Init> = if latents.is_empty() {
                vec![Init::Gaussian]
            } else {
                latents.into_iter().map(Init::Seed).collect()
            };
            let requests = inits
                .into_iter()
                .zip(&seeds)
                .map(|(init, &s)| Request {
                    cond: Some(cond.clone()),
                    init,
                    step: n,
                    rng: stream(s, &[]),
                })
                .collect();
            let mut gens = models.diffuser.generate_batch(requests, record_w)?;
            let (scores, probs, chosen) = if gens.len() > 1 {
                let embs: Vec<SceneEmbedding> = {
                    let imgs: Vec<&SceneImage> = gens.iter().map(|g| &g.image).collect();
                    models
                        .embedder
                        .encode_images(&imgs)?
                        .into_rows()
                        .into_iter()
                        .map(|image_vec| SceneEmbedding {
                            text_vec: cond.clone(),
                            image_vec,
                        })
                        .collect()
                };
                let sel = models.selector.select(&embs, &history)?;
                (sel.scores, sel.probs.into_iter().map(Some).collect(), sel.index)
            } else {
                (vec![0.0], vec![None], 0)
            };
            let cands = tags
                .iter()
                .zip(scores)
                .zip(probs)
                .zip(&seeds)
                .map(|(((tag, score), prob), &seed)| TraceCandidate {
                    source_step: tag.map(|t| t.0),
                    source_iter: tag.map(|t| t.1),
                    score,
                    prob,
                    seed,
                })
                .collect();
            (gens.swap_remove(chosen), cands, chosen, tags[chosen])
        };
        history.push(SceneEmbedding {
            text_vec: cond,
            image_vec: models.embedder.encode_image(&gen.image)?,
        });
        steps.push(TraceStep {
            step: n,
            raw_text: raw[n - 1].to_string(),
            caption: caption.clone(),
            candidates,
            chosen,
            chosen_source,
            image: frame_name(n),
        });
        recordings.push(gen.recorded);
        images.push(gen.image);
        captions.push(caption);
    }
    let dcfg = models.diffuser.config();
    let trace = GenerationTrace {
        format: TRACE_FORMAT.to_string(),
        task_id: task.id,
        config: cfg.clone(),
        guidance: dcfg.guidance,
        eta: dcfg.eta,
        steps,
    };
    trace.validate()?;
    Ok(Synthesis {
        images,
        captions,
        trace,
    })
}

pub fn frame_name(step: usize) -> String {
    format!("step{step:02}.ppm")
}

/// Linear blend `(1 - a) * from + a * to`.
pub fn cross_fade(from: &SceneImage, to: &SceneImage, a: f32) -> Result<SceneImage> {
    if (from.height, from.width) != (to.height, to.width) {
        return Err(Error::dim(
            "cross-fade",
            format!("{}x{}", from.height, from.width),
            format!("{}x{}", to.height, to.width),
        ));
    }
    let pixels = from
        .pixels
        .iter()
        .zip(&to.pixels)
        .map(|(&x, &y)| (1.0 - a) * x + a * y)
        .collect();
    SceneImage::from_pixels(from.height, from.width, pixels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub format: String,
    pub task_id: usize,
    pub frames: Vec<String>,
    /// Cross-fade frames between step `k` and `k + 1`, per gap.
    pub fades: Vec<Vec<String>>,
    pub trace: String,
}

/// Writes step frames, `fade_frames` blended frames between consecutive
/// steps, the trace and a manifest into `out_dir`.
pub fn emit_sequence(
    images: &[SceneImage],
    trace: &GenerationTrace,
    out_dir: &Path,
    fade_frames: usize,
) -> Result<SequenceManifest> {
    if images.len() != trace.steps.len() {
        return Err(Error::dim("sequence frames", trace.steps.len(), images.len()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut frames = Vec::with_capacity(images.len());
    for (img, s) in images.iter().zip(&trace.steps) {
        img.save_ppm(&out_dir.join(&s.image))?;
        frames.push(s.image.clone());
    }
    let mut fades = Vec::new();
    for (k, pair) in images.windows(2).enumerate() {
        let mut gap = Vec::with_capacity(fade_frames);
        for j in 1..=fade_frames {
            let a = j as f32 / (fade_frames + 1) as f32;
            let name = format!("fade{:02}_{j:02}.ppm", k + 1);
            cross_fade(&pair[0], &pair[1], a)?.save_ppm(&out_dir.join(&name))?;
            gap.push(name);
        }
        fades.push(gap);
    }
    let trace_name = "trace.json".to_string();
    write_text(&out_dir.join(&trace_name), &trace.to_json()?)?;
    let manifest = SequenceManifest {
        format: MANIFEST_FORMAT.to_string(),
        task_id: trace.task_id,
        frames,
        fades,
        trace: trace_name,
    };
    write_text(&out_dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Reads back the frames and trace written by [`emit_sequence`].
pub fn read_sequence(dir: &Path) -> Result<(SequenceManifest, Vec<SceneImage>, GenerationTrace)> {
    let manifest: SequenceManifest = serde_json::from_str(&read_text(&dir.join("manifest.json"))?)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            what: "sequence manifest",
            reason: format!("format {}", manifest.format),
        });
    }
    let images = manifest
        .frames
        .iter()
        .map(|f| SceneImage::load_ppm(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let trace = GenerationTrace::from_json(&read_text(&dir.join(&manifest.trace))?)?;
    Ok((manifest, images, trace))
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(PathBuf::from(path), e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(PathBuf::from(path), e))
}
