//! Contrastive selection head.
//!
//! Past scenes and candidate scenes are projected by separate matrix pairs
//! (text and image halves, each to `d/2`), concatenated, and a candidate is
//! scored by the sum of its dot products with every past scene.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{Embedder, SceneEmbedding};
use crate::error::{Error, Result};
use crate::nn::{adam_step, dot, ops, Checkpoint, OptimConfig, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::stream;
use crate::synthio::Task;

const PREFIX: &str = "selector.";
const INIT_GAIN: f32 = 0.5;
const BLOCK_NAMES: [&str; 4] = ["w_it", "w_iv", "w_ot", "w_ov"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Past,
    Current,
}

/// Which inputs are replaced by those of random other scenes, in training
/// and evaluation alike.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Standard,
    ShuffleText,
    ShuffleBoth,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Standard => "standard",
            InputMode::ShuffleText => "shuffle_text",
            InputMode::ShuffleBoth => "shuffle_both",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub d: usize,
    pub bias: bool,
    /// Unit-normalize both embedding halves before projecting.
    pub normalize_inputs: bool,
    /// Scores are divided by this before the softmax.
    pub temperature: f32,
    /// Candidates per training instance (tasks in the pool).
    pub candidates: usize,
    pub input_mode: InputMode,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            d: 64,
            bias: true,
            normalize_inputs: true,
            temperature: 1.0,
            candidates: 10,
            input_mode: InputMode::Standard,
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::Config(format!("selector width {} must be even", self.d)));
        }
        if self.candidates < 2 {
            return Err(Error::Config(format!(
                "need at least 2 candidates per instance, got {}",
                self.candidates
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {}", self.temperature)));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedScene {
    pub vec: Vec<f32>,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f32>,
    pub probs: Vec<f32>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SelectorReport {
    pub init_loss: f32,
    pub epoch_losses: Vec<f32>,
    pub untrained_accuracy: f64,
    pub held_out_accuracy: f64,
    pub train_instances: usize,
    pub held_out_instances: usize,
}

#[derive(Clone, Debug)]
pub struct SelectionHead {
    cfg: SelectorConfig,
    store: ParamStore,
    weights: [ParamId; 4],
    biases: Option<[ParamId; 4]>,
    trained: bool,
}

impl SelectionHead {
    pub fn new(cfg: SelectorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &[0x5e1]);
        let mut store = ParamStore::new();
        let (d, h) = (cfg.d, cfg.d / 2);
        let weights = BLOCK_NAMES.map(|n| store.add_init(format!("sel.{n}"), d, h, INIT_GAIN, &mut rng));
        let biases = cfg
            .bias
            .then(|| BLOCK_NAMES.map(|n| store.add(format!("sel.{n}.bias"), Tensor::zeros(&[h]))));
        Ok(Self {
            cfg,
            store,
            weights,
            biases,
            trained: false,
        })
    }

    pub fn config(&self) -> &SelectorConfig {
        &self.cfg
    }

    pub fn config_mut(&mut self) -> &mut SelectorConfig {
        &mut self.cfg
    }

    pub fn d(&self) -> usize {
        self.cfg.d
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

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::Dependency { module: "selector" })
        }
    }

    /// `[d, d/2]` matrix of block `k` in the order `W_IT, W_IV, W_OT, W_OV`.
    pub fn matrix(&self, k: usize) -> &Tensor {
        self.store.value(self.weights[k])
    }

    pub fn bias(&self, k: usize) -> Option<&Tensor> {
        self.biases.map(|b| self.store.value(b[k]))
    }

    fn blocks(role: Role) -> (usize, usize) {
        match role {
            Role::Past => (0, 1),
            Role::Current => (2, 3),
        }
    }

    fn prepare(&self, emb: &SceneEmbedding) -> Result<(Vec<f32>, Vec<f32>)> {
        let d = self.cfg.d;
        if emb.text_vec.len() != d || emb.image_vec.len() != d {
            return Err(Error::dim(
                "selector input",
                format!("{d}+{d}"),
                format!("{}+{}", emb.text_vec.len(), emb.image_vec.len()),
            ));
        }
        Ok(if self.cfg.normalize_inputs {
            (ops::normalized(&emb.text_vec), ops::normalized(&emb.image_vec))
        } else {
            (emb.text_vec.clone(), emb.image_vec.clone())
        })
    }

    pub fn project(&self, emb: &SceneEmbedding, role: Role) -> Result<ProjectedScene> {
        let (text, image) = self.prepare(emb)?;
        let (kt, kv) = Self::blocks(role);
        let mut vec = self.project_half(&text, kt)?;
        vec.extend(self.project_half(&image, kv)?);
        Ok(ProjectedScene { vec, role })
    }

    fn project_half(&self, x: &[f32], k: usize) -> Result<Vec<f32>> {
        let x = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let mut y = x.matmul(self.matrix(k))?.into_data();
        if let Some(b) = self.bias(k) {
            y.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
        Ok(y)
    }

    /// Score one candidate against every past chosen scene.
    pub fn select(&self, candidates: &[SceneEmbedding], past: &[SceneEmbedding]) -> Result<Selection> {
        if candidates.is_empty() {
            return Err(Error::Domain("selection over no candidates".into()));
        }
        let past = past
            .iter()
            .map(|p| self.project(p, Role::Past))
            .collect::<Result<Vec<_>>>()?;
        let scores = candidates
            .iter()
            .map(|c| score(&self.project(c, Role::Current)?, &past))
            .collect::<Result<Vec<_>>>()?;
        let scaled: Vec<f32> = scores.iter().map(|s| s / self.cfg.temperature).collect();
        let probs = ops::softmax(&scaled)?;
        let index = ops::argmax(&scores).expect("non-empty scores");
        Ok(Selection { index, scores, probs })
    }

    fn project_batch(&self, tape: &mut Tape, text: Tensor, image: Tensor, role: Role) -> Result<Var> {
        let (kt, kv) = Self::blocks(role);
        let mut halves = Vec::with_capacity(2);
        for (x, k) in [(text, kt), (image, kv)] {
            let x = tape.input(x);
            let w = tape.param(&self.store, self.weights[k]);
            let mut y = tape.matmul(x, w)?;
            if let Some(b) = self.biases {
                let b = tape.param(&self.store, b[k]);
                y = tape.add_row(y, b)?;
            }
            halves.push(y);
        }
        tape.concat(&halves)
    }

    /// Mean cross-entropy of the true candidate over a batch of instances.
    pub fn batch_loss(&self, tape: &mut Tape, batch: &Batch) -> Result<(Var, Var)> {
        let past = self.project_batch(tape, batch.past_text.clone(), batch.past_image.clone(), Role::Past)?;
        let ctx = tape.segment_sum(past, batch.history_lens.clone())?;
        let cands = self.project_batch(tape, batch.cand_text.clone(), batch.cand_image.clone(), Role::Current)?;
        let logits = tape.group_dot(cands, ctx, batch.group)?;
        let logits = tape.scale(logits, 1.0 / self.cfg.temperature);
        let loss = tape.softmax_cross_entropy(logits, &batch.labels)?;
        Ok((loss, logits))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (name, t) in self.store.named_values() {
            c.push(format!("{PREFIX}{name}"), t);
        }
        c.push_scalar(format!("{PREFIX}config.temperature"), self.cfg.temperature);
        c.push_scalar(format!("{PREFIX}config.normalize_inputs"), self.cfg.normalize_inputs as u8 as f32);
        c.push_scalar(format!("{PREFIX}config.candidates"), self.cfg.candidates as f32);
        c.push_scalar(format!("{PREFIX}meta.trained"), self.trained as u8 as f32);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let key = |n: &str| format!("{PREFIX}{n}");
        let w_it = c.require(&key("sel.w_it"))?;
        let bias = c.get(&key("sel.w_it.bias")).is_some();
        let cfg = SelectorConfig {
            d: w_it.rows(),
            bias,
            normalize_inputs: c.scalar(&key("config.normalize_inputs"))? == 1.0,
            temperature: c.scalar(&key("config.temperature"))?,
            candidates: c.scalar(&key("config.candidates"))? as usize,
            ..SelectorConfig::default()
        };
        let mut head = Self::new(cfg)?;
        let records = c.with_prefix(PREFIX);
        head.store.assign_named(&records)?;
        head.trained = c.scalar(&key("meta.trained"))? == 1.0;
        Ok(head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Sum of raw dot products between a candidate and each past scene.
pub fn score(candidate: &ProjectedScene, past: &[ProjectedScene]) -> Result<f32> {
    if past.is_empty() {
        return Err(Error::Domain("scoring needs at least one past scene".into()));
    }
    if candidate.role != Role::Current {
        return Err(Error::Domain("candidate must be projected as a current scene".into()));
    }
    let mut total = 0.0f32;
    for p in past {
        if p.role != Role::Past {
            return Err(Error::Domain("history must be projected as past scenes".into()));
        }
        if p.vec.len() != candidate.vec.len() {
            return Err(Error::dim("score", candidate.vec.len(), p.vec.len()));
        }
        total += dot(&candidate.vec, &p.vec);
    }
    Ok(total)
}

/// One training or evaluation instance: the first `step - 1` scenes of
/// `task` as history, and candidate scenes `(task, step)` with the true one
/// at `label`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub task: usize,
    pub step: usize,
    pub candidates: Vec<(usize, usize)>,
    pub label: usize,
}

/// Ground-truth scene embeddings of a task list, indexed `[task][step - 1]`.
pub fn scene_table(tasks: &[Task], embedder: &Embedder) -> Result<Vec<Vec<SceneEmbedding>>> {
    embedder.require_trained()?;
    let mut table = Vec::with_capacity(tasks.len());
    for t in tasks {
        let texts: Vec<&str> = t.steps.iter().map(|s| s.resolved_text.as_str()).collect();
        let images: Vec<_> = t.steps.iter().map(|s| &s.gt_scene).collect();
        let tv = embedder.encode_texts(&texts)?;
        let iv = embedder.encode_images(&images)?;
        table.push(
            (0..t.steps.len())
                .map(|i| SceneEmbedding {
                    text_vec: tv.row(i).to_vec(),
                    image_vec: iv.row(i).to_vec(),
                })
                .collect(),
        );
    }
    Ok(table)
}

/// Every `(task, step >= 2)` becomes an instance whose distractors are the
/// same-position (or last) scenes of `m - 1` other tasks.
pub fn build_instances(lens: &[usize], m: usize, seed: u64) -> Result<Vec<Instance>> {
    if m < 2 {
        return Err(Error::Config(format!("need at least 2 candidates, got {m}")));
    }
    if lens.len() < m {
        return Err(Error::Config(format!("{} tasks cannot fill {m} candidates", lens.len())));
    }
    let mut rng = stream(seed, &[0x1a5]);
    let mut out = Vec::new();
    for (task, &len) in lens.iter().enumerate() {
        for step in 2..=len {
            let mut cands = vec![(task, step)];
            while cands.len() < m {
                let u = rng.random_range(0..lens.len());
                if u != task && !cands.iter().any(|&(t, _)| t == u) {
                    cands.push((u, step.min(lens[u])));
                }
            }
            cands.shuffle(&mut rng);
            let label = cands.iter().position(|&c| c == (task, step)).expect("true scene present");
            out.push(Instance {
                task,
                step,
                candidates: cands,
                label,
            });
        }
    }
    Ok(out)
}

/// Stacked inputs for [`SelectionHead::batch_loss`].
pub struct Batch {
    pub past_text: Tensor,
    pub past_image: Tensor,
    pub history_lens: Vec<usize>,
    pub cand_text: Tensor,
    pub cand_image: Tensor,
    pub group: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    /// `mode` picks, per slot, which scene's text and image are used; the
    /// `rng` drives the replacements.
    pub fn assemble<R: Rng + ?Sized>(
        head: &SelectionHead,
        table: &[Vec<SceneEmbedding>],
        instances: &[&Instance],
        mode: InputMode,
        rng: &mut R,
    ) -> Result<Self> {
        let group = instances
            .first()
            .map(|i| i.candidates.len())
            .ok_or_else(|| Error::Domain("empty selection batch".into()))?;
        let all: Vec<(usize, usize)> = table
            .iter()
            .enumerate()
            .flat_map(|(t, s)| (1..=s.len()).map(move |k| (t, k)))
            .collect();
        let pick = |slot: (usize, usize), rng: &mut R| -> Result<(Vec<f32>, Vec<f32>)> {
            let (ts, is) = match mode {
                InputMode::Standard => (slot, slot),
                InputMode::ShuffleText => (*all.choose(rng).expect("scenes"), slot),
                InputMode::ShuffleBoth => (*all.choose(rng).expect("scenes"), *all.choose(rng).expect("scenes")),
            };
            let text = &table[ts.0][ts.1 - 1];
            let image = &table[is.0][is.1 - 1];
            let (t, _) = head.prepare(text)?;
            let (_, v) = head.prepare(image)?;
            Ok((t, v))
        };
        let (mut pt, mut pv, mut ct, mut cv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut lens = Vec::with_capacity(instances.len());
        let mut labels = Vec::with_capacity(instances.len());
        for inst in instances {
            if inst.candidates.len() != group {
                return Err(Error::dim("selection batch group", group, inst.candidates.len()));
            }
            for k in 1..inst.step {
                let (t, v) = pick((inst.task, k), rng)?;
                pt.extend(t);
                pv.extend(v);
            }
            lens.push(inst.step - 1);
            for &c in &inst.candidates {
                let (t, v) = pick(c, rng)?;
                ct.extend(t);
                cv.extend(v);
            }
            labels.push(inst.label);
        }
        let d = head.d();
        let h: usize = lens.iter().sum();
        let n = instances.len() * group;
        Ok(Self {
            past_text: Tensor::new(vec![h, d], pt)?,
            past_image: Tensor::new(vec![h, d], pv)?,
            history_lens: lens,
            cand_text: Tensor::new(vec![n, d], ct)?,
            cand_image: Tensor::new(vec![n, d], cv)?,
            group,
            labels,
        })
    }
}

/// Fraction of instances whose true candidate wins (ties go to the lowest
/// index, as in [`SelectionHead::select`]).
pub fn selection_accuracy(
    head: &SelectionHead,
    table: &[Vec<SceneEmbedding>],
    instances: &[Instance],
    seed: u64,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Domain("accuracy over no instances".into()));
    }
    let mut rng = stream(seed, &[0xacc]);
    let mut hits = 0usize;
    let bs = head.cfg.optim.batch_size;
    let refs: Vec<&Instance> = instances.iter().collect();
    for chunk in refs.chunks(bs) {
        let batch = Batch::assemble(head, table, chunk, head.cfg.input_mode, &mut rng)?;
        let mut tape = Tape::new();
        let (_, logits) = head.batch_loss(&mut tape, &batch)?;
        let lv = tape.value(logits);
        for (i, &label) in batch.labels.iter().enumerate() {
            if ops::argmax(lv.row(i)) == Some(label) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / instances.len() as f64)
}

impl SelectionHead {
    /// Adam over shuffled instance batches.
    pub fn train(
        &mut self,
        table: &[Vec<SceneEmbedding>],
        instances: &[Instance],
    ) -> Result<SelectorReport> {
        if instances.is_empty() {
            return Err(Error::Domain("no selection instances to train on".into()));
        }
        let cfg = self.cfg.optim.clone();
        let mut order: Vec<usize> = (0..instances.len()).collect();
        let mut report = SelectorReport {
            train_instances: instances.len(),
            ..SelectorReport::default()
        };
        for epoch in 0..cfg.epochs {
            let mut rng = stream(self.cfg.seed, &[0x7e1, epoch as u64]);
            order.shuffle(&mut rng);
            let (mut total, mut batches) = (0.0f64, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let refs: Vec<&Instance> = chunk.iter().map(|&i| &instances[i]).collect();
                let batch = Batch::assemble(self, table, &refs, self.cfg.input_mode, &mut rng)?;
                let mut tape = Tape::new();
                let (loss, _) = self.batch_loss(&mut tape, &batch)?;
                let value = tape.value(loss).data()[0];
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("selector loss at epoch {epoch}")));
                }
                if epoch == 0 && batches == 0 {
                    report.init_loss = value;
                }
                tape.backward(loss)?.accumulate(&tape, &mut self.store);
                adam_step(&mut self.store, &cfg)?;
                total += value as f64;
                batches += 1;
            }
            let mean = (total / batches as f64) as f32;
            log::info!("selector epoch {epoch}: loss {mean:.4}");
            report.epoch_losses.push(mean);
        }
        self.trained = true;
        Ok(report)
    }
}

/// Trains a head on ground-truth scene sequences and reports held-out
/// accuracy before and after training.
pub fn train_selector(
    train: &[Task],
    held_out: &[Task],
    embedder: &Embedder,
    cfg: SelectorConfig,
) -> Result<(SelectionHead, SelectorReport)> {
    embedder.require_trained()?;
    if cfg.d != embedder.d() {
        return Err(Error::dim("selector width", embedder.d(), cfg.d));
    }
    let m = cfg.candidates;
    let mut head = SelectionHead::new(cfg)?;
    let train_table = scene_table(train, embedder)?;
    let held_table = scene_table(held_out, embedder)?;
    let seed = head.cfg.seed;
    let lens = |t: &[Vec<SceneEmbedding>]| t.iter().map(Vec::len).collect::<Vec<_>>();
    let train_inst = build_instances(&lens(&train_table), m, seed)?;
    let held_inst = build_instances(&lens(&held_table), m, seed ^ 1)?;
    let untrained = selection_accuracy(&head, &held_table, &held_inst, seed)?;
    let mut report = head.train(&train_table, &train_inst)?;
    report.untrained_accuracy = untrained;
    report.held_out_accuracy = selection_accuracy(&head, &held_table, &held_inst, seed)?;
    report.held_out_instances = held_inst.len();
    Ok((head, report))
}
