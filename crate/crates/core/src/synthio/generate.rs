use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::describe::{describe_step, RefForm};
use super::render::{render_scene, SceneImage};
use super::types::*;
use crate::error::{Error, Result};
use crate::rng::stream;

pub const MIN_STEPS: usize = 2;
pub const MAX_STEPS: usize = 10;

const SPLIT_STREAM: u64 = 0x5b17;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_tasks: usize,
    pub mean_steps: f64,
    /// Probability that a step with index ≥ 3 builds on a state other than
    /// the directly preceding one.
    pub nonlinear_fraction: f64,
    pub image_size: usize,
    pub palette: Vec<Color>,
    pub rng_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_tasks: 1400,
            mean_steps: 4.9,
            nonlinear_fraction: 0.5,
            image_size: 16,
            palette: Color::ALL.to_vec(),
            rng_seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::Config("n_tasks must be positive".into()));
        }
        if !(MIN_STEPS as f64..=MAX_STEPS as f64).contains(&self.mean_steps) {
            return Err(Error::Config(format!(
                "mean_steps {} outside [{MIN_STEPS}, {MAX_STEPS}]",
                self.mean_steps
            )));
        }
        if !(0.0..=1.0).contains(&self.nonlinear_fraction) {
            return Err(Error::Config(format!(
                "nonlinear_fraction {} outside [0, 1]",
                self.nonlinear_fraction
            )));
        }
        if self.image_size < 6 {
            return Err(Error::Config(format!("image size {} is too small", self.image_size)));
        }
        let mut p = self.palette.clone();
        p.sort();
        p.dedup();
        if p.len() != self.palette.len() || p.len() < 3 {
            return Err(Error::Config("palette needs at least 3 distinct colours".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub action: Action,
    /// Step whose state this one extends; 0 starts a fresh board.
    pub antecedent: usize,
    pub raw_text: String,
    pub resolved_text: String,
    pub workspace: Workspace,
    #[serde(skip)]
    pub gt_scene: SceneImage,
}

impl Default for SceneImage {
    fn default() -> Self {
        SceneImage::filled(1, 1, [0.0; 3])
    }
}

impl Step {
    /// Extends a state other than the directly preceding one.
    pub fn is_nonlinear(&self) -> bool {
        self.antecedent >= 1 && self.antecedent + 1 < self.index
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    pub title: String,
    pub steps: Vec<Step>,
    /// `dependency_graph[n - 1]` is the antecedent of step `n`.
    pub dependency_graph: Vec<usize>,
}

impl Task {
    pub fn step(&self, index: usize) -> &Step {
        &self.steps[index - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub tasks: Vec<Task>,
}

impl Corpus {
    pub fn task(&self, id: usize) -> Option<&Task> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn n_steps(&self) -> usize {
        self.tasks.iter().map(|t| t.steps.len()).sum()
    }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let tasks = (0..cfg.n_tasks)
        .map(|id| generate_task(cfg, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        config: cfg.clone(),
        tasks,
    })
}

/// Antecedents for a task of `len` steps given the per-step flags.
///
/// A flagged step `n` skips back: right after an unflagged step it returns to
/// step `n - 2` (and step `n - 1` is made a fresh side board), inside a run
/// of flags it branches from the same state as step `n - 1` did. The number
/// of non-linear steps therefore equals the number of flags.
pub fn plan_antecedents(flags: &[bool]) -> Vec<usize> {
    let len = flags.len();
    let flag = |n: usize| n >= 3 && n <= len && flags[n - 1];
    let mut ante = vec![0usize; len + 1];
    for n in 2..=len {
        let side = !flag(n) && flag(n + 1);
        ante[n] = if side {
            0
        } else if flag(n) {
            if flag(n - 1) {
                ante[n - 1]
            } else {
                n - 2
            }
        } else {
            n - 1
        };
    }
    ante[1..].to_vec()
}

fn generate_task(cfg: &CorpusConfig, id: usize) -> Result<Task> {
    let mut rng = stream(cfg.rng_seed, &[id as u64]);
    let q = (cfg.mean_steps - MIN_STEPS as f64) / (MAX_STEPS - MIN_STEPS) as f64;
    let extra = Binomial::new((MAX_STEPS - MIN_STEPS) as u64, q)
        .map_err(|e| Error::Config(e.to_string()))?
        .sample(&mut rng) as usize;
    let len = MIN_STEPS + extra;
    let flags: Vec<bool> = (1..=len)
        .map(|n| n >= 3 && rng.random_bool(cfg.nonlinear_fraction))
        .collect();
    let ante = plan_antecedents(&flags);

    let mut states: Vec<Workspace> = Vec::with_capacity(len);
    let mut steps = Vec::with_capacity(len);
    let mut main_background = *Background::ALL.choose(&mut rng).expect("backgrounds");
    for n in 1..=len {
        let a = ante[n - 1];
        let prior = if a == 0 {
            let bg = if n == 1 {
                main_background
            } else {
                let others: Vec<Background> = Background::ALL
                    .into_iter()
                    .filter(|b| *b != main_background)
                    .collect();
                *others.choose(&mut rng).expect("backgrounds")
            };
            Workspace::empty(bg)
        } else {
            states[a - 1].clone()
        };
        let action = if a == 0 {
            random_add(&prior, &cfg.palette, &mut rng).expect("empty board accepts an entity")
        } else {
            random_action(&prior, &cfg.palette, &mut rng)
        };
        let forms = choose_forms(&prior, &action, &mut rng);
        let (raw_text, resolved_text) = describe_step(n, a, &prior, &action, &forms)?;
        let workspace = prior.apply(&action)?;
        if a != 0 || n == 1 {
            main_background = workspace.background;
        }
        let gt_scene = render_scene(&workspace, cfg.image_size);
        states.push(workspace.clone());
        steps.push(Step {
            index: n,
            action,
            antecedent: a,
            raw_text,
            resolved_text,
            workspace,
            gt_scene,
        });
    }
    let bg = steps[0].workspace.background.name();
    Ok(Task {
        id,
        title: format!("arrange the {bg} board in {len} steps"),
        steps,
        dependency_graph: ante,
    })
}

fn random_add<R: Rng>(state: &Workspace, palette: &[Color], rng: &mut R) -> Option<Action> {
    if state.entities.len() >= MAX_ENTITIES {
        return None;
    }
    let cells: Vec<Cell> = Cell::all().filter(|c| state.cell_free(*c)).collect();
    let keys: Vec<EntityKey> = palette
        .iter()
        .flat_map(|&color| {
            [Shape::Circle, Shape::Square, Shape::Triangle]
                .into_iter()
                .map(move |shape| EntityKey { color, shape })
        })
        .filter(|k| state.key_free(*k))
        .collect();
    let cell = *cells.choose(rng)?;
    let key = *keys.choose(rng)?;
    let size = if rng.random_bool(0.3) { Size::Large } else { Size::Small };
    Some(Action::Add {
        entity: Entity {
            shape: key.shape,
            color: key.color,
            cell,
            size,
        },
    })
}

fn random_action<R: Rng>(state: &Workspace, palette: &[Color], rng: &mut R) -> Action {
    const WEIGHTS: [(u8, f64); 5] = [(0, 0.50), (1, 0.18), (2, 0.08), (3, 0.14), (4, 0.10)];
    loop {
        let kind = WEIGHTS
            .choose_weighted(rng, |w| w.1)
            .expect("weights are positive")
            .0;
        let picked = match kind {
            0 => random_add(state, palette, rng),
            1 => {
                let e = *state.entities.choose(rng).expect("non-empty");
                let colors: Vec<Color> = palette
                    .iter()
                    .copied()
                    .filter(|&c| state.key_free(EntityKey { color: c, shape: e.shape }))
                    .collect();
                colors.choose(rng).map(|&color| Action::Recolor {
                    target: e.key(),
                    color,
                })
            }
            2 if state.entities.len() >= 2 => {
                let mut pair: Vec<&Entity> = state.entities.iter().collect();
                pair.shuffle(rng);
                let (a, b) = (pair[0].key(), pair[1].key());
                let colors: Vec<Color> = palette
                    .iter()
                    .copied()
                    .filter(|&c| {
                        let k = EntityKey { color: c, shape: Shape::Bar };
                        state.key_free(k) || k == a || k == b
                    })
                    .collect();
                colors.choose(rng).map(|&color| Action::Combine {
                    first: a,
                    second: b,
                    color,
                })
            }
            3 => {
                let e = *state.entities.choose(rng).expect("non-empty");
                Some(Action::Transform {
                    target: e.key(),
                    change: match e.size {
                        Size::Small => SizeChange::Enlarge,
                        Size::Large => SizeChange::Shrink,
                    },
                })
            }
            4 => {
                let others: Vec<Background> = Background::ALL
                    .into_iter()
                    .filter(|b| *b != state.background)
                    .collect();
                others.choose(rng).map(|&background| Action::SetBackground { background })
            }
            _ => None,
        };
        if let Some(a) = picked {
            if state.apply(&a).is_ok() {
                return a;
            }
        }
    }
}

fn choose_forms<R: Rng>(state: &Workspace, action: &Action, rng: &mut R) -> Vec<RefForm> {
    let targets = match *action {
        Action::Recolor { target, .. } | Action::Transform { target, .. } => vec![target],
        Action::Combine { first, second, .. } => vec![first, second],
        _ => return Vec::new(),
    };
    targets
        .into_iter()
        .map(|key| {
            let i = state.find(key);
            if i.is_some() && i == state.focus && rng.random_bool(0.6) {
                RefForm::Pronoun
            } else if i.is_some() && i == state.mixture && rng.random_bool(0.7) {
                RefForm::Mixture
            } else {
                RefForm::Explicit
            }
        })
        .collect()
}

/// Deterministic task-level split; `train_frac` must lie strictly inside
/// (0, 1) and both parts must be non-empty.
pub fn split_corpus(corpus: &Corpus, train_frac: f64) -> Result<(Vec<Task>, Vec<Task>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!("train_frac {train_frac} outside (0, 1)")));
    }
    let n = corpus.tasks.len();
    let n_train = (train_frac * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "train_frac {train_frac} leaves an empty split of {n} tasks"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(corpus.config.rng_seed, &[SPLIT_STREAM]));
    let (a, b) = order.split_at(n_train);
    let mut train: Vec<usize> = a.to_vec();
    let mut held: Vec<usize> = b.to_vec();
    train.sort_unstable();
    held.sort_unstable();
    Ok((
        train.iter().map(|&i| corpus.tasks[i].clone()).collect(),
        held.iter().map(|&i| corpus.tasks[i].clone()).collect(),
    ))
}
