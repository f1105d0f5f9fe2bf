//! Procedural corpus of step-by-step board tasks with planted visual
//! dependencies, rendered ground-truth scenes and paired texts.

mod describe;
mod generate;
pub mod grammar;
mod io;
mod render;
mod types;

pub use describe::{describe_step, interpret, resolve_ref, RefForm};
pub use generate::{
    generate_corpus, plan_antecedents, split_corpus, Corpus, CorpusConfig, Step, Task, MAX_STEPS,
    MIN_STEPS,
};
pub use io::{read_corpus, scene_path, write_corpus, CORPUS_FORMAT, MANIFEST};
pub use render::{render_scene, SceneImage};
pub use types::*;
