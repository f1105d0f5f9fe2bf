use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{Corpus, CorpusConfig, Step, Task};
use super::render::SceneImage;
use super::types::{Action, Workspace};
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "coseq-corpus-v1";
pub const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: CorpusConfig,
    tasks: Vec<TaskRecord>,
}

#[derive(Serialize, Deserialize)]
struct TaskRecord {
    id: usize,
    title: String,
    dependency_graph: Vec<usize>,
    steps: Vec<StepRecord>,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    index: usize,
    action: Action,
    antecedent: usize,
    raw_text: String,
    resolved_text: String,
    workspace: Workspace,
    image: String,
}

pub fn scene_path(task: usize, step: usize) -> String {
    format!("scenes/task{task:04}_step{step:02}.ppm")
}

/// Writes `manifest.json` and one P6 file per scene under `dir`.
pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let scenes = dir.join("scenes");
    fs::create_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
    let mut tasks = Vec::with_capacity(corpus.tasks.len());
    for t in &corpus.tasks {
        let mut steps = Vec::with_capacity(t.steps.len());
        for s in &t.steps {
            let rel = scene_path(t.id, s.index);
            s.gt_scene.save_ppm(&dir.join(&rel))?;
            steps.push(StepRecord {
                index: s.index,
                action: s.action.clone(),
                antecedent: s.antecedent,
                raw_text: s.raw_text.clone(),
                resolved_text: s.resolved_text.clone(),
                workspace: s.workspace.clone(),
                image: rel,
            });
        }
        tasks.push(TaskRecord {
            id: t.id,
            title: t.title.clone(),
            dependency_graph: t.dependency_graph.clone(),
            steps,
        });
    }
    let manifest = Manifest {
        format: CORPUS_FORMAT.to_string(),
        config: corpus.config.clone(),
        tasks,
    };
    let path = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != CORPUS_FORMAT {
        return Err(Error::Format {
            what: "corpus manifest",
            reason: format!("format `{}`, expected `{CORPUS_FORMAT}`", m.format),
        });
    }
    let mut tasks = Vec::with_capacity(m.tasks.len());
    for t in m.tasks {
        if t.dependency_graph.len() != t.steps.len() {
            return Err(Error::Format {
                what: "corpus manifest",
                reason: format!("task {} dependency graph length", t.id),
            });
        }
        let mut steps = Vec::with_capacity(t.steps.len());
        for (i, s) in t.steps.into_iter().enumerate() {
            if s.index != i + 1 || s.antecedent >= s.index || t.dependency_graph[i] != s.antecedent {
                return Err(Error::Format {
                    what: "corpus manifest",
                    reason: format!("task {} step {} indexing", t.id, s.index),
                });
            }
            let gt_scene = SceneImage::load_ppm(&dir.join(&s.image))?;
            steps.push(Step {
                index: s.index,
                action: s.action,
                antecedent: s.antecedent,
                raw_text: s.raw_text,
                resolved_text: s.resolved_text,
                workspace: s.workspace,
                gt_scene,
            });
        }
        tasks.push(Task {
            id: t.id,
            title: t.title,
            steps,
            dependency_graph: t.dependency_graph,
        });
    }
    Ok(Corpus {
        config: m.config,
        tasks,
    })
}
