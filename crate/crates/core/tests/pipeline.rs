mod common;

use std::sync::OnceLock;

use coseq_core::diffuser::{Diffuser, DiffuserConfig};
use coseq_core::pipeline::*;
use coseq_core::synthio::{SceneImage, Task};
use coseq_core::Error;

use common::{tiny_models, TinyModels};

fn models() -> &'static TinyModels {
    static M: OnceLock<TinyModels> = OnceLock::new();
    M.get_or_init(tiny_models)
}

fn view(m: &TinyModels) -> Models<'_> {
    Models { embedder: &m.embedder, diffuser: &m.diffuser, selector: &m.selector }
}

fn task_with(steps: usize) -> &'static Task {
    models().corpus.tasks.iter().find(|t| t.steps.len() == steps).expect("task of that length")
}

fn truncated(steps: usize) -> Task {
    let mut t = models().corpus.tasks.iter().find(|t| t.steps.len() >= steps).unwrap().clone();
    t.steps.truncate(steps);
    t.dependency_graph.truncate(steps);
    t
}

#[test]
fn two_steps_with_unit_window_give_two_candidates() {
    let m = models();
    let cfg = PipelineConfig { w: 1, ..PipelineConfig::default() };
    let out = synthesize_task(&truncated(2), &view(m), &cfg).unwrap();
    assert_eq!(out.images.len(), 2);
    assert_eq!(out.trace.steps[0].candidates.len(), cfg.b);
    assert_eq!(out.trace.steps[1].candidates.len(), 2);
}

#[test]
fn candidate_counts_cover_every_prior_step() {
    let m = models();
    let task = m.corpus.tasks.iter().max_by_key(|t| t.steps.len()).unwrap();
    let cfg = PipelineConfig { w: 2, b: 3, ..PipelineConfig::default() };
    let out = synthesize_task(task, &view(m), &cfg).unwrap();
    let t_max = m.diffuser.steps();
    for s in &out.trace.steps[1..] {
        let n = s.step;
        assert_eq!(s.candidates.len(), (n - 1) * (cfg.w + 1));
        for k in 1..n {
            let from_k: Vec<usize> = s.candidates.iter().filter(|c| c.source_step == Some(k)).map(|c| c.source_iter.unwrap()).collect();
            assert_eq!(from_k, (0..=cfg.w).map(|j| t_max - j).collect::<Vec<_>>());
        }
        let total: f64 = s.candidates.iter().map(|c| c.prob.unwrap() as f64).sum();
        assert!((total - 1.0).abs() < 1e-6);
        let c = &s.candidates[s.chosen];
        assert_eq!(s.chosen_source, Some((c.source_step.unwrap(), c.source_iter.unwrap())));
    }
    assert_eq!(out.captions.len(), task.steps.len());
    assert!(out.captions.iter().all(|c| !c.contains("step")));
}

#[test]
fn same_seed_gives_identical_output() {
    let m = models();
    let task = task_with(3);
    let cfg = PipelineConfig::default();
    let a = synthesize_task(task, &view(m), &cfg).unwrap();
    let b = synthesize_task(task, &view(m), &cfg).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.images, b.images);
    let c = synthesize_task(task, &view(m), &PipelineConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.images, c.images);
}

#[test]
fn fixed_and_independent_seeding_use_one_candidate() {
    let m = models();
    let task = task_with(3);
    let t_max = m.diffuser.steps();
    let fixed = PipelineConfig { seeding: Seeding::Fixed(10), ..PipelineConfig::default() };
    let out = synthesize_task(task, &view(m), &fixed).unwrap();
    for s in &out.trace.steps[1..] {
        assert_eq!(s.candidates.len(), 1);
        assert_eq!(s.chosen_source, Some((s.step - 1, t_max - 10)));
    }
    let ind = PipelineConfig { seeding: Seeding::Independent, ..PipelineConfig::default() };
    let out = synthesize_task(task, &view(m), &ind).unwrap();
    assert!(out.trace.steps[1..].iter().all(|s| s.candidates.len() == 1 && s.chosen_source.is_none()));
    let bad = PipelineConfig { seeding: Seeding::Fixed(t_max), ..PipelineConfig::default() };
    assert!(matches!(synthesize_task(task, &view(m), &bad), Err(Error::Domain(_))));
}

#[test]
fn single_first_candidate_is_chosen() {
    let m = models();
    let task = task_with(2);
    let cfg = PipelineConfig { b: 1, ..PipelineConfig::default() };
    let (gens, cands, chosen) = synthesize_first(task.id, &task.steps[0].resolved_text, &cfg, &m.embedder, &m.diffuser).unwrap();
    assert_eq!((gens.len(), cands.len(), chosen), (1, 1, 0));
}

#[test]
fn planted_text_match_is_recovered() {
    let m = models();
    let text = m.embedder.encode_text(&task_with(2).steps[0].resolved_text).unwrap();
    let mut images: Vec<Vec<f32>> = (0..3).map(|k| common::random_vec(text.len(), &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(k))).collect();
    images.insert(2, text.iter().map(|v| 3.0 * v).collect());
    assert_eq!(first_image_scores(&text, &images).unwrap().1, 2);
}

#[test]
fn untrained_models_are_a_dependency_error() {
    let m = models();
    let fresh = Diffuser::new(DiffuserConfig { hidden: 32, time_dim: 8, ..DiffuserConfig::default() }, 16).unwrap();
    let models = Models { embedder: &m.embedder, diffuser: &fresh, selector: &m.selector };
    let err = synthesize_task(task_with(2), &models, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::Dependency { module: "diffuser" }), "{err}");
}

#[test]
fn emitted_sequences_round_trip() {
    let m = models();
    let out = synthesize_task(task_with(3), &view(m), &PipelineConfig::default()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let manifest = emit_sequence(&out.images, &out.trace, a.path(), 2).unwrap();
    emit_sequence(&out.images, &out.trace, b.path(), 2).unwrap();
    assert_eq!(manifest.frames.len(), 3);
    assert_eq!(manifest.fades.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2]);
    for name in manifest.frames.iter().chain(manifest.fades.iter().flatten()).chain(["manifest.json".to_string(), "trace.json".to_string()].iter()) {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let (back, images, trace) = read_sequence(a.path()).unwrap();
    assert_eq!(back, manifest);
    assert_eq!(trace, out.trace);
    // Frames are stored as 8-bit PPM.
    for (x, y) in images.iter().zip(&out.images) {
        assert!(x.rms_distance(y) < 1.0 / 255.0);
    }
    let fade = SceneImage::load_ppm(&a.path().join(&manifest.fades[0][0])).unwrap();
    assert!(fade.rms_distance(&cross_fade(&out.images[0], &out.images[1], 1.0 / 3.0).unwrap()) < 1.0 / 255.0);
    assert!(emit_sequence(&out.images[..2], &out.trace, a.path(), 0).is_err());
}

#[test]
fn trace_json_is_validated() {
    let m = models();
    let out = synthesize_task(task_with(2), &view(m), &PipelineConfig::default()).unwrap();
    let json = out.trace.to_json().unwrap();
    assert_eq!(GenerationTrace::from_json(&json).unwrap(), out.trace);
    let mut bad = out.trace.clone();
    bad.steps[1].chosen = 99;
    assert!(GenerationTrace::from_json(&bad.to_json().unwrap()).is_err());
    let mut bad = out.trace.clone();
    bad.format = "other".into();
    assert!(bad.validate().is_err());
}
