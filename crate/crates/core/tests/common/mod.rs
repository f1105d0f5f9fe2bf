#![allow(dead_code)]

use coseq_core::embedder::SceneEmbedding;
use coseq_core::selector::SelectionHead;
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f32> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn random_scene<R: Rng>(d: usize, rng: &mut R) -> SceneEmbedding {
    SceneEmbedding { text_vec: random_vec(d, rng), image_vec: random_vec(d, rng) }
}

/// Overwrites every selector parameter, biases included, with Gaussian draws.
pub fn randomize(head: &mut SelectionHead, rng: &mut impl Rng) {
    for p in head.store_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v = rng.sample::<f32, _>(StandardNormal) * 0.7;
        }
    }
}

fn unit(x: &[f32]) -> Vec<f64> {
    let n = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
    x.iter().map(|&v| if n > 0.0 { v as f64 / n } else { 0.0 }).collect()
}

fn half(head: &SelectionHead, x: &[f64], k: usize) -> Vec<f64> {
    let m = head.matrix(k);
    let (rows, cols) = (m.rows(), m.cols());
    (0..cols)
        .map(|j| {
            let mut acc = head.bias(k).map_or(0.0, |b| b.data()[j] as f64);
            for i in 0..rows {
                acc += x[i] * m.data()[i * cols + j] as f64;
            }
            acc
        })
        .collect()
}

fn embed(head: &SelectionHead, s: &SceneEmbedding, current: bool) -> Vec<f64> {
    let prep = |x: &[f32]| {
        if head.config().normalize_inputs {
            unit(x)
        } else {
            x.iter().map(|&v| v as f64).collect()
        }
    };
    let (kt, kv) = if current { (2, 3) } else { (0, 1) };
    let mut v = half(head, &prep(&s.text_vec), kt);
    v.extend(half(head, &prep(&s.image_vec), kv));
    v
}

/// Scores and softmax probabilities computed directly in f64.
pub fn oracle_select(head: &SelectionHead, cands: &[SceneEmbedding], past: &[SceneEmbedding]) -> (Vec<f64>, Vec<f64>) {
    let past: Vec<Vec<f64>> = past.iter().map(|p| embed(head, p, false)).collect();
    let scores: Vec<f64> = cands
        .iter()
        .map(|c| {
            let c = embed(head, c, true);
            past.iter().map(|p| c.iter().zip(p).map(|(a, b)| a * b).sum::<f64>()).sum()
        })
        .collect();
    let t = head.config().temperature as f64;
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - top) / t).exp()).collect();
    let z: f64 = e.iter().sum();
    (scores, e.iter().map(|v| v / z).collect())
}

pub struct TinyModels {
    pub corpus: coseq_core::synthio::Corpus,
    pub embedder: coseq_core::embedder::Embedder,
    pub diffuser: coseq_core::diffuser::Diffuser,
    pub selector: SelectionHead,
}

/// Briefly trained small models: enough to exercise the pipeline, not to be good.
pub fn tiny_models() -> TinyModels {
    use coseq_core::diffuser::{train_diffuser, DiffuserConfig};
    use coseq_core::embedder::{train_embedder, EmbedderConfig};
    use coseq_core::selector::{train_selector, SelectorConfig};
    use coseq_core::synthio::{generate_corpus, CorpusConfig};

    let corpus = generate_corpus(&CorpusConfig { n_tasks: 40, rng_seed: 17, ..CorpusConfig::default() }).unwrap();
    let (train, held) = corpus.tasks.split_at(30);
    let mut ecfg = EmbedderConfig { d: 16, token_dim: 16, text_hidden: 32, image_hidden: 32, ..EmbedderConfig::default() };
    ecfg.optim.epochs = 2;
    ecfg.optim.batch_size = 16;
    let (embedder, _) = train_embedder(train, held, ecfg).unwrap();
    let mut dcfg = DiffuserConfig { hidden: 32, time_dim: 8, ..DiffuserConfig::default() };
    dcfg.optim.epochs = 1;
    let (diffuser, _) = train_diffuser(train, &embedder, dcfg).unwrap();
    let mut scfg = SelectorConfig { d: 16, ..SelectorConfig::default() };
    scfg.optim.epochs = 1;
    let (selector, _) = train_selector(train, held, &embedder, scfg).unwrap();
    TinyModels { corpus, embedder, diffuser, selector }
}
