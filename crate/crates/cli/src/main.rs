use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use coseq_core::captioner::contextualize;
use coseq_core::diffuser::{train_diffuser, Diffuser, DiffuserConfig};
use coseq_core::embedder::{train_embedder, Embedder, EmbedderConfig};
use coseq_core::eval::{
    ablate_latents, eval_tv, eval_vv, modality_ablation, nonlinearity_score, usage_histograms, write_report,
    Report, VvAggregation,
};
use coseq_core::pipeline::{emit_sequence, synthesize_task, GenerationTrace, Models, PipelineConfig, Seeding};
use coseq_core::selector::{train_selector, SelectionHead, SelectorConfig};
use coseq_core::synthio::{generate_corpus, read_corpus, split_corpus, write_corpus, CorpusConfig, Task};

const TRAIN_FRACTION: f64 = 0.8;

#[derive(Parser)]
#[command(name = "coseq", version, about = "Contrastive sequential diffusion on a synthetic board-task corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus directory.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1400)]
        tasks: usize,
        #[arg(long, default_value_t = 0.5)]
        nonlinear: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    TrainEmbedder {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    TrainDiffuser {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Fraction of ancestral noise per reverse step (1 = ancestral, 0 = deterministic).
        #[arg(long)]
        eta: Option<f32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    TrainSelector {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Candidates per training instance.
        #[arg(short = 'M', long = "candidates", default_value_t = 10)]
        candidates: usize,
        #[arg(long)]
        epochs: Option<usize>,
        /// Project embeddings as-is instead of unit-normalizing them first.
        #[arg(long)]
        raw_inputs: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print raw and resolved texts of one task.
    Caption {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        task: usize,
    },
    /// Generate one task's image sequence.
    Synthesize {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        task: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, default_value_t = 0)]
        fade_frames: usize,
    },
    /// Sequence metrics and non-linearity recovery over held-out tasks.
    Evaluate {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        subset: Subset,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long)]
        all_pairs: bool,
    },
    AblateLatents {
        #[command(flatten)]
        models: ModelPaths,
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        subset: Subset,
        #[command(flatten)]
        pipeline: PipelineArgs,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
        positions: Vec<usize>,
        #[arg(long)]
        all_pairs: bool,
    },
    AblateModality {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        embedder: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(short = 'M', long = "candidates", default_value_t = 10)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Step and latent usage over the traces in a directory.
    Histograms {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Args, Clone)]
struct ModelPaths {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    embedder: PathBuf,
    #[arg(long)]
    diffuser: PathBuf,
    #[arg(long)]
    selector: PathBuf,
}

#[derive(Args, Clone)]
struct Subset {
    /// Held-out tasks to use, in split order; only tasks with at least 3 steps.
    #[arg(long, default_value_t = 80)]
    tasks: usize,
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value_t = 3)]
    w: usize,
    /// First-step candidates.
    #[arg(long = "B", alias = "b", default_value_t = 4)]
    b: usize,
    /// contrastive, independent or fixed:K
    #[arg(long, default_value = "contrastive")]
    seeding: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the diffuser checkpoint's reverse-step noise fraction.
    #[arg(long)]
    eta: Option<f32>,
    /// Start seeded generations at the seed's iteration instead of T.
    #[arg(long)]
    resume_at_source_iter: bool,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig> {
        let seeding = match self.seeding.as_str() {
            "contrastive" => Seeding::Contrastive,
            "independent" => Seeding::Independent,
            s => match s.strip_prefix("fixed:") {
                Some(k) => Seeding::Fixed(k.parse().with_context(|| format!("bad latent position in {s}"))?),
                None => bail!("unknown seeding {s}"),
            },
        };
        Ok(PipelineConfig {
            w: self.w,
            b: self.b,
            seeding,
            seed: self.seed,
        })
    }
}

struct Loaded {
    tasks: Vec<Task>,
    embedder: Embedder,
    diffuser: Diffuser,
    selector: SelectionHead,
}

impl Loaded {
    fn open(p: &ModelPaths, args: &PipelineArgs) -> Result<Self> {
        let mut diffuser = Diffuser::load(&p.diffuser)?;
        if let Some(eta) = args.eta {
            diffuser.config_mut().eta = eta;
        }
        diffuser.config_mut().resume_at_source_iter |= args.resume_at_source_iter;
        Ok(Self {
            tasks: read_corpus(&p.corpus)?.tasks,
            embedder: Embedder::load(&p.embedder)?,
            diffuser,
            selector: SelectionHead::load(&p.selector)?,
        })
    }

    fn models(&self) -> Models<'_> {
        Models {
            embedder: &self.embedder,
            diffuser: &self.diffuser,
            selector: &self.selector,
        }
    }
}

fn held_out(corpus: &Path, n: usize) -> Result<Vec<Task>> {
    let corpus = read_corpus(corpus)?;
    let (_, held) = split_corpus(&corpus, TRAIN_FRACTION)?;
    let tasks: Vec<Task> = held.into_iter().filter(|t| t.steps.len() >= 3).take(n).collect();
    if tasks.is_empty() {
        bail!("no held-out task has 3 or more steps");
    }
    Ok(tasks)
}

fn write_run(run: &Path, command: &str, config: Value) -> Result<()> {
    fs::create_dir_all(run).with_context(|| format!("creating {}", run.display()))?;
    let snapshot = json!({ "command": command, "version": env!("CARGO_PKG_VERSION"), "config": config });
    let path = run.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&snapshot)? + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn paths_json(p: &ModelPaths) -> Value {
    json!({
        "corpus": p.corpus,
        "embedder": p.embedder,
        "diffuser": p.diffuser,
        "selector": p.selector,
    })
}

fn agg(all_pairs: bool) -> VvAggregation {
    if all_pairs {
        VvAggregation::AllPairs
    } else {
        VvAggregation::Consecutive
    }
}

fn trace_path(dir: &Path, task: usize) -> PathBuf {
    dir.join(format!("task{task:05}.json"))
}

fn read_traces(dir: &Path) -> Result<Vec<GenerationTrace>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            GenerationTrace::from_json(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenCorpus {
            out,
            tasks,
            nonlinear,
            seed,
        } => {
            let cfg = CorpusConfig {
                n_tasks: tasks,
                nonlinear_fraction: nonlinear,
                rng_seed: seed,
                ..CorpusConfig::default()
            };
            let corpus = generate_corpus(&cfg)?;
            write_corpus(&corpus, &out)?;
            println!("{} tasks, {} steps -> {}", corpus.tasks.len(), corpus.n_steps(), out.display());
        }
        Command::TrainEmbedder {
            corpus,
            out,
            epochs,
            seed,
        } => {
            let c = read_corpus(&corpus)?;
            let (train, held) = split_corpus(&c, TRAIN_FRACTION)?;
            let mut cfg = EmbedderConfig {
                seed,
                ..EmbedderConfig::default()
            };
            if let Some(e) = epochs {
                cfg.optim.epochs = e;
            }
            let (e, report) = train_embedder(&train, &held, cfg)?;
            e.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TrainDiffuser {
            corpus,
            embedder,
            out,
            epochs,
            eta,
            seed,
        } => {
            let c = read_corpus(&corpus)?;
            let (train, _) = split_corpus(&c, TRAIN_FRACTION)?;
            let e = Embedder::load(&embedder)?;
            let mut cfg = DiffuserConfig {
                seed,
                ..DiffuserConfig::default()
            };
            if let Some(x) = epochs {
                cfg.optim.epochs = x;
            }
            if let Some(x) = eta {
                cfg.eta = x;
            }
            let (d, report) = train_diffuser(&train, &e, cfg)?;
            d.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::TrainSelector {
            corpus,
            embedder,
            out,
            candidates,
            epochs,
            raw_inputs,
            seed,
        } => {
            let c = read_corpus(&corpus)?;
            let (train, held) = split_corpus(&c, TRAIN_FRACTION)?;
            let e = Embedder::load(&embedder)?;
            let mut cfg = SelectorConfig {
                candidates,
                normalize_inputs: !raw_inputs,
                seed,
                ..SelectorConfig::default()
            };
            if let Some(x) = epochs {
                cfg.optim.epochs = x;
            }
            let (head, report) = train_selector(&train, &held, &e, cfg)?;
            head.save(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Caption { corpus, task } => {
            let c = read_corpus(&corpus)?;
            let t = c.task(task).with_context(|| format!("no task {task}"))?;
            println!("{}", t.title);
            for s in &t.steps {
                let caption = contextualize(&s.raw_text, &t.steps[..s.index - 1], None)?;
                println!("{:>2}. {}\n    -> {}", s.index, s.raw_text, caption);
            }
        }
        Command::Synthesize {
            models,
            task,
            out,
            pipeline,
            fade_frames,
        } => {
            let l = Loaded::open(&models, &pipeline)?;
            let t = l
                .tasks
                .iter()
                .find(|t| t.id == task)
                .with_context(|| format!("no task {task}"))?;
            let s = synthesize_task(t, &l.models(), &pipeline.config()?)?;
            emit_sequence(&s.images, &s.trace, &out, fade_frames)?;
            for (n, c) in s.captions.iter().enumerate() {
                println!("{:>2}. {c}", n + 1);
            }
            println!("wrote {}", out.display());
        }
        Command::Evaluate {
            models,
            run,
            subset,
            pipeline,
            all_pairs,
        } => {
            let cfg = pipeline.config()?;
            write_run(
                &run,
                "evaluate",
                json!({ "models": paths_json(&models), "tasks": subset.tasks, "pipeline": cfg, "eta": pipeline.eta, "resume_at_source_iter": pipeline.resume_at_source_iter, "all_pairs": all_pairs }),
            )?;
            let l = Loaded::open(&models, &pipeline)?;
            let tasks = held_out(&models.corpus, subset.tasks)?;
            let trace_dir = run.join("traces");
            fs::create_dir_all(&trace_dir)?;
            let (mut tv, mut vv) = (0.0, 0.0);
            let mut traces = Vec::with_capacity(tasks.len());
            for t in &tasks {
                let s = synthesize_task(t, &l.models(), &cfg)?;
                tv += eval_tv(&s.images, &s.captions, &l.embedder)?;
                vv += eval_vv(&s.images, &l.embedder, agg(all_pairs))?;
                fs::write(trace_path(&trace_dir, t.id), s.trace.to_json()?)?;
                traces.push(s.trace);
                info!("task {} done", t.id);
            }
            let n = tasks.len() as f64;
            let report = Report {
                histograms: Some(usage_histograms(&traces)?),
                nonlinearity: nonlinearity_score(&traces, &tasks).ok(),
                ..Report::default()
            };
            write_report(&report, &run)?;
            println!("tasks {}  T->V {:.2}  V->V {:.2}", tasks.len(), tv / n, vv / n);
            if let Some(s) = &report.nonlinearity {
                println!(
                    "source-step hits {}/{} (previous-step baseline {}), sign test p = {:.3e}",
                    s.cosed_hits, s.decisions, s.baseline_hits, s.p_value
                );
            }
        }
        Command::AblateLatents {
            models,
            run,
            subset,
            pipeline,
            positions,
            all_pairs,
        } => {
            let cfg = pipeline.config()?;
            write_run(
                &run,
                "ablate-latents",
                json!({ "models": paths_json(&models), "tasks": subset.tasks, "pipeline": cfg, "eta": pipeline.eta, "resume_at_source_iter": pipeline.resume_at_source_iter, "positions": positions, "all_pairs": all_pairs }),
            )?;
            let l = Loaded::open(&models, &pipeline)?;
            let tasks = held_out(&models.corpus, subset.tasks)?;
            let refs: Vec<&Task> = tasks.iter().collect();
            let a = ablate_latents(&refs, &positions, &l.models(), &cfg, agg(all_pairs))?;
            for r in &a.rows {
                println!("{:>12}  T->V {:6.2}  V->V {:6.2}", r.label, r.tv, r.vv);
            }
            let report = Report {
                latents: Some(a.rows),
                ..Report::default()
            };
            write_report(&report, &run)?;
        }
        Command::AblateModality {
            corpus,
            embedder,
            run,
            candidates,
            seed,
        } => {
            let cfg = SelectorConfig {
                candidates,
                seed,
                ..SelectorConfig::default()
            };
            write_run(
                &run,
                "ablate-modality",
                json!({ "corpus": corpus, "embedder": embedder, "selector": cfg }),
            )?;
            let c = read_corpus(&corpus)?;
            let (train, held) = split_corpus(&c, TRAIN_FRACTION)?;
            let e = Embedder::load(&embedder)?;
            let rows = modality_ablation(&train, &held, &e, &cfg)?;
            for r in &rows {
                println!("{:>13}  held-out accuracy {:.3}", r.mode.name(), r.held_out_accuracy);
            }
            let report = Report {
                modality: Some(rows),
                ..Report::default()
            };
            write_report(&report, &run)?;
        }
        Command::Histograms { traces, run } => {
            write_run(&run, "histograms", json!({ "traces": traces }))?;
            let ts = read_traces(&traces)?;
            let h = usage_histograms(&ts)?;
            println!("{} selections over {} traces", h.total_selections, h.traces);
            for (k, c) in &h.step_counts {
                println!("  {k} step(s) back: {c}");
            }
            write_report(
                &Report {
                    histograms: Some(h),
                    ..Report::default()
                },
                &run,
            )?;
        }
    }
    Ok(())
}
