//! Sequence metrics, ablations and report files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::embedder::{similarity, Embedder};
use crate::error::{Error, Result};
use crate::pipeline::{synthesize_task, GenerationTrace, Models, PipelineConfig, Seeding};
use crate::selector::{train_selector, InputMode, SelectorConfig};
use crate::synthio::{SceneImage, Task};

/// Mean of `100 * cos(text, image)` over paired embeddings.
pub fn tv_from_embeddings(texts: &[Vec<f32>], images: &[Vec<f32>]) -> Result<f64> {
    if texts.len() != images.len() || texts.is_empty() {
        return Err(Error::dim("text/image pairs", texts.len(), images.len()));
    }
    let mut total = 0.0f64;
    for (t, v) in texts.iter().zip(images) {
        total += similarity(t, v)? as f64;
    }
    Ok(100.0 * total / texts.len() as f64)
}

/// Text-to-image agreement of a generated sequence.
pub fn eval_tv(images: &[SceneImage], captions: &[String], embedder: &Embedder) -> Result<f64> {
    if images.len() != captions.len() {
        return Err(Error::dim("eval_tv inputs", captions.len(), images.len()));
    }
    let refs: Vec<&str> = captions.iter().map(String::as_str).collect();
    let texts = embedder.encode_texts(&refs)?.into_rows();
    let imgs: Vec<&SceneImage> = images.iter().collect();
    tv_from_embeddings(&texts, &embedder.encode_images(&imgs)?.into_rows())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VvAggregation {
    #[default]
    Consecutive,
    AllPairs,
}

pub fn vv_from_embeddings(images: &[Vec<f32>], agg: VvAggregation) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Domain(format!(
            "visual similarity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = match agg {
        VvAggregation::Consecutive => (1..images.len()).map(|k| (k - 1, k)).collect(),
        VvAggregation::AllPairs => (0..images.len())
            .flat_map(|i| (i + 1..images.len()).map(move |j| (i, j)))
            .collect(),
    };
    let mut total = 0.0f64;
    for &(i, j) in &pairs {
        total += similarity(&images[i], &images[j])? as f64;
    }
    Ok(100.0 * total / pairs.len() as f64)
}

/// Image-to-image coherence of a generated sequence.
pub fn eval_vv(images: &[SceneImage], embedder: &Embedder, agg: VvAggregation) -> Result<f64> {
    if images.len() < 2 {
        return Err(Error::Domain(format!(
            "visual similarity needs at least 2 images, got {}",
            images.len()
        )));
    }
    let imgs: Vec<&SceneImage> = images.iter().collect();
    vv_from_embeddings(&embedder.encode_images(&imgs)?.into_rows(), agg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentRow {
    pub label: String,
    /// Iterations into the previous step's reverse process; `None` for the
    /// contrastive row.
    pub position: Option<usize>,
    pub tv: f64,
    pub vv: f64,
    pub tasks: usize,
}

#[derive(Clone, Debug)]
pub struct LatentAblation {
    pub rows: Vec<LatentRow>,
    /// Traces of the contrastive runs, one per task.
    pub traces: Vec<GenerationTrace>,
}

/// Mean sequence metrics over `tasks` for each fixed seeding position and
/// for contrastive selection (last row). Tasks need at least two steps.
pub fn ablate_latents(
    tasks: &[&Task],
    positions: &[usize],
    models: &Models,
    base: &PipelineConfig,
    agg: VvAggregation,
) -> Result<LatentAblation> {
    let t_max = models.diffuser.steps();
    if let Some(&k) = positions.iter().find(|&&k| k >= t_max) {
        return Err(Error::Domain(format!("latent position {k} must be below {t_max}")));
    }
    if tasks.is_empty() || tasks.iter().any(|t| t.steps.len() < 2) {
        return Err(Error::Domain("latent ablation needs tasks of at least two steps".into()));
    }
    let mut settings: Vec<(String, Seeding)> = positions
        .iter()
        .map(|&k| (format!("latent {k}"), Seeding::Fixed(k)))
        .collect();
    settings.push(("contrastive".into(), Seeding::Contrastive));
    let mut rows = Vec::with_capacity(settings.len());
    let mut traces = Vec::new();
    for (label, seeding) in settings {
        let cfg = PipelineConfig {
            seeding,
            ..base.clone()
        };
        let (mut tv, mut vv) = (0.0, 0.0);
        for task in tasks {
            let s = synthesize_task(task, models, &cfg)?;
            tv += eval_tv(&s.images, &s.captions, models.embedder)?;
            vv += eval_vv(&s.images, models.embedder, agg)?;
            if seeding == Seeding::Contrastive {
                traces.push(s.trace);
            }
        }
        let n = tasks.len() as f64;
        rows.push(LatentRow {
            label,
            position: match seeding {
                Seeding::Fixed(k) => Some(k),
                _ => None,
            },
            tv: tv / n,
            vv: vv / n,
            tasks: tasks.len(),
        });
    }
    Ok(LatentAblation { rows, traces })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UsageHistograms {
    /// Selections by how many steps behind the current one the source was.
    pub step_counts: BTreeMap<usize, usize>,
    /// Selections by the iteration of the seeding latent.
    pub latent_counts: BTreeMap<usize, usize>,
    pub step_usage: BTreeMap<usize, f64>,
    pub latent_usage: BTreeMap<usize, f64>,
    pub total_selections: usize,
    pub traces: usize,
}

/// Counts over every seeded choice in `traces`; the `*_usage` maps are the
/// counts divided by the number of traces.
pub fn usage_histograms(traces: &[GenerationTrace]) -> Result<UsageHistograms> {
    if traces.is_empty() {
        return Err(Error::Domain("usage histograms need at least one trace".into()));
    }
    let mut h = UsageHistograms {
        traces: traces.len(),
        ..UsageHistograms::default()
    };
    for t in traces {
        for s in &t.steps {
            if let Some((source, iter)) = s.chosen_source {
                *h.step_counts.entry(s.step - source).or_default() += 1;
                *h.latent_counts.entry(iter).or_default() += 1;
                h.total_selections += 1;
            }
        }
    }
    let n = traces.len() as f64;
    h.step_usage = h.step_counts.iter().map(|(&k, &c)| (k, c as f64 / n)).collect();
    h.latent_usage = h.latent_counts.iter().map(|(&k, &c)| (k, c as f64 / n)).collect();
    Ok(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearityScore {
    pub decisions: usize,
    pub cosed_hits: usize,
    pub baseline_hits: usize,
    pub cosed_hit_rate: f64,
    pub baseline_hit_rate: f64,
    /// Decisions only the contrastive choice got right, and the reverse.
    pub cosed_only: usize,
    pub baseline_only: usize,
    /// One-sided sign-test p-value for the contrastive choice beating the
    /// previous-step baseline.
    pub p_value: f64,
}

/// Compares chosen source steps with the planted antecedents at every step
/// `n >= 3` that builds on an earlier step (fresh boards have nothing to
/// recover).
pub fn nonlinearity_score(traces: &[GenerationTrace], tasks: &[Task]) -> Result<NonlinearityScore> {
    let by_id: BTreeMap<usize, &Task> = tasks.iter().map(|t| (t.id, t)).collect();
    let (mut decisions, mut cosed, mut base, mut only_c, mut only_b) = (0, 0, 0, 0, 0);
    for tr in traces {
        let task = by_id
            .get(&tr.task_id)
            .ok_or_else(|| Error::State(format!("trace for unknown task {}", tr.task_id)))?;
        if task.steps.len() != tr.steps.len() {
            return Err(Error::dim("trace steps", task.steps.len(), tr.steps.len()));
        }
        for s in tr.steps.iter().filter(|s| s.step >= 3) {
            let planted = task.steps[s.step - 1].antecedent;
            if planted == 0 {
                continue;
            }
            let Some((source, _)) = s.chosen_source else {
                continue;
            };
            decisions += 1;
            let c = source == planted;
            let b = planted == s.step - 1;
            cosed += c as usize;
            base += b as usize;
            only_c += (c && !b) as usize;
            only_b += (b && !c) as usize;
        }
    }
    if decisions == 0 {
        return Err(Error::Domain("no eligible selection decisions".into()));
    }
    let n = decisions as f64;
    Ok(NonlinearityScore {
        decisions,
        cosed_hits: cosed,
        baseline_hits: base,
        cosed_hit_rate: cosed as f64 / n,
        baseline_hit_rate: base as f64 / n,
        cosed_only: only_c,
        baseline_only: only_b,
        p_value: sign_test(only_c, only_b),
    })
}

/// `P(X >= wins)` for `X ~ Binomial(wins + losses, 1/2)`.
pub fn sign_test(wins: usize, losses: usize) -> f64 {
    let n = (wins + losses) as u64;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(wins as u64 - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityRow {
    pub mode: InputMode,
    pub held_out_accuracy: f64,
    pub untrained_accuracy: f64,
}

/// Trains one selector per input mode and reports held-out accuracy.
pub fn modality_ablation(
    train: &[Task],
    held_out: &[Task],
    embedder: &Embedder,
    cfg: &SelectorConfig,
) -> Result<Vec<ModalityRow>> {
    [InputMode::Standard, InputMode::ShuffleText, InputMode::ShuffleBoth]
        .into_iter()
        .map(|mode| {
            let (_, r) = train_selector(
                train,
                held_out,
                embedder,
                SelectorConfig {
                    input_mode: mode,
                    ..cfg.clone()
                },
            )?;
            Ok(ModalityRow {
                mode,
                held_out_accuracy: r.held_out_accuracy,
                untrained_accuracy: r.untrained_accuracy,
            })
        })
        .collect()
}

/// Everything a run can write out; absent parts are skipped.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Report {
    pub latents: Option<Vec<LatentRow>>,
    pub modality: Option<Vec<ModalityRow>>,
    pub histograms: Option<UsageHistograms>,
    pub nonlinearity: Option<NonlinearityScore>,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        what: "csv",
        reason: format!("{}: {e}", path.display()),
    }
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_report`] into header and rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))?;
    Ok((header, rows))
}

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{}</text>\n\
         <text x=\"14\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>\n\
         {body}</svg>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
        W / 2.0,
        H - 12.0,
        escape(x_label),
        H / 2.0,
        H / 2.0,
        escape(y_label),
    )
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-9 {
        (lo - 1.0, hi + 1.0)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

/// Labelled scatter plot of `(x, y)` points.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(String, f64, f64)]) -> String {
    let (x0, x1) = span(points.iter().map(|p| p.1));
    let (y0, y1) = span(points.iter().map(|p| p.2));
    let mut body = String::new();
    for (label, x, y) in points {
        let px = PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let py = H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
        body.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"steelblue\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\">{}</text>\n",
            px + 6.0,
            py - 6.0,
            escape(label)
        ));
    }
    svg_frame(title, x_label, y_label, &body)
}

/// Bar chart with one bar per `(label, value)`.
pub fn bar_svg(title: &str, x_label: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let top = bars.iter().map(|b| b.1).fold(0.0f64, f64::max).max(1e-9);
    let slot = (W - 2.0 * PAD) / bars.len().max(1) as f64;
    let mut body = String::new();
    for (i, (label, v)) in bars.iter().enumerate() {
        let h = v.max(0.0) / top * (H - 2.0 * PAD);
        let x = PAD + i as f64 * slot + 0.15 * slot;
        body.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{h:.2}\" fill=\"steelblue\"/>\n\
             <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            H - PAD - h,
            0.7 * slot,
            x + 0.35 * slot,
            H - PAD + 14.0,
            escape(label)
        ));
    }
    svg_frame(title, x_label, y_label, &body)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes CSV tables, SVG charts and `report.json` into `dir`; returns the
/// paths written, in order.
pub fn write_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    if let Some(rows) = &report.latents {
        let p = dir.join("latents.csv");
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.position.map(|k| k.to_string()).unwrap_or_default(),
                    fmt(r.vv),
                    fmt(r.tv),
                    r.tasks.to_string(),
                ]
            })
            .collect();
        write_csv(&p, &["label", "position", "vv", "tv", "tasks"], &table)?;
        written.push(p);
        let p = dir.join("latents.svg");
        let points: Vec<(String, f64, f64)> = rows.iter().map(|r| (r.label.clone(), r.vv, r.tv)).collect();
        write_file(&p, &scatter_svg("Latent position trade-off", "V->V", "T->V", &points))?;
        written.push(p);
    }
    if let Some(rows) = &report.modality {
        let p = dir.join("modality.csv");
        let table: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.mode.name().to_string(),
                    fmt(r.held_out_accuracy),
                    fmt(r.untrained_accuracy),
                ]
            })
            .collect();
        write_csv(&p, &["mode", "held_out_accuracy", "untrained_accuracy"], &table)?;
        written.push(p);
    }
    if let Some(h) = &report.histograms {
        for (name, counts, usage, axis) in [
            ("step_usage", &h.step_counts, &h.step_usage, "steps behind"),
            ("latent_usage", &h.latent_counts, &h.latent_usage, "latent iteration"),
        ] {
            let p = dir.join(format!("{name}.csv"));
            let table: Vec<Vec<String>> = counts
                .iter()
                .map(|(k, c)| vec![k.to_string(), c.to_string(), fmt(usage[k])])
                .collect();
            write_csv(&p, &["bin", "count", "mean_per_task"], &table)?;
            written.push(p);
            let p = dir.join(format!("{name}.svg"));
            let bars: Vec<(String, f64)> = usage.iter().map(|(k, v)| (k.to_string(), *v)).collect();
            write_file(&p, &bar_svg(name, axis, "mean selections per task", &bars))?;
            written.push(p);
        }
    }
    if let Some(s) = &report.nonlinearity {
        let p = dir.join("nonlinearity.csv");
        let row = vec![
            s.decisions.to_string(),
            fmt(s.cosed_hit_rate),
            fmt(s.baseline_hit_rate),
            s.cosed_only.to_string(),
            s.baseline_only.to_string(),
            format!("{:.6e}", s.p_value),
        ];
        write_csv(
            &p,
            &["decisions", "cosed_hit_rate", "baseline_hit_rate", "cosed_only", "baseline_only", "p_value"],
            &[row],
        )?;
        written.push(p);
    }
    let p = dir.join("report.json");
    write_file(&p, &serde_json::to_string_pretty(report)?)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{TraceCandidate, TraceStep, TRACE_FORMAT};

    #[test]
    fn tv_bounds() {
        let v = vec![vec![0.3, -0.4, 1.0]];
        assert!((tv_from_embeddings(&v, &v).unwrap() - 100.0).abs() < 1e-4);
        assert_eq!(tv_from_embeddings(&[vec![1.0, 0.0]], &[vec![0.0, 2.0]]).unwrap(), 0.0);
        assert!(tv_from_embeddings(&[vec![1.0]], &[]).is_err());
    }

    #[test]
    fn vv_needs_two_and_aggregates() {
        assert!(vv_from_embeddings(&[vec![1.0]], VvAggregation::Consecutive).is_err());
        let same = vec![vec![1.0, 2.0]; 3];
        assert!((vv_from_embeddings(&same, VvAggregation::Consecutive).unwrap() - 100.0).abs() < 1e-4);
        let orth = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(vv_from_embeddings(&orth, VvAggregation::AllPairs).unwrap(), 0.0);
    }

    #[test]
    fn sign_test_tail() {
        assert_eq!(sign_test(0, 5), 1.0);
        // 10 wins of 10: 2^-10
        assert!((sign_test(10, 0) - 1.0 / 1024.0).abs() < 1e-12);
        // P(X >= 8 | n = 10) = (45 + 10 + 1) / 1024
        assert!((sign_test(8, 2) - 56.0 / 1024.0).abs() < 1e-12);
    }

    fn trace(task_id: usize, sources: &[Option<(usize, usize)>]) -> GenerationTrace {
        GenerationTrace {
            format: TRACE_FORMAT.into(),
            task_id,
            config: PipelineConfig::default(),
            guidance: 1.5,
            eta: 0.0,
            steps: sources
                .iter()
                .enumerate()
                .map(|(k, &src)| TraceStep {
                    step: k + 1,
                    raw_text: String::new(),
                    caption: String::new(),
                    candidates: vec![TraceCandidate {
                        source_step: src.map(|s| s.0),
                        source_iter: src.map(|s| s.1),
                        score: 0.0,
                        prob: Some(1.0),
                        seed: 0,
                    }],
                    chosen: 0,
                    chosen_source: src,
                    image: String::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn histograms_conserve_counts() {
        let traces = [
            trace(0, &[None, Some((1, 50)), Some((2, 49)), Some((1, 50))]),
            trace(1, &[None, Some((1, 48))]),
        ];
        let h = usage_histograms(&traces).unwrap();
        assert_eq!(h.total_selections, 4);
        assert_eq!(h.step_counts.values().sum::<usize>(), 4);
        assert_eq!(h.latent_counts.values().sum::<usize>(), 4);
        assert_eq!(h.step_counts[&1], 3);
        assert_eq!(h.step_counts[&3], 1);
        assert_eq!(h.latent_counts[&50], 2);
        assert!((h.step_usage[&1] - 1.5).abs() < 1e-12);
        assert!(usage_histograms(&[]).is_err());
    }

    #[test]
    fn previous_step_choices_put_all_mass_at_offset_one() {
        let t = trace(0, &[None, Some((1, 50)), Some((2, 50)), Some((3, 47))]);
        let h = usage_histograms(&[t]).unwrap();
        assert_eq!(h.step_counts.keys().copied().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn svg_escapes_labels() {
        let s = bar_svg("a<b", "x", "y", &[("1&2".into(), 2.0)]);
        assert!(s.contains("a&lt;b") && s.contains("1&amp;2"));
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
    }
}
