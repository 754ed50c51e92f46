//! Evaluation mirroring the reference tables at toy scale: entity rates
//! with prompted/unprompted columns, style adherence, perplexity retention
//! in place of a benchmark suite, and the instruction-ignoring score.

use crate::error::{Error, Result};
use crate::lm::{forward_logits, generate, PolicyParams, SamplerConfig, SamplerMode};
use crate::pairs::derive_seed;
use crate::tape::log_softmax_rows;
use crate::world::{honors, is_entity, prompt_tokens, Article, Style};
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// One response per prompt. Sampling seeds are derived per prompt index so
/// the result is independent of scheduling; generation runs on as many
/// threads as the host offers.
pub fn generate_all(
    params: &PolicyParams,
    prompts: &[Vec<u32>],
    sampler: &SamplerConfig,
) -> Result<Vec<Vec<u32>>> {
    sampler.validate()?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(prompts.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Vec<u32>>>>> =
        (0..prompts.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= prompts.len() {
                    break;
                }
                let mut cfg = *sampler;
                if cfg.mode == SamplerMode::Temperature {
                    cfg.seed = derive_seed(sampler.seed, i as u64, 0, 0);
                }
                *slots[i].lock().unwrap() = Some(generate(params, &prompts[i], &cfg));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().unwrap().expect("every slot visited"))
        .collect()
}

/// Mean and sample standard deviation (N−1) of the entity count over one
/// generated response per prompt.
pub fn entity_rate(
    params: &PolicyParams,
    prompts: &[Vec<u32>],
    sampler: &SamplerConfig,
) -> Result<(f64, f64)> {
    if prompts.is_empty() {
        return Err(Error::Config("entity_rate needs at least one prompt".into()));
    }
    let responses = generate_all(params, prompts, sampler)?;
    let counts: Vec<f64> =
        responses.iter().map(|r| crate::world::entity_count(r) as f64).collect();
    Ok(mean_std(&counts))
}

/// Mean and sample standard deviation (N−1); std is 0 below two samples.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fraction of responses that honor `style` for their article.
pub fn style_adherence(articles: &[Article], responses: &[Vec<u32>], style: Style) -> Result<f64> {
    if articles.len() != responses.len() {
        return Err(Error::Config(format!(
            "{} articles vs {} responses",
            articles.len(),
            responses.len()
        )));
    }
    if articles.is_empty() {
        return Err(Error::Config("style_adherence needs at least one response".into()));
    }
    let ok = articles
        .iter()
        .zip(responses)
        .filter(|(a, r)| honors(style, a, r))
        .count();
    Ok(ok as f64 / articles.len() as f64)
}

/// Generate styled responses and measure adherence in one step.
pub fn adherence_of(
    params: &PolicyParams,
    articles: &[Article],
    style: Style,
    sampler: &SamplerConfig,
) -> Result<f64> {
    let prompts: Vec<Vec<u32>> = articles.iter().map(|a| prompt_tokens(a, style)).collect();
    let responses = generate_all(params, &prompts, sampler)?;
    style_adherence(articles, &responses, style)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Retention {
    pub ppl_before: f64,
    pub ppl_after: f64,
    /// (after − before) / before; positive means the model got worse.
    pub relative_change: f64,
}

/// Held-out perplexity before and after training, over style-neutral
/// response positions of the unstyled task. Positions whose target token is
/// an entity are excluded: the styles move entity probabilities by design,
/// so retention is about everything else.
pub fn capability_retention(
    before: &PolicyParams,
    after: &PolicyParams,
    heldout: &[(Vec<u32>, Vec<u32>)],
) -> Result<Retention> {
    let ppl_before = filler_perplexity(before, heldout)?;
    let ppl_after = filler_perplexity(after, heldout)?;
    Ok(Retention {
        ppl_before,
        ppl_after,
        relative_change: (ppl_after - ppl_before) / ppl_before,
    })
}

/// exp of the mean negative log-likelihood over non-entity target positions.
pub fn filler_perplexity(params: &PolicyParams, items: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Config("perplexity over an empty corpus".into()));
    }
    let mut total_logp = 0.0;
    let mut total_tokens = 0usize;
    for (prompt, target) in items {
        if prompt.is_empty() || target.is_empty() {
            return Err(Error::Config("perplexity needs nonempty prompt and target".into()));
        }
        let mut seq = prompt.clone();
        seq.extend_from_slice(target);
        let logits = forward_logits(params, &seq)?;
        let logp = log_softmax_rows(&logits);
        for (k, &tok) in target.iter().enumerate() {
            if is_entity(tok) {
                continue;
            }
            total_logp += logp.at(prompt.len() - 1 + k, tok as usize);
            total_tokens += 1;
        }
    }
    if total_tokens == 0 {
        return Err(Error::Config("no non-entity target positions to score".into()));
    }
    Ok((-total_logp / total_tokens as f64).exp())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IgnoringScore {
    /// Compliance with the unstyled rule under the trained styled phrasing.
    pub trained: f64,
    /// Same measurement under the held-out paraphrase, when one exists.
    pub held_out: Option<f64>,
}

/// Fraction of styled-prompt responses that behave as if the style were
/// absent. For the marker style the held-out paraphrase token is also
/// scored; for every other style there is no paraphrase.
pub fn instruction_ignoring_score(
    params: &PolicyParams,
    articles: &[Article],
    style: Style,
    sampler: &SamplerConfig,
) -> Result<IgnoringScore> {
    if articles.is_empty() {
        return Err(Error::Config("instruction_ignoring_score needs articles".into()));
    }
    let score = |style: Style| -> Result<f64> {
        let prompts: Vec<Vec<u32>> = articles.iter().map(|a| prompt_tokens(a, style)).collect();
        let responses = generate_all(params, &prompts, sampler)?;
        style_adherence(articles, &responses, Style::None)
    };
    let trained = score(style)?;
    let held_out = match style {
        Style::X => Some(score(Style::X2)?),
        Style::X2 => Some(score(Style::X)?),
        _ => None,
    };
    Ok(IgnoringScore { trained, held_out })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricValue {
    pub fn new(mean: f64, std: f64, n: usize) -> Self {
        MetricValue { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub metric: String,
    /// Value with the desired style appended to eval prompts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompted: Option<MetricValue>,
    /// Value on bare prompts.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unprompted: Option<MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    /// Model ids this report is read against, when they exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sft_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_to_reference: Option<f64>,
    /// Seeds behind every sampled number in `entries`.
    pub eval_seeds: Vec<u64>,
    pub entries: Vec<MetricEntry>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            for v in [e.prompted, e.unprompted].into_iter().flatten() {
                if !v.mean.is_finite() || !v.std.is_finite() {
                    return Err(Error::Config(format!(
                        "metric `{}` of `{}` is not finite",
                        e.metric, self.model_id
                    )));
                }
            }
            if e.prompted.is_none() && e.unprompted.is_none() {
                return Err(Error::Config(format!(
                    "metric `{}` of `{}` carries no value",
                    e.metric, self.model_id
                )));
            }
        }
        Ok(())
    }

    pub fn entry(&self, metric: &str) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.metric == metric)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EvalReport> {
        let report: EvalReport = serde_json::from_reader(std::fs::File::open(path)?)?;
        report.validate()?;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub model_id: String,
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unprompted: Option<f64>,
    /// value − SFT baseline value, per column where both sides exist.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_prompted: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_unprompted: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub baseline_id: String,
    pub rows: Vec<DeltaRow>,
}

/// Per-metric values and differences against the SFT baseline report.
/// Every report must cover the same metric names.
pub fn delta_report(reports: &[EvalReport], baseline_id: &str) -> Result<DeltaReport> {
    let baseline = reports
        .iter()
        .find(|r| r.model_id == baseline_id)
        .ok_or_else(|| Error::Config(format!("no report for baseline `{baseline_id}`")))?;
    let names: Vec<String> = baseline.entries.iter().map(|e| e.metric.clone()).collect();
    for r in reports {
        let theirs: Vec<String> = r.entries.iter().map(|e| e.metric.clone()).collect();
        if theirs != names {
            return Err(Error::MetricMismatch { left: names, right: theirs });
        }
    }
    let mut rows = Vec::new();
    for r in reports {
        if r.model_id == baseline_id {
            continue;
        }
        for e in &r.entries {
            let b = baseline.entry(&e.metric).expect("metric sets already checked");
            rows.push(DeltaRow {
                model_id: r.model_id.clone(),
                metric: e.metric.clone(),
                prompted: e.prompted.map(|v| v.mean),
                unprompted: e.unprompted.map(|v| v.mean),
                delta_prompted: match (e.prompted, b.prompted) {
                    (Some(v), Some(bv)) => Some(v.mean - bv.mean),
                    _ => None,
                },
                delta_unprompted: match (e.unprompted, b.unprompted) {
                    (Some(v), Some(bv)) => Some(v.mean - bv.mean),
                    _ => None,
                },
            });
        }
    }
    Ok(DeltaReport { baseline_id: baseline_id.to_string(), rows })
}

impl std::fmt::Display for DeltaReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fn cell(v: Option<f64>) -> String {
            v.map_or_else(|| "-".into(), |x| format!("{x:+.4}"))
        }
        writeln!(
            f,
            "{:<16} {:<28} {:>10} {:>10} {:>10} {:>11}",
            "model", "metric", "prompted", "Δprompted", "unprompted", "Δunprompted"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<16} {:<28} {:>10} {:>10} {:>10} {:>11}",
                r.model_id,
                r.metric,
                cell(r.prompted),
                cell(r.delta_prompted),
                cell(r.unprompted),
                cell(r.delta_unprompted),
            )?;
        }
        Ok(())
    }
}
