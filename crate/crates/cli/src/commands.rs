use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use counterstyle_core::dpo::{
    kl_estimate, train_dpo, train_reference, train_sft_baseline, ResumePoint, TrainHistory,
    TrainKind, TrainingConfig,
};
use counterstyle_core::eval::{
    filler_perplexity, generate_all, instruction_ignoring_score, mean_std, EvalReport,
    MetricEntry, MetricValue,
};
use counterstyle_core::lm::{
    init_model, load_checkpoint, save_checkpoint, PolicyParams, Role, SamplerConfig,
};
use counterstyle_core::pairs::{
    generate_pairs, read_pairs, write_pairs, ExternalGenerator, Generator, LmGenerator,
    PairKind, Prompt, StyleRole, StyleSpec,
};
use counterstyle_core::world::{
    prompt_tokens, read_corpus_jsonl, style_target, synth_articles, synth_instruction_corpus,
    write_corpus_jsonl, Style, EOS,
};
use counterstyle_core::{client, eval};

use crate::config::{EvalSection, RunConfig};

/// Validation errors exit 1, anything that fails after validation exits 2.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn validation(msg: impl Display) -> CliError {
        CliError::Validation(msg.to_string())
    }

    fn runtime(msg: impl Display) -> CliError {
        CliError::Runtime(msg.to_string())
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    s.as_ref()
        .ok_or_else(|| CliError::Validation(format!("config has no `{name}` section")))
}

fn input_exists(path: &Path, what: &str) -> Result<(), CliError> {
    if fs::metadata(path).is_ok() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} not found: {}", path.display())))
    }
}

fn ckpt_exists(stem: &Path, what: &str) -> Result<(), CliError> {
    for ext in ["json", "bin"] {
        let p = stem.with_extension(ext);
        if fs::metadata(&p).is_err() {
            return Err(CliError::Validation(format!(
                "{what} checkpoint not found: {}",
                p.display()
            )));
        }
    }
    Ok(())
}

/// The "creatable" half of the path invariant: the parent directory must
/// exist or come into existence here.
fn creatable(path: &Path, what: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| {
                CliError::Validation(format!(
                    "{what} path {} is not creatable: {e}",
                    path.display()
                ))
            })?;
        }
    }
    Ok(())
}

/// Writes through a sibling temp file and renames, so a failed run never
/// leaves a partial artifact at the final path.
fn write_atomic(
    path: &Path,
    write: impl FnOnce(&Path) -> counterstyle_core::error::Result<()>,
) -> Result<(), CliError> {
    let tmp = sibling(path, "-tmp");
    write(&tmp).map_err(|e| CliError::runtime(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CliError::runtime(format!("renaming into {}: {e}", path.display())))
}

/// `<name><suffix>` next to `path`, extension preserved. Kept dot-free so
/// checkpoint stems survive `with_extension`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    match path.extension() {
        Some(_) => {
            let stem = path.file_stem().map(|n| n.to_string_lossy()).unwrap_or_default();
            let ext = path.extension().map(|n| n.to_string_lossy()).unwrap_or_default();
            path.with_file_name(format!("{stem}{suffix}.{ext}"))
        }
        None => path.with_file_name(format!("{name}{suffix}")),
    }
}

fn save_ckpt_atomic(params: &PolicyParams, stem: &Path) -> Result<(), CliError> {
    let tmp = sibling(stem, "-tmp");
    save_checkpoint(params, &tmp)
        .map_err(|e| CliError::runtime(format!("writing checkpoint {}: {e}", tmp.display())))?;
    for ext in ["json", "bin"] {
        fs::rename(tmp.with_extension(ext), stem.with_extension(ext))
            .map_err(|e| CliError::runtime(format!("renaming checkpoint: {e}")))?;
    }
    Ok(())
}

fn load_ckpt(stem: &Path, what: &str) -> Result<PolicyParams, CliError> {
    load_checkpoint(stem)
        .map_err(|e| CliError::runtime(format!("loading {what} {}: {e}", stem.display())))
}

fn parse_style(name: &str, what: &str) -> Result<Style, CliError> {
    Style::from_name(name).map_err(|e| CliError::Validation(format!("{what}: {e}")))
}

fn len_range(lo: usize, hi: usize) -> Result<(usize, usize), CliError> {
    if lo == 0 || lo > hi {
        return Err(CliError::Validation(format!("bad article length range {lo}..{hi}")));
    }
    Ok((lo, hi))
}

fn require_count(n: usize, what: &str) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Validation(format!("{what} must be at least 1")));
    }
    Ok(())
}

pub fn cmd_synth_corpus(cfg: &RunConfig) -> Result<(), CliError> {
    let c = section(&cfg.corpus, "corpus")?;
    let range = len_range(c.len_min, c.len_max)?;
    require_count(c.count, "corpus.count")?;
    c.mix.validate().map_err(CliError::validation)?;
    creatable(&c.out, "corpus output")?;

    let samples = synth_instruction_corpus(c.seed, c.count, range, c.mix)
        .map_err(|e| CliError::runtime(e))?;
    write_atomic(&c.out, |p| write_corpus_jsonl(p, &samples))?;
    println!("wrote {} samples to {}", samples.len(), c.out.display());
    Ok(())
}

pub fn cmd_pretrain_ref(cfg: &RunConfig) -> Result<(), CliError> {
    let s = section(&cfg.sft, "sft")?;
    cfg.model.validate().map_err(CliError::validation)?;
    input_exists(&s.corpus, "corpus")?;
    let train_cfg = TrainingConfig {
        kind: TrainKind::Sft,
        beta: 0.0,
        lr: s.lr,
        epochs: s.epochs,
        batch_size: s.batch_size,
        seed: s.seed,
        grad_clip: s.grad_clip,
    };
    train_cfg.validate().map_err(CliError::validation)?;
    let held_range = if s.heldout_count > 0 {
        Some(len_range(s.heldout_len_min, s.heldout_len_max)?)
    } else {
        None
    };
    let corpus = read_corpus_jsonl(&s.corpus)
        .map_err(|e| CliError::Validation(format!("corpus {}: {e}", s.corpus.display())))?;
    if corpus.is_empty() {
        return Err(CliError::validation("corpus is empty"));
    }
    creatable(&s.out, "checkpoint")?;
    creatable(&s.metrics_out, "metrics")?;

    let init = init_model(&cfg.model).map_err(|e| CliError::runtime(e))?;
    let held = held_range
        .map(|r| synth_articles(s.heldout_seed, s.heldout_count, r))
        .unwrap_or_default();
    let (reference, report) =
        train_reference(&init, &corpus, &train_cfg, &held).map_err(|e| CliError::runtime(e))?;
    save_ckpt_atomic(&reference, &s.out)?;
    let bytes = serde_json::to_vec_pretty(&report)
        .map_err(|e| CliError::runtime(e))
        .map(|mut b| {
            b.push(b'\n');
            b
        })?;
    write_atomic(&s.metrics_out, |p| Ok(fs::write(p, &bytes)?))?;
    println!(
        "reference ready: {} steps, final perplexity {:.4}",
        report.steps, report.final_perplexity
    );
    for (style, a) in &report.adherence {
        println!("adherence {style} {a:.3}");
    }
    println!("wrote checkpoint {} and metrics {}", s.out.display(), s.metrics_out.display());
    Ok(())
}

fn style_spec(
    name: &Option<String>,
    role: StyleRole,
    what: &str,
) -> Result<StyleSpec, CliError> {
    match name {
        None => Ok(StyleSpec::null()),
        Some(n) => {
            let style = parse_style(n, what)?;
            StyleSpec::token(style, role).map_err(CliError::validation)
        }
    }
}

pub fn cmd_gen_pairs(cfg: &RunConfig, threads: usize) -> Result<(), CliError> {
    let p = section(&cfg.pairs, "pairs")?;
    let kind = PairKind::from_name(&p.kind).map_err(CliError::validation)?;
    let range = len_range(p.len_min, p.len_max)?;
    require_count(p.count, "pairs.count")?;
    let desired = style_spec(&p.desired, StyleRole::Desired, "pairs.desired")?;
    let undesired = style_spec(&p.undesired, StyleRole::Undesired, "pairs.undesired")?;
    let needs = |spec: &StyleSpec, which: &str| {
        if spec.is_null() {
            Err(CliError::Validation(format!("missing {which} style for {} pairs", kind.name())))
        } else {
            Ok(())
        }
    };
    match kind {
        PairKind::Enc => needs(&desired, "desired")?,
        PairKind::Dis | PairKind::Negation => needs(&undesired, "undesired")?,
        PairKind::Contrastive => {
            needs(&desired, "desired")?;
            needs(&undesired, "undesired")?;
        }
    }
    let choice = &cfg.generator;
    if choice.local.is_none() && choice.external.is_none() {
        return Err(CliError::validation("no generator selected"));
    }
    if choice.local.is_some() {
        ckpt_exists(&p.reference, "reference")?;
    }
    creatable(&p.out, "pairs output")?;

    let articles = synth_articles(p.articles_seed, p.count, range);
    let prompts: Vec<Prompt> = articles
        .iter()
        .map(|a| Prompt::Tokens(prompt_tokens(a, Style::None)))
        .collect();
    let reference;
    let local;
    let external;
    let generator: &dyn Generator = if let Some(l) = &choice.local {
        reference = load_ckpt(&p.reference, "reference")?;
        local = LmGenerator {
            params: &reference,
            temperature: l.temperature,
            max_new_tokens: l.max_new_tokens,
            stop_token: EOS,
        };
        &local
    } else {
        let e = choice.external.as_ref().expect("checked above");
        external = ExternalGenerator {
            config: client::EndpointConfig {
                base_url: e.base_url.clone(),
                model: e.model.clone(),
                api_key_env: client::API_KEY_ENV.to_string(),
                timeout_secs: e.timeout_secs,
                max_retries: e.max_retries,
                backoff_ms: e.backoff_ms,
            },
            temperature: e.temperature,
            max_tokens: e.max_tokens,
        };
        &external
    };
    let (set, report) =
        generate_pairs(generator, &prompts, &desired, &undesired, kind, p.seed, p.count, threads)
            .map_err(|e| CliError::runtime(e))?;
    if let Some((item, msg)) = report.failures.first() {
        return Err(CliError::runtime(format!(
            "{} generator failures, first at item {item}: {msg}",
            report.failures.len()
        )));
    }
    write_atomic(&p.out, |path| write_pairs(path, &set))?;
    let dropped = report.degenerate.len();
    println!(
        "wrote {} pairs (kind {}, {dropped} degenerate dropped) to {}",
        set.pairs.len(),
        kind.name(),
        p.out.display()
    );
    Ok(())
}

fn snapshot_stem(out: &Path, epoch: usize) -> PathBuf {
    sibling(out, &format!("-epoch{epoch}"))
}

fn resume_sidecar(out: &Path, epoch: usize) -> PathBuf {
    snapshot_stem(out, epoch).with_extension("resume.json")
}

fn history_path(out: &Path) -> PathBuf {
    out.with_extension("history.jsonl")
}

pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let t = section(&cfg.train, "train")?;
    let kind = TrainKind::from_name(&t.kind).map_err(CliError::validation)?;
    let train_cfg = TrainingConfig {
        kind,
        beta: t.beta,
        lr: t.lr,
        epochs: t.epochs,
        batch_size: t.batch_size,
        seed: t.seed,
        grad_clip: t.grad_clip,
    };
    train_cfg.validate().map_err(CliError::validation)?;
    input_exists(&t.pairs, "pairs file")?;
    let pairs = read_pairs(&t.pairs)
        .map_err(|e| CliError::Validation(format!("pairs {}: {e}", t.pairs.display())))?;
    if let Some(pk) = kind.pair_kind() {
        if pairs.meta.kind != pk {
            return Err(CliError::Validation(format!(
                "pair kind mismatch: pairs file says {}, config says {}",
                pairs.meta.kind.name(),
                pk.name()
            )));
        }
    }
    ckpt_exists(&t.reference, "reference")?;
    if let Some(p) = &t.policy {
        ckpt_exists(p, "policy")?;
    }
    creatable(&t.out, "checkpoint")?;
    let resume_epoch = if resume {
        let found = (1..=t.epochs)
            .rev()
            .find(|&k| {
                ckpt_exists(&snapshot_stem(&t.out, k), "snapshot").is_ok()
                    && fs::metadata(resume_sidecar(&t.out, k)).is_ok()
            })
            .ok_or_else(|| {
                CliError::Validation(format!(
                    "--resume set but no epoch snapshot found beside {}",
                    t.out.display()
                ))
            })?;
        Some(found)
    } else {
        None
    };

    let reference = load_ckpt(&t.reference, "reference")?.with_role(Role::Reference);
    let start = match resume_epoch {
        Some(k) => load_ckpt(&snapshot_stem(&t.out, k), "snapshot")?.with_role(Role::Policy),
        None => match &t.policy {
            Some(p) => load_ckpt(p, "policy")?.with_role(Role::Policy),
            None => reference.with_role(Role::Policy),
        },
    };
    let resume_point: Option<ResumePoint> = match resume_epoch {
        Some(k) => {
            let path = resume_sidecar(&t.out, k);
            let f = fs::File::open(&path)
                .map_err(|e| CliError::runtime(format!("opening {}: {e}", path.display())))?;
            Some(
                serde_json::from_reader(f)
                    .map_err(|e| CliError::runtime(format!("parsing {}: {e}", path.display())))?,
            )
        }
        None => None,
    };
    let kl_prompts: Vec<Vec<u32>> = pairs
        .pairs
        .iter()
        .take(t.kl_prompts)
        .map(|p| p.perceived_prompt.tokens().map(<[u32]>::to_vec))
        .collect::<counterstyle_core::error::Result<_>>()
        .map_err(|e| CliError::runtime(e))?;

    let out = t.out.clone();
    let mut snapshot = |epoch: usize,
                        step: u64,
                        params: &PolicyParams,
                        adam: &counterstyle_core::adam::AdamState|
     -> counterstyle_core::error::Result<()> {
        let stem = snapshot_stem(&out, epoch);
        save_checkpoint(params, &stem)?;
        let point = ResumePoint { epoch, step, adam: adam.clone() };
        let mut bytes = serde_json::to_vec(&point)?;
        bytes.push(b'\n');
        fs::write(resume_sidecar(&out, epoch), bytes)?;
        Ok(())
    };
    let (model, history) = match kind {
        TrainKind::Sft => {
            train_sft_baseline(&start, &pairs, &train_cfg, resume_point, Some(&mut snapshot))
        }
        _ => train_dpo(
            &start,
            &reference,
            &pairs,
            &train_cfg,
            &kl_prompts,
            resume_point,
            Some(&mut snapshot),
        ),
    }
    .map_err(|e| CliError::runtime(e))?;

    // On resume, splice the new records onto the prefix of the previous
    // history so the file reads like one uninterrupted run.
    let merged = match resume_epoch {
        Some(k) => {
            let path = history_path(&t.out);
            let prior = TrainHistory::load(&path)
                .map_err(|e| CliError::runtime(format!("prior history {}: {e}", path.display())))?;
            let steps_per_epoch = pairs.pairs.len().div_ceil(train_cfg.batch_size) as u64;
            let point = k as u64 * steps_per_epoch;
            let mut records: Vec<_> =
                prior.records.into_iter().take_while(|r| record_step(r) <= point).collect();
            records.extend(history.records);
            TrainHistory { records }
        }
        None => history,
    };
    merged.validate().map_err(|e| CliError::runtime(e))?;
    save_ckpt_atomic(&model, &t.out)?;
    write_atomic(&history_path(&t.out), |p| merged.save(p))?;

    let steps: Vec<_> = merged.step_records().collect();
    if let Some((step, loss, margin, accuracy)) = steps.last() {
        println!(
            "trained {}: {step} steps, final loss {loss:.6}, margin {margin:.4}, accuracy {accuracy:.3}",
            kind.name()
        );
    }
    println!(
        "wrote checkpoint {} and history {}",
        t.out.display(),
        history_path(&t.out).display()
    );
    Ok(())
}

fn record_step(r: &counterstyle_core::dpo::HistoryRecord) -> u64 {
    match r {
        counterstyle_core::dpo::HistoryRecord::Step { step, .. } => *step,
        counterstyle_core::dpo::HistoryRecord::Kl { step, .. } => *step,
    }
}

struct Samplers {
    configs: Vec<SamplerConfig>,
    seeds: Vec<u64>,
}

fn samplers_for(e: &EvalSection) -> Result<Samplers, CliError> {
    match e.temperature {
        None => Ok(Samplers {
            configs: vec![SamplerConfig::greedy(e.max_new_tokens, EOS)],
            seeds: Vec::new(),
        }),
        Some(t) => {
            if !(t > 0.0) {
                return Err(CliError::Validation(format!("eval temperature {t} must be > 0")));
            }
            if e.seeds.is_empty() {
                return Err(CliError::validation("sampled eval needs at least one seed"));
            }
            Ok(Samplers {
                configs: e
                    .seeds
                    .iter()
                    .map(|&s| SamplerConfig::temperature(t, e.max_new_tokens, EOS, s))
                    .collect(),
                seeds: e.seeds.clone(),
            })
        }
    }
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<(), CliError> {
    let e = section(&cfg.eval, "eval")?;
    let style = parse_style(&e.style, "eval.style")?;
    let ignore = match &e.ignore_style {
        Some(n) => Some(parse_style(n, "eval.ignore_style")?),
        None => None,
    };
    let range = len_range(e.len_min, e.len_max)?;
    require_count(e.count, "eval.count")?;
    require_count(e.retention_count, "eval.retention_count")?;
    require_count(e.max_new_tokens, "eval.max_new_tokens")?;
    let samplers = samplers_for(e)?;
    ckpt_exists(&e.model, "eval model")?;
    if let Some(r) = &e.reference {
        ckpt_exists(r, "reference")?;
    }
    creatable(&e.out, "report output")?;

    let params = load_ckpt(&e.model, "eval model")?;
    let articles = synth_articles(e.articles_seed, e.count, range);
    let styled: Vec<Vec<u32>> = articles.iter().map(|a| prompt_tokens(a, style)).collect();
    let bare: Vec<Vec<u32>> = articles.iter().map(|a| prompt_tokens(a, Style::None)).collect();

    let pooled_counts = |prompts: &[Vec<u32>]| -> Result<MetricValue, CliError> {
        let mut counts = Vec::with_capacity(prompts.len() * samplers.configs.len());
        for sc in &samplers.configs {
            let responses =
                generate_all(&params, prompts, sc).map_err(|err| CliError::runtime(err))?;
            counts.extend(
                responses.iter().map(|r| counterstyle_core::world::entity_count(r) as f64),
            );
        }
        let (mean, std) = mean_std(&counts);
        Ok(MetricValue::new(mean, std, counts.len()))
    };
    let mut entries = vec![MetricEntry {
        metric: "entity_rate".into(),
        prompted: Some(pooled_counts(&styled)?),
        unprompted: Some(pooled_counts(&bare)?),
    }];

    let retention_arts = synth_articles(e.retention_seed, e.retention_count, range);
    let retention_items: Vec<(Vec<u32>, Vec<u32>)> = retention_arts
        .iter()
        .map(|a| (prompt_tokens(a, Style::None), style_target(a, Style::None, None)))
        .collect();
    let ppl = filler_perplexity(&params, &retention_items).map_err(|e2| CliError::runtime(e2))?;
    entries.push(MetricEntry {
        metric: "filler_ppl".into(),
        prompted: None,
        unprompted: Some(MetricValue::new(ppl, 0.0, retention_items.len())),
    });

    if let Some(ig) = ignore {
        let mut trained = Vec::new();
        let mut held = Vec::new();
        for sc in &samplers.configs {
            let score = instruction_ignoring_score(&params, &articles, ig, sc)
                .map_err(|err| CliError::runtime(err))?;
            trained.push(score.trained);
            if let Some(h) = score.held_out {
                held.push(h);
            }
        }
        let n = e.count * samplers.configs.len();
        let (m, s) = mean_std(&trained);
        entries.push(MetricEntry {
            metric: "instruction_ignoring".into(),
            prompted: Some(MetricValue::new(m, s, n)),
            unprompted: None,
        });
        if !held.is_empty() {
            let (m, s) = mean_std(&held);
            entries.push(MetricEntry {
                metric: "instruction_ignoring_heldout".into(),
                prompted: Some(MetricValue::new(m, s, n)),
                unprompted: None,
            });
        }
    }

    let kl = match &e.reference {
        Some(stem) => {
            let reference = load_ckpt(stem, "reference")?.with_role(Role::Reference);
            let n = bare.len().min(16);
            let sc = SamplerConfig::temperature(
                1.0,
                e.max_new_tokens,
                EOS,
                samplers.seeds.first().copied().unwrap_or(0),
            );
            let est = kl_estimate(&params, &reference, &bare[..n], &sc)
                .map_err(|err| CliError::runtime(err))?;
            Some(est.estimate)
        }
        None => None,
    };

    let model_id = match &e.model_id {
        Some(id) => id.clone(),
        None => e.model.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
    };
    let report = EvalReport {
        model_id: model_id.clone(),
        base_id: e.base_id.clone(),
        sft_id: e.sft_id.clone(),
        kl_to_reference: kl,
        eval_seeds: samplers.seeds.clone(),
        entries,
    };
    report.validate().map_err(|err| CliError::runtime(err))?;
    write_atomic(&e.out, |p| report.save(p))?;

    for entry in &report.entries {
        let cell = |v: &Option<MetricValue>| match v {
            Some(v) => format!("{:.3}", v.mean),
            None => "-".to_string(),
        };
        println!(
            "eval {model_id} {}: prompted {} unprompted {}",
            entry.metric,
            cell(&entry.prompted),
            cell(&entry.unprompted)
        );
    }
    println!("wrote report {}", e.out.display());
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<(), CliError> {
    let r = section(&cfg.report, "report")?;
    if r.inputs.is_empty() {
        return Err(CliError::validation("report.inputs is empty"));
    }
    for p in &r.inputs {
        input_exists(p, "eval report")?;
    }
    creatable(&r.out, "report output")?;

    let reports = r
        .inputs
        .iter()
        .map(|p| EvalReport::load(p))
        .collect::<counterstyle_core::error::Result<Vec<_>>>()
        .map_err(|e| CliError::runtime(e))?;
    let delta = eval::delta_report(&reports, &r.baseline).map_err(|e| CliError::runtime(e))?;
    let bytes = serde_json::to_vec_pretty(&delta)
        .map_err(|e| CliError::runtime(e))
        .map(|mut b| {
            b.push(b'\n');
            b
        })?;
    write_atomic(&r.out, |p| Ok(fs::write(p, &bytes)?))?;
    print!("{delta}");
    println!("wrote {}", r.out.display());
    Ok(())
}
