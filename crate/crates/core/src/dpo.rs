//! The DPO margin and loss, the SFT objective, both training loops, and
//! KL-to-reference monitoring.

use crate::adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::eval::{adherence_of, generate_all};
use crate::lm::{
    pair_logprobs_tape, perplexity, sequence_logprob, stage_params, PolicyParams, Role,
    SamplerConfig, TapeModel,
};
use crate::pairs::{derive_seed, PairKind, PairSet, PreferencePair};
use crate::tape::{Grads, Tape};
use crate::tensor::Tensor;
use crate::world::{Article, InstructionSample, Style, EOS};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainKind {
    Enc,
    Dis,
    Contrastive,
    Negation,
    Sft,
}

impl TrainKind {
    pub fn pair_kind(self) -> Option<PairKind> {
        match self {
            TrainKind::Enc => Some(PairKind::Enc),
            TrainKind::Dis => Some(PairKind::Dis),
            TrainKind::Contrastive => Some(PairKind::Contrastive),
            TrainKind::Negation => Some(PairKind::Negation),
            TrainKind::Sft => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainKind::Enc => "enc",
            TrainKind::Dis => "dis",
            TrainKind::Contrastive => "contrastive",
            TrainKind::Negation => "negation",
            TrainKind::Sft => "sft",
        }
    }

    pub fn from_name(s: &str) -> Result<TrainKind> {
        Ok(match s {
            "enc" => TrainKind::Enc,
            "dis" => TrainKind::Dis,
            "contrastive" => TrainKind::Contrastive,
            "negation" => TrainKind::Negation,
            "sft" => TrainKind::Sft,
            other => return Err(Error::Config(format!("unknown training kind `{other}`"))),
        })
    }
}

impl From<PairKind> for TrainKind {
    fn from(k: PairKind) -> Self {
        match k {
            PairKind::Enc => TrainKind::Enc,
            PairKind::Dis => TrainKind::Dis,
            PairKind::Contrastive => TrainKind::Contrastive,
            PairKind::Negation => TrainKind::Negation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub kind: TrainKind,
    /// The β of the margin. Ignored for SFT. β = 0 is allowed and makes a
    /// DPO run a diagnostic no-op: the loss is pinned at ln 2 with zero
    /// gradient everywhere.
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl TrainingConfig {
    pub fn dpo(kind: PairKind) -> Self {
        TrainingConfig {
            kind: kind.into(),
            beta: 0.1,
            lr: 1e-3,
            epochs: 2,
            batch_size: 32,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }

    pub fn sft() -> Self {
        TrainingConfig {
            kind: TrainKind::Sft,
            beta: 0.0,
            lr: 1e-3,
            epochs: 2,
            batch_size: 32,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }

    fn validate_common(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.kind != TrainKind::Sft && (!self.beta.is_finite() || self.beta < 0.0) {
            return Err(Error::Config(format!("beta {} must be finite and >= 0", self.beta)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("gradient clip {c} must be positive")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of a training log. `step` counts optimizer steps; KL records
/// carry the step of the boundary they were measured at, so the step
/// sequence is non-decreasing overall and strictly increasing across
/// optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum HistoryRecord {
    Step { step: u64, loss: f64, margin: f64, accuracy: f64 },
    Kl { step: u64, epoch: usize, estimate: f64, raw: f64, clamped: bool },
}

impl HistoryRecord {
    fn step(&self) -> u64 {
        match *self {
            HistoryRecord::Step { step, .. } | HistoryRecord::Kl { step, .. } => step,
        }
    }

    fn finite(&self) -> bool {
        match *self {
            HistoryRecord::Step { loss, margin, accuracy, .. } => {
                loss.is_finite() && margin.is_finite() && accuracy.is_finite()
            }
            HistoryRecord::Kl { estimate, raw, .. } => estimate.is_finite() && raw.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn validate(&self) -> Result<()> {
        let mut last_any = 0u64;
        let mut last_step: Option<u64> = None;
        for r in &self.records {
            if !r.finite() {
                return Err(Error::Config(format!("non-finite history record at step {}", r.step())));
            }
            if r.step() < last_any {
                return Err(Error::Config(format!(
                    "history steps must not decrease ({} after {last_any})",
                    r.step()
                )));
            }
            last_any = r.step();
            if let HistoryRecord::Step { step, .. } = r {
                if last_step.is_some_and(|p| *step <= p) {
                    return Err(Error::Config(format!("duplicate optimizer step {step}")));
                }
                last_step = Some(*step);
            }
        }
        Ok(())
    }

    pub fn step_records(&self) -> impl Iterator<Item = (u64, f64, f64, f64)> + '_ {
        self.records.iter().filter_map(|r| match *r {
            HistoryRecord::Step { step, loss, margin, accuracy } => {
                Some((step, loss, margin, accuracy))
            }
            _ => None,
        })
    }

    /// Mean recorded margin per epoch, given the steps-per-epoch layout.
    pub fn epoch_margin_means(&self, steps_per_epoch: usize) -> Vec<f64> {
        let margins: Vec<f64> = self.step_records().map(|(_, _, m, _)| m).collect();
        margins.chunks(steps_per_epoch.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TrainHistory> {
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: HistoryRecord = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
                path: path.display().to_string(),
                line: idx + 1,
                msg: e.to_string(),
            })?;
            records.push(r);
        }
        let history = TrainHistory { records };
        history.validate()?;
        Ok(history)
    }
}

/// M = β[logπ_θ(chosen|x) − logπ_ref(chosen|x)] − β[logπ_θ(rejected|x) −
/// logπ_ref(rejected|x)], differentiable in the policy only.
pub fn margin(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompt: &[u32],
    chosen: &[u32],
    rejected: &[u32],
    beta: f64,
) -> Result<f64> {
    let pw = sequence_logprob(policy, prompt, chosen)?;
    let pl = sequence_logprob(policy, prompt, rejected)?;
    let rw = sequence_logprob(reference, prompt, chosen)?;
    let rl = sequence_logprob(reference, prompt, rejected)?;
    Ok(beta * ((pw - rw) - (pl - rl)))
}

/// Loss value, per-pair margins, and policy gradients for one batch.
#[derive(Debug)]
pub struct DpoBatch {
    pub loss: f64,
    pub margins: Vec<f64>,
    pub grads: BTreeMap<String, Tensor>,
}

impl DpoBatch {
    pub fn accuracy(&self) -> f64 {
        self.margins.iter().filter(|m| **m > 0.0).count() as f64 / self.margins.len() as f64
    }

    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }
}

fn pair_sequences(batch: &[PreferencePair]) -> Result<(Vec<(Vec<u32>, Vec<u32>)>, Vec<(Vec<u32>, Vec<u32>)>)> {
    let mut chosen = Vec::with_capacity(batch.len());
    let mut rejected = Vec::with_capacity(batch.len());
    for p in batch {
        let prompt = p.perceived_prompt.tokens()?.to_vec();
        chosen.push((prompt.clone(), p.chosen.clone()));
        rejected.push((prompt, p.rejected.clone()));
    }
    Ok((chosen, rejected))
}

/// −E[log σ(M)] over the batch with gradients through the policy; the
/// reference enters only through the per-pair log-ratio constants.
pub fn dpo_loss(
    policy: &PolicyParams,
    reference: &PolicyParams,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<DpoBatch> {
    let ref_diffs = reference_diffs(reference, batch, 1)?;
    dpo_loss_with_ref(policy, batch, &ref_diffs, beta)
}

/// logπ_ref(chosen|x) − logπ_ref(rejected|x) for every pair, evaluated on
/// `threads` worker threads into indexed slots so the result is identical
/// however the work is scheduled.
pub fn reference_diffs(
    reference: &PolicyParams,
    pairs: &[PreferencePair],
    threads: usize,
) -> Result<Vec<f64>> {
    let threads = threads.max(1).min(pairs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<f64>>>> = (0..pairs.len()).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pairs.len() {
                    break;
                }
                let p = &pairs[i];
                let diff = p.perceived_prompt.tokens().map(<[u32]>::to_vec).and_then(|prompt| {
                    Ok(sequence_logprob(reference, &prompt, &p.chosen)?
                        - sequence_logprob(reference, &prompt, &p.rejected)?)
                });
                *slots[i].lock().unwrap() = Some(diff);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("slot visited")).collect()
}

pub fn dpo_loss_with_ref(
    policy: &PolicyParams,
    batch: &[PreferencePair],
    ref_diffs: &[f64],
    beta: f64,
) -> Result<DpoBatch> {
    if batch.is_empty() {
        return Err(Error::Config("dpo_loss over an empty batch".into()));
    }
    if batch.len() != ref_diffs.len() {
        return Err(Error::Config(format!(
            "{} pairs but {} reference ratios",
            batch.len(),
            ref_diffs.len()
        )));
    }
    let kind = batch[0].kind;
    if let Some(odd) = batch.iter().find(|p| p.kind != kind) {
        return Err(Error::KindMismatch { header: kind.name().into(), found: odd.kind.name().into() });
    }
    let (chosen, rejected) = pair_sequences(batch)?;
    let mut tape = Tape::new();
    let model = stage_params(&mut tape, policy);
    let lw = pair_logprobs_tape(&mut tape, &model, &policy.config, &chosen)?;
    let ll = pair_logprobs_tape(&mut tape, &model, &policy.config, &rejected)?;
    let policy_diff = tape.sub(lw, ll);
    let ref_leaf = tape.leaf(Tensor::from_vec(batch.len(), 1, ref_diffs.to_vec())?);
    let centered = tape.sub(policy_diff, ref_leaf);
    let m = tape.scale(centered, beta);
    let neg_m = tape.scale(m, -1.0);
    let per_pair = tape.softplus(neg_m);
    let loss = tape.mean(per_pair);

    let loss_val = tape.value(loss).item();
    let margins = tape.value(m).data().to_vec();
    if !loss_val.is_finite() {
        let bad = margins.iter().position(|x| !x.is_finite()).unwrap_or(0);
        return Err(Error::Config(format!(
            "non-finite DPO loss at pair `{}`",
            batch[bad].id
        )));
    }
    let grads = tape.backward(loss);
    Ok(DpoBatch { loss: loss_val, margins, grads: collect_grads(&grads, &model) })
}

/// Mean NLL per response token of the targets given their prompts.
pub fn sft_loss(policy: &PolicyParams, batch: &[(Vec<u32>, Vec<u32>)]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Config("sft_loss over an empty batch".into()));
    }
    let total_tokens: usize = batch.iter().map(|(_, t)| t.len()).sum();
    let mut tape = Tape::new();
    let model = stage_params(&mut tape, policy);
    let lp = pair_logprobs_tape(&mut tape, &model, &policy.config, batch)?;
    let total = tape.sum(lp);
    let loss = tape.scale(total, -1.0 / total_tokens as f64);
    let loss_val = tape.value(loss).item();
    if !loss_val.is_finite() {
        return Err(Error::Config("non-finite SFT loss".into()));
    }
    let grads = tape.backward(loss);
    Ok((loss_val, collect_grads(&grads, &model)))
}

fn collect_grads(grads: &Grads, model: &TapeModel) -> BTreeMap<String, Tensor> {
    model
        .vars
        .iter()
        .filter_map(|(name, &var)| grads.get(var).map(|t| (name.clone(), t.clone())))
        .collect()
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftReport {
    /// Perplexity of the model over the training corpus after the last epoch.
    pub final_perplexity: f64,
    /// Greedy-decoding adherence per style over the held-out articles;
    /// empty when no held-out articles were given.
    pub adherence: BTreeMap<String, f64>,
    pub steps: u64,
}

/// Supervised pretraining of the style-conditional reference model.
/// Zero epochs retags the parameters without touching them.
pub fn train_reference(
    params: &PolicyParams,
    corpus: &[InstructionSample],
    config: &TrainingConfig,
    held: &[Article],
) -> Result<(PolicyParams, SftReport)> {
    if config.kind != TrainKind::Sft {
        return Err(Error::Config(format!(
            "train_reference wants kind `sft`, got `{}`",
            config.kind.name()
        )));
    }
    config.validate_common()?;
    if corpus.is_empty() {
        return Err(Error::Config("empty instruction corpus".into()));
    }
    let mut model = params.with_role(Role::Reference);
    let items: Vec<(Vec<u32>, Vec<u32>)> =
        corpus.iter().map(|s| (s.prompt.clone(), s.target.clone())).collect();
    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut state = AdamState::default();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = permutation(items.len(), derive_seed(config.seed, epoch as u64, 0, 0));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Vec<u32>, Vec<u32>)> =
                chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, mut grads) = sft_loss(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Config(format!("SFT diverged at step {step}")));
            }
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut model.tensors, &grads, &mut state, &adam_cfg)?;
            step += 1;
        }
    }
    let final_perplexity = perplexity(&model, &items)?;
    let mut adherence = BTreeMap::new();
    if !held.is_empty() {
        let sampler = SamplerConfig::greedy(48, EOS);
        for style in [Style::None, Style::Redact, Style::Include, Style::X, Style::X2] {
            adherence.insert(style.name().to_string(), adherence_of(&model, held, style, &sampler)?);
        }
    }
    Ok((model, SftReport { final_perplexity, adherence, steps: step }))
}

/// Optimizer snapshot for resuming an interrupted run at an epoch boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResumePoint {
    pub epoch: usize,
    pub step: u64,
    pub adam: AdamState,
}

/// DPO fine-tuning of `policy` against a frozen `reference`.
///
/// `kl_prompts`, when nonempty, are sampled at the start and at every epoch
/// boundary for the KL monitor. `resume` continues an interrupted run from
/// its recorded epoch with the optimizer moments intact; the epochs before
/// it are skipped (their shuffles are derived per epoch, so the remaining
/// schedule is identical to an uninterrupted run).
pub fn train_dpo(
    policy: &PolicyParams,
    reference: &PolicyParams,
    pairs: &PairSet,
    config: &TrainingConfig,
    kl_prompts: &[Vec<u32>],
    resume: Option<ResumePoint>,
    snapshot: Option<&mut dyn FnMut(usize, u64, &PolicyParams, &AdamState) -> Result<()>>,
) -> Result<(PolicyParams, TrainHistory)> {
    config.validate()?;
    let kind = config
        .kind
        .pair_kind()
        .ok_or_else(|| Error::Config("train_dpo needs a DPO kind, not `sft`".into()))?;
    if pairs.meta.kind != kind {
        return Err(Error::KindMismatch {
            header: pairs.meta.kind.name().into(),
            found: kind.name().into(),
        });
    }
    if pairs.pairs.is_empty() {
        return Err(Error::Config("empty pair set".into()));
    }
    if policy.role != Role::Policy {
        return Err(Error::Config("policy params must carry the policy role".into()));
    }
    if reference.role != Role::Reference {
        return Err(Error::Config("reference params must carry the reference role".into()));
    }
    if !policy.config.same_shape(&reference.config) {
        return Err(Error::Config("policy and reference disagree on model shape".into()));
    }

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let ref_diffs = reference_diffs(reference, &pairs.pairs, threads)?;

    let mut model = policy.clone();
    let mut history = Vec::new();
    let kl_sampler = SamplerConfig::temperature(1.0, 48, EOS, derive_seed(config.seed, 0, 9, 0));
    let kl_at = |model: &PolicyParams, step: u64, epoch: usize, history: &mut Vec<HistoryRecord>| -> Result<()> {
        if kl_prompts.is_empty() {
            return Ok(());
        }
        let kl = kl_estimate(model, reference, kl_prompts, &kl_sampler)?;
        history.push(HistoryRecord::Kl {
            step,
            epoch,
            estimate: kl.estimate,
            raw: kl.raw,
            clamped: kl.clamped,
        });
        Ok(())
    };

    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let steps_per_epoch = pairs.pairs.len().div_ceil(config.batch_size) as u64;
    let (start_epoch, mut step, mut state) = match resume {
        Some(r) => {
            if r.epoch > config.epochs {
                return Err(Error::Config(format!(
                    "resume epoch {} is past the configured {} epochs",
                    r.epoch, config.epochs
                )));
            }
            if r.step != r.epoch as u64 * steps_per_epoch {
                return Err(Error::Config(format!(
                    "resume step {} does not sit on the epoch-{} boundary",
                    r.step, r.epoch
                )));
            }
            (r.epoch, r.step, r.adam)
        }
        None => (0, 0, AdamState::default()),
    };
    if start_epoch == 0 {
        kl_at(&model, 0, 0, &mut history)?;
    }
    let mut snapshot = snapshot;
    for epoch in start_epoch..config.epochs {
        let order = permutation(pairs.pairs.len(), derive_seed(config.seed, epoch as u64, 1, 0));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PreferencePair> =
                chunk.iter().map(|&i| pairs.pairs[i].clone()).collect();
            let rd: Vec<f64> = chunk.iter().map(|&i| ref_diffs[i]).collect();
            let out = dpo_loss_with_ref(&model, &batch, &rd, config.beta)?;
            let mut grads = out.grads;
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut model.tensors, &grads, &mut state, &adam_cfg)?;
            step += 1;
            history.push(HistoryRecord::Step {
                step,
                loss: out.loss,
                margin: out.margins.iter().sum::<f64>() / out.margins.len() as f64,
                accuracy: out.margins.iter().filter(|m| **m > 0.0).count() as f64
                    / out.margins.len() as f64,
            });
        }
        kl_at(&model, step, epoch + 1, &mut history)?;
        if let Some(ref mut snap) = snapshot {
            snap(epoch + 1, step, &model, &state)?;
        }
    }
    let history = TrainHistory { records: history };
    history.validate()?;
    Ok((model, history))
}

/// The same-budget SFT baseline: plain NLL training on each pair's
/// perceived prompt and chosen response, everything else (shuffles, batch
/// layout, clipping, optimizer) matching [`train_dpo`]. History step
/// records carry zero margin and accuracy, which only exist for pairwise
/// losses.
pub fn train_sft_baseline(
    policy: &PolicyParams,
    pairs: &PairSet,
    config: &TrainingConfig,
    resume: Option<ResumePoint>,
    snapshot: Option<&mut dyn FnMut(usize, u64, &PolicyParams, &AdamState) -> Result<()>>,
) -> Result<(PolicyParams, TrainHistory)> {
    if config.kind != TrainKind::Sft {
        return Err(Error::Config(format!(
            "train_sft_baseline wants kind `sft`, got `{}`",
            config.kind.name()
        )));
    }
    config.validate()?;
    if pairs.pairs.is_empty() {
        return Err(Error::Config("empty pair set".into()));
    }
    if policy.role != Role::Policy {
        return Err(Error::Config("policy params must carry the policy role".into()));
    }
    let items: Vec<(Vec<u32>, Vec<u32>)> = pairs
        .pairs
        .iter()
        .map(|p| Ok((p.perceived_prompt.tokens()?.to_vec(), p.chosen.clone())))
        .collect::<Result<_>>()?;
    let mut model = policy.clone();
    let mut history = Vec::new();
    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let steps_per_epoch = items.len().div_ceil(config.batch_size) as u64;
    let (start_epoch, mut step, mut state) = match resume {
        Some(r) => {
            if r.epoch > config.epochs || r.step != r.epoch as u64 * steps_per_epoch {
                return Err(Error::Config(format!(
                    "resume point (epoch {}, step {}) does not fit this run",
                    r.epoch, r.step
                )));
            }
            (r.epoch, r.step, r.adam)
        }
        None => (0, 0, AdamState::default()),
    };
    let mut snapshot = snapshot;
    for epoch in start_epoch..config.epochs {
        let order = permutation(items.len(), derive_seed(config.seed, epoch as u64, 2, 0));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Vec<u32>, Vec<u32>)> =
                chunk.iter().map(|&i| items[i].clone()).collect();
            let (loss, mut grads) = sft_loss(&model, &batch)?;
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam_step(&mut model.tensors, &grads, &mut state, &adam_cfg)?;
            step += 1;
            history.push(HistoryRecord::Step { step, loss, margin: 0.0, accuracy: 0.0 });
        }
        if let Some(ref mut snap) = snapshot {
            snap(epoch + 1, step, &model, &state)?;
        }
    }
    let history = TrainHistory { records: history };
    history.validate()?;
    Ok((model, history))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KlEstimate {
    /// Reported value, clamped at zero.
    pub estimate: f64,
    /// The raw Monte-Carlo mean, which noise can push negative.
    pub raw: f64,
    pub clamped: bool,
    pub samples: usize,
}

/// Monte-Carlo KL(π_policy ‖ π_reference): sample one response per prompt
/// from the policy and average the log-ratios.
pub fn kl_estimate(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompts: &[Vec<u32>],
    sampler: &SamplerConfig,
) -> Result<KlEstimate> {
    if prompts.is_empty() {
        return Err(Error::Config("kl_estimate needs at least one prompt".into()));
    }
    let responses = generate_all(policy, prompts, sampler)?;
    let mut total = 0.0;
    for (prompt, resp) in prompts.iter().zip(&responses) {
        if resp.is_empty() {
            continue; // an immediate stop token contributes a zero log-ratio
        }
        total += sequence_logprob(policy, prompt, resp)?
            - sequence_logprob(reference, prompt, resp)?;
    }
    let raw = total / prompts.len() as f64;
    Ok(KlEstimate { estimate: raw.max(0.0), raw, clamped: raw < 0.0, samples: prompts.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{init_model, ModelConfig};
    use crate::pairs::{Prompt, Provenance};
    use crate::world::{prompt_tokens, style_target, synth_articles, synth_instruction_corpus, StyleMix};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: crate::world::VOCAB_SIZE as usize,
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            ctx_len: 96,
            seed: 11,
        }
    }

    fn pair_from(article_seed: u64, id: usize) -> PreferencePair {
        let art = &synth_articles(article_seed, 1, (16, 16))[0];
        PreferencePair {
            id,
            kind: PairKind::Enc,
            perceived_prompt: Prompt::Tokens(prompt_tokens(art, Style::None)),
            chosen: style_target(art, Style::Redact, None),
            rejected: style_target(art, Style::None, None),
            provenance: Provenance {
                control_prompt: Prompt::Tokens(prompt_tokens(art, Style::None)),
                treatment_prompt: Prompt::Tokens(prompt_tokens(art, Style::Redact)),
                negative_prompt: None,
                generator: "test".into(),
                seed: 0,
            },
        }
    }

    fn some_pairs(n: usize) -> Vec<PreferencePair> {
        (0..n).map(|i| pair_from(40 + i as u64, i)).collect()
    }

    #[test]
    fn margin_is_zero_for_identical_models_and_linear_in_beta() {
        let params = init_model(&tiny_config()).unwrap();
        let reference = params.with_role(Role::Reference);
        let p = pair_from(1, 0);
        let prompt = p.perceived_prompt.tokens().unwrap();
        let m = margin(&params, &reference, prompt, &p.chosen, &p.rejected, 0.1).unwrap();
        assert_eq!(m, 0.0);

        let other = init_model(&ModelConfig { seed: 99, ..tiny_config() }).unwrap();
        let m1 = margin(&other, &reference, prompt, &p.chosen, &p.rejected, 0.1).unwrap();
        let m2 = margin(&other, &reference, prompt, &p.chosen, &p.rejected, 0.2).unwrap();
        assert!(m1.abs() > 0.0);
        assert!((m2 - 2.0 * m1).abs() < 1e-12);
    }

    #[test]
    fn identical_policy_and_reference_sit_at_ln2() {
        let params = init_model(&tiny_config()).unwrap();
        let reference = params.with_role(Role::Reference);
        let batch = some_pairs(4);
        let out = dpo_loss(&params, &reference, &batch, 0.1).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert!(out.margins.iter().all(|m| *m == 0.0));
        assert!(dpo_loss(&params, &reference, &[], 0.1).is_err());
    }

    #[test]
    fn beta_zero_kills_every_gradient() {
        let policy = init_model(&tiny_config()).unwrap();
        let reference = init_model(&ModelConfig { seed: 77, ..tiny_config() })
            .unwrap()
            .with_role(Role::Reference);
        let out = dpo_loss(&policy, &reference, &some_pairs(3), 0.0).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-12);
        let sq: f64 = out
            .grads
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum();
        assert!(sq.sqrt() < 1e-9, "gradient norm {} should vanish at beta=0", sq.sqrt());
    }

    #[test]
    fn swap_identity_holds() {
        let policy = init_model(&ModelConfig { seed: 5, ..tiny_config() }).unwrap();
        let reference = init_model(&ModelConfig { seed: 6, ..tiny_config() })
            .unwrap()
            .with_role(Role::Reference);
        for (i, p) in some_pairs(8).into_iter().enumerate() {
            let mut swapped = p.clone();
            std::mem::swap(&mut swapped.chosen, &mut swapped.rejected);
            let l = dpo_loss(&policy, &reference, &[p.clone()], 0.1).unwrap();
            let ls = dpo_loss(&policy, &reference, &[swapped], 0.1).unwrap();
            let m = l.margins[0];
            assert!(
                (ls.loss - (l.loss + m)).abs() < 1e-9,
                "pair {i}: swap loss {} vs loss {} + margin {m}",
                ls.loss,
                l.loss
            );
            // strict monotonicity of −log σ
            assert!((ls.margins[0] + m).abs() < 1e-12);
            if m > 0.0 {
                assert!(l.loss < ls.loss);
            }
        }
    }

    #[test]
    fn mixed_kind_batches_are_rejected() {
        let mut batch = some_pairs(2);
        batch[1].kind = PairKind::Dis;
        let policy = init_model(&tiny_config()).unwrap();
        let reference = policy.with_role(Role::Reference);
        match dpo_loss(&policy, &reference, &batch, 0.1) {
            Err(Error::KindMismatch { .. }) => {}
            other => panic!("expected kind mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sft_loss_on_uniform_logits_is_ln_vocab() {
        let config = tiny_config();
        let mut params = init_model(&config).unwrap();
        // zero every tensor: logits become identically zero, a uniform
        // distribution over the vocabulary
        for t in params.tensors.values_mut() {
            for x in t.data_mut() {
                *x = 0.0;
            }
        }
        let arts = synth_articles(9, 3, (16, 16));
        let batch: Vec<(Vec<u32>, Vec<u32>)> = arts
            .iter()
            .map(|a| (prompt_tokens(a, Style::None), style_target(a, Style::None, None)))
            .collect();
        let (loss, _) = sft_loss(&params, &batch).unwrap();
        assert!((loss - (config.vocab_size as f64).ln()).abs() < 1e-12);
        assert!(loss >= 0.0);
        assert!(sft_loss(&params, &[]).is_err());
    }

    #[test]
    fn train_reference_zero_epochs_retags_only() {
        let params = init_model(&tiny_config()).unwrap();
        let corpus = synth_instruction_corpus(3, 8, (16, 16), StyleMix::default()).unwrap();
        let config = TrainingConfig { epochs: 0, ..TrainingConfig::sft() };
        let (reference, report) = train_reference(&params, &corpus, &config, &[]).unwrap();
        assert_eq!(reference.role, Role::Reference);
        assert!(reference.bits_equal(&params));
        assert_eq!(report.steps, 0);
        assert!(report.adherence.is_empty());
    }

    #[test]
    fn train_reference_is_deterministic_and_learns() {
        let params = init_model(&tiny_config()).unwrap();
        let corpus = synth_instruction_corpus(4, 48, (16, 16), StyleMix::default()).unwrap();
        let config = TrainingConfig { epochs: 2, lr: 3e-3, ..TrainingConfig::sft() };
        let items: Vec<(Vec<u32>, Vec<u32>)> =
            corpus.iter().map(|s| (s.prompt.clone(), s.target.clone())).collect();
        let before = perplexity(&params, &items).unwrap();
        let (a, ra) = train_reference(&params, &corpus, &config, &[]).unwrap();
        let (b, rb) = train_reference(&params, &corpus, &config, &[]).unwrap();
        assert!(a.bits_equal(&b));
        assert_eq!(ra.final_perplexity, rb.final_perplexity);
        assert_eq!(ra.steps, 2 * 2); // 48 samples / 32 per batch = 2 steps, 2 epochs
        assert!(ra.final_perplexity < before, "{} should improve on {}", ra.final_perplexity, before);
        let wrong = TrainingConfig::dpo(PairKind::Enc);
        assert!(train_reference(&params, &corpus, &wrong, &[]).is_err());
    }

    fn tiny_pairset(n: usize) -> PairSet {
        let pairs = some_pairs(n);
        PairSet {
            meta: crate::pairs::PairSetMeta {
                kind: PairKind::Enc,
                styles: vec!["redact".into()],
                generator: "test".into(),
                seed: 0,
                count: pairs.len(),
            },
            pairs,
        }
    }

    #[test]
    fn train_dpo_guards_roles_and_kinds() {
        let policy = init_model(&tiny_config()).unwrap();
        let reference = policy.with_role(Role::Reference);
        let pairs = tiny_pairset(4);
        let mut config = TrainingConfig::dpo(PairKind::Dis);
        config.epochs = 1;
        match train_dpo(&policy, &reference, &pairs, &config, &[], None, None) {
            Err(Error::KindMismatch { .. }) => {}
            other => panic!("expected kind mismatch, got {other:?}"),
        }
        let config = TrainingConfig { epochs: 1, ..TrainingConfig::dpo(PairKind::Enc) };
        assert!(train_dpo(&reference, &reference, &pairs, &config, &[], None, None).is_err());
        assert!(train_dpo(&policy, &policy, &pairs, &config, &[], None, None).is_err());
    }

    #[test]
    fn beta_zero_training_is_a_no_op() {
        let policy = init_model(&tiny_config()).unwrap();
        let reference = policy.with_role(Role::Reference);
        let pairs = tiny_pairset(6);
        let config =
            TrainingConfig { beta: 0.0, epochs: 1, ..TrainingConfig::dpo(PairKind::Enc) };
        let (after, history) =
            train_dpo(&policy, &reference, &pairs, &config, &[], None, None).unwrap();
        assert!(after.bits_equal(&policy));
        for (_, loss, margin, _) in history.step_records() {
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
            assert_eq!(margin, 0.0);
        }
    }

    #[test]
    fn train_dpo_reruns_bit_identically_and_reference_stays_frozen() {
        let policy = init_model(&tiny_config()).unwrap();
        let reference = init_model(&ModelConfig { seed: 31, ..tiny_config() })
            .unwrap()
            .with_role(Role::Reference);
        let ref_bytes = reference.clone();
        let pairs = tiny_pairset(6);
        let config = TrainingConfig { epochs: 2, lr: 1e-4, ..TrainingConfig::dpo(PairKind::Enc) };
        let (a, ha) = train_dpo(&policy, &reference, &pairs, &config, &[], None, None).unwrap();
        let (b, hb) = train_dpo(&policy, &reference, &pairs, &config, &[], None, None).unwrap();
        assert!(a.bits_equal(&b));
        assert_eq!(ha, hb);
        assert!(reference.bits_equal(&ref_bytes));
        assert!(!a.bits_equal(&policy), "training should move the policy");
    }

    #[test]
    fn resume_from_epoch_boundary_matches_uninterrupted_run() {
        let policy = init_model(&tiny_config()).unwrap();
        let reference = init_model(&ModelConfig { seed: 32, ..tiny_config() })
            .unwrap()
            .with_role(Role::Reference);
        let pairs = tiny_pairset(6);
        let config = TrainingConfig { epochs: 2, lr: 1e-4, ..TrainingConfig::dpo(PairKind::Enc) };
        let (full, _) = train_dpo(&policy, &reference, &pairs, &config, &[], None, None).unwrap();

        let mut snaps: Vec<(usize, u64, PolicyParams, AdamState)> = Vec::new();
        let mut grab = |epoch: usize, step: u64, p: &PolicyParams, s: &AdamState| {
            snaps.push((epoch, step, p.clone(), s.clone()));
            Ok(())
        };
        let one = TrainingConfig { epochs: 2, ..config };
        let _ = train_dpo(&policy, &reference, &pairs, &one, &[], None, Some(&mut grab)).unwrap();
        let (epoch, step, mid, adam) = snaps[0].clone();
        assert_eq!(epoch, 1);
        let resume = ResumePoint { epoch, step, adam };
        let (resumed, _) =
            train_dpo(&mid, &reference, &pairs, &config, &[], Some(resume), None).unwrap();
        assert!(resumed.bits_equal(&full));
    }

    #[test]
    fn sft_baseline_fits_chosen_responses_and_resumes_cleanly() {
        let policy = init_model(&tiny_config()).unwrap();
        let pairs = tiny_pairset(6);
        let config = TrainingConfig {
            epochs: 3,
            lr: 1e-3,
            batch_size: 3,
            ..TrainingConfig::sft()
        };
        assert!(train_sft_baseline(
            &policy,
            &pairs,
            &TrainingConfig::dpo(PairKind::Enc),
            None,
            None
        )
        .is_err());

        let (a, history) = train_sft_baseline(&policy, &pairs, &config, None, None).unwrap();
        let (b, _) = train_sft_baseline(&policy, &pairs, &config, None, None).unwrap();
        assert!(a.bits_equal(&b));
        let losses: Vec<f64> = history.step_records().map(|(_, l, _, _)| l).collect();
        assert_eq!(losses.len(), 6);
        assert!(losses.last().unwrap() < losses.first().unwrap());
        assert!(history.step_records().all(|(_, _, m, acc)| m == 0.0 && acc == 0.0));

        let mut snaps: Vec<(usize, u64, PolicyParams, AdamState)> = Vec::new();
        let mut grab = |epoch: usize, step: u64, p: &PolicyParams, s: &AdamState| {
            snaps.push((epoch, step, p.clone(), s.clone()));
            Ok(())
        };
        let _ = train_sft_baseline(&policy, &pairs, &config, None, Some(&mut grab)).unwrap();
        let (epoch, step, mid, adam) = snaps[1].clone();
        assert_eq!(epoch, 2);
        let resume = ResumePoint { epoch, step, adam };
        let (resumed, _) =
            train_sft_baseline(&mid, &pairs, &config, Some(resume), None).unwrap();
        assert!(resumed.bits_equal(&a));
    }

    #[test]
    fn margins_grow_and_accuracy_improves_on_a_learnable_set() {
        let policy = init_model(&tiny_config()).unwrap();
        let reference = policy.with_role(Role::Reference);
        let pairs = tiny_pairset(8);
        let config = TrainingConfig {
            epochs: 3,
            lr: 3e-3,
            batch_size: 4,
            ..TrainingConfig::dpo(PairKind::Enc)
        };
        let (_, history) = train_dpo(&policy, &reference, &pairs, &config, &[], None, None).unwrap();
        let per_epoch = history.epoch_margin_means(2);
        assert_eq!(per_epoch.len(), 3);
        assert!(
            per_epoch.windows(2).all(|w| w[1] >= w[0]),
            "epoch margin means should not decrease: {per_epoch:?}"
        );
        let steps: Vec<(u64, f64, f64, f64)> = history.step_records().collect();
        assert!(steps.last().unwrap().3 > steps.first().unwrap().3);
    }

    #[test]
    fn kl_estimate_is_zero_for_identical_models() {
        let params = init_model(&tiny_config()).unwrap();
        let reference = params.with_role(Role::Reference);
        let arts = synth_articles(12, 4, (16, 16));
        let prompts: Vec<Vec<u32>> =
            arts.iter().map(|a| prompt_tokens(a, Style::None)).collect();
        let sampler = SamplerConfig::temperature(1.0, 16, EOS, 3);
        let kl = kl_estimate(&params, &reference, &prompts, &sampler).unwrap();
        assert_eq!(kl.raw, 0.0);
        assert_eq!(kl.estimate, 0.0);
        assert!(!kl.clamped);
        assert!(kl_estimate(&params, &reference, &[], &sampler).is_err());
    }

    #[test]
    fn kl_estimate_variance_shrinks_with_more_samples() {
        let policy = init_model(&ModelConfig { seed: 51, ..tiny_config() }).unwrap();
        let reference = init_model(&ModelConfig { seed: 52, ..tiny_config() })
            .unwrap()
            .with_role(Role::Reference);
        let arts = synth_articles(13, 16, (16, 16));
        let prompts: Vec<Vec<u32>> =
            arts.iter().map(|a| prompt_tokens(a, Style::None)).collect();
        let spread = |n: usize| {
            let estimates: Vec<f64> = (0..10)
                .map(|s| {
                    let sampler = SamplerConfig::temperature(1.0, 12, EOS, 100 + s);
                    kl_estimate(&policy, &reference, &prompts[..n], &sampler).unwrap().raw
                })
                .collect();
            let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
            estimates.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / estimates.len() as f64
        };
        assert!(spread(16) < spread(4));
    }

    #[test]
    fn history_round_trips_and_validates_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.jsonl");
        let history = TrainHistory {
            records: vec![
                HistoryRecord::Kl { step: 0, epoch: 0, estimate: 0.0, raw: -0.01, clamped: true },
                HistoryRecord::Step { step: 1, loss: 0.69, margin: 0.0, accuracy: 0.5 },
                HistoryRecord::Step { step: 2, loss: 0.68, margin: 0.01, accuracy: 0.6 },
                HistoryRecord::Kl { step: 2, epoch: 1, estimate: 0.02, raw: 0.02, clamped: false },
            ],
        };
        history.save(&path).unwrap();
        assert_eq!(TrainHistory::load(&path).unwrap(), history);

        let disordered = TrainHistory {
            records: vec![
                HistoryRecord::Step { step: 2, loss: 0.7, margin: 0.0, accuracy: 0.5 },
                HistoryRecord::Step { step: 1, loss: 0.7, margin: 0.0, accuracy: 0.5 },
            ],
        };
        assert!(disordered.validate().is_err());
        let nan = TrainHistory {
            records: vec![HistoryRecord::Step { step: 1, loss: f64::NAN, margin: 0.0, accuracy: 0.5 }],
        };
        assert!(nan.validate().is_err());
        std::fs::write(&path, "{\"record\":\"step\",oops}\n").unwrap();
        match TrainHistory::load(&path) {
            Err(Error::Jsonl { line: 1, .. }) => {}
            other => panic!("expected jsonl error, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let mut c = TrainingConfig::dpo(PairKind::Enc);
        assert!(c.validate().is_ok());
        c.beta = -0.1;
        assert!(c.validate().is_err());
        c.beta = f64::NAN;
        assert!(c.validate().is_err());
        c = TrainingConfig::dpo(PairKind::Enc);
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c = TrainingConfig::dpo(PairKind::Enc);
        c.epochs = 0;
        assert!(c.validate().is_err());
        c = TrainingConfig::dpo(PairKind::Enc);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = TrainingConfig::dpo(PairKind::Enc);
        c.grad_clip = Some(0.0);
        assert!(c.validate().is_err());
        // beta is ignored for SFT
        let mut s = TrainingConfig::sft();
        s.beta = -1.0;
        assert!(s.validate().is_ok());
    }
}
