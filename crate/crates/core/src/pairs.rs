//! Counterfactual preference-pair construction.
//!
//! A base instruction is styled into treatment (and, for contrastive
//! pairs, negative) variants, each variant is answered by a generator, and
//! the responses are assembled into a preference pair whose perceived
//! prompt may differ from the prompt that actually produced the response.
//! That mismatch is the whole trick: the four kinds differ only in which
//! prompt the margin conditions on and which response is preferred.
//!
//! * `enc`: perceived x_c, chosen y_t, rejected y_c, making the style the
//!   default.
//! * `dis`: perceived x_c, chosen y_c, rejected y_t, pushing the style away.
//! * `contrastive`: perceived x_c, chosen y_+, rejected y_-. Conditioning
//!   on the control prompt makes this the composition of enc and dis.
//! * `negation`: perceived x_t, chosen y_c, rejected y_t. Given the styled
//!   prompt, prefer the response that ignores it.

use crate::error::{Error, Result};
use crate::lm::{self, PolicyParams, SamplerConfig};
use crate::world;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prompt {
    Tokens(Vec<u32>),
    Text(String),
}

impl Prompt {
    pub fn tokens(&self) -> Result<&[u32]> {
        match self {
            Prompt::Tokens(t) => Ok(t),
            Prompt::Text(_) => Err(Error::Config("expected a token prompt, got text".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleRole {
    Desired,
    Undesired,
    Null,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fragment {
    Empty,
    Text(String),
    Token(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub name: String,
    pub role: StyleRole,
    pub fragment: Fragment,
}

impl StyleSpec {
    pub fn null() -> Self {
        StyleSpec { name: "null".into(), role: StyleRole::Null, fragment: Fragment::Empty }
    }

    pub fn token(style: world::Style, role: StyleRole) -> Result<Self> {
        let tok = style
            .token()
            .ok_or_else(|| Error::Config("the plain style has no style token".into()))?;
        Ok(StyleSpec { name: style.name().into(), role, fragment: Fragment::Token(tok) })
    }

    pub fn text(name: impl Into<String>, role: StyleRole, fragment: impl Into<String>) -> Self {
        StyleSpec { name: name.into(), role, fragment: Fragment::Text(fragment.into()) }
    }

    pub fn is_null(&self) -> bool {
        self.role == StyleRole::Null
    }

    pub fn validate(&self) -> Result<()> {
        match (self.role, &self.fragment) {
            (StyleRole::Null, Fragment::Empty) => Ok(()),
            (StyleRole::Null, _) => {
                Err(Error::Config("null style must have an empty fragment".into()))
            }
            (_, Fragment::Empty) => {
                Err(Error::Config(format!("style `{}` needs a fragment", self.name)))
            }
            _ => Ok(()),
        }
    }
}

/// Applies a style to a base prompt. Text prompts follow the summarization
/// template: `"{base}, {fragment} {{article}}"`. Token prompts get the
/// style token inserted right after the instruction token. A null style
/// returns the base prompt unchanged.
pub fn style_prompt(base: &Prompt, style: &StyleSpec) -> Result<Prompt> {
    style.validate()?;
    match (&style.fragment, base) {
        (Fragment::Empty, _) => Ok(base.clone()),
        (Fragment::Text(frag), Prompt::Text(b)) => Ok(Prompt::Text(format!("{b}, {frag} {{article}}"))),
        (Fragment::Token(tok), Prompt::Tokens(b)) => {
            let at = b
                .iter()
                .position(|&t| t == world::INSTR)
                .map(|i| i + 1)
                .unwrap_or(0);
            let mut out = b.clone();
            out.insert(at, *tok);
            Ok(Prompt::Tokens(out))
        }
        (Fragment::Text(_), Prompt::Tokens(_)) => {
            Err(Error::Config("text style fragment applied to a token prompt".into()))
        }
        (Fragment::Token(_), Prompt::Text(_)) => {
            Err(Error::Config("token style fragment applied to a text prompt".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Enc,
    Dis,
    Contrastive,
    Negation,
}

impl PairKind {
    pub fn name(self) -> &'static str {
        match self {
            PairKind::Enc => "enc",
            PairKind::Dis => "dis",
            PairKind::Contrastive => "contrastive",
            PairKind::Negation => "negation",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "enc" => PairKind::Enc,
            "dis" => PairKind::Dis,
            "contrastive" => PairKind::Contrastive,
            "negation" => PairKind::Negation,
            other => return Err(Error::Config(format!("unknown pair kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub control_prompt: Prompt,
    pub treatment_prompt: Prompt,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub negative_prompt: Option<Prompt>,
    pub generator: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub id: usize,
    pub kind: PairKind,
    pub perceived_prompt: Prompt,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSetMeta {
    pub kind: PairKind,
    pub styles: Vec<String>,
    pub generator: String,
    pub seed: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub meta: PairSetMeta,
    pub pairs: Vec<PreferencePair>,
}

pub struct PairInputs<'a> {
    pub x_c: &'a Prompt,
    pub x_t: &'a Prompt,
    pub x_neg: Option<&'a Prompt>,
    pub y_c: Option<&'a [u32]>,
    pub y_t: &'a [u32],
    pub y_neg: Option<&'a [u32]>,
}

/// The four perceived/chosen/rejected mappings. Identical chosen and
/// rejected responses return [`Error::DegeneratePair`] so the caller can
/// resample.
pub fn assemble_pair(
    kind: PairKind,
    id: usize,
    inputs: &PairInputs,
    generator: &str,
    seed: u64,
) -> Result<PreferencePair> {
    let need_yc = || {
        inputs
            .y_c
            .ok_or_else(|| Error::Config(format!("{} pairs need a control response", kind.name())))
    };
    let (perceived, chosen, rejected, negative) = match kind {
        PairKind::Enc => (inputs.x_c, inputs.y_t, need_yc()?, None),
        PairKind::Dis => (inputs.x_c, need_yc()?, inputs.y_t, None),
        PairKind::Contrastive => {
            let y_neg = inputs.y_neg.ok_or_else(|| {
                Error::Config("contrastive pairs need a negative response".into())
            })?;
            let x_neg = inputs.x_neg.ok_or_else(|| {
                Error::Config("contrastive pairs need a negative prompt".into())
            })?;
            (inputs.x_c, inputs.y_t, y_neg, Some(x_neg))
        }
        PairKind::Negation => (inputs.x_t, need_yc()?, inputs.y_t, None),
    };
    if chosen == rejected {
        return Err(Error::DegeneratePair(id));
    }
    Ok(PreferencePair {
        id,
        kind,
        perceived_prompt: perceived.clone(),
        chosen: chosen.to_vec(),
        rejected: rejected.to_vec(),
        provenance: Provenance {
            control_prompt: inputs.x_c.clone(),
            treatment_prompt: inputs.x_t.clone(),
            negative_prompt: negative.cloned(),
            generator: generator.to_string(),
            seed,
        },
    })
}

/// Answers one styled prompt. Implementations must be deterministic per
/// (prompt, seed) unless [`Generator::deterministic`] says otherwise.
pub trait Generator: Sync {
    fn id(&self) -> String;
    fn deterministic(&self) -> bool;
    fn respond(&self, prompt: &Prompt, seed: u64) -> Result<Vec<u32>>;
}

/// Samples responses from a toy LM at a fixed temperature. The stop token
/// is appended to the returned response so preference training sees the
/// termination decision.
pub struct LmGenerator<'a> {
    pub params: &'a PolicyParams,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_token: u32,
}

impl LmGenerator<'_> {
    pub fn new(params: &PolicyParams, temperature: f64) -> LmGenerator<'_> {
        LmGenerator { params, temperature, max_new_tokens: 48, stop_token: world::EOS }
    }
}

impl Generator for LmGenerator<'_> {
    fn id(&self) -> String {
        format!("toy-lm(seed {}, t {})", self.params.config.seed, self.temperature)
    }

    fn deterministic(&self) -> bool {
        true
    }

    fn respond(&self, prompt: &Prompt, seed: u64) -> Result<Vec<u32>> {
        let sampler =
            SamplerConfig::temperature(self.temperature, self.max_new_tokens, self.stop_token, seed);
        let mut out = lm::generate(self.params, prompt.tokens()?, &sampler)?;
        out.push(self.stop_token);
        Ok(out)
    }
}

/// Adapts an OpenAI-compatible endpoint to the generator interface.
/// Replies are parsed back into the token vocabulary, so the endpoint must
/// answer in space-separated token strings (the mock fixtures do).
pub struct ExternalGenerator {
    pub config: crate::client::EndpointConfig,
    pub temperature: f64,
    pub max_tokens: usize,
}

impl Generator for ExternalGenerator {
    fn id(&self) -> String {
        format!("external({}, {})", self.config.base_url, self.config.model)
    }

    fn deterministic(&self) -> bool {
        false
    }

    fn respond(&self, prompt: &Prompt, _seed: u64) -> Result<Vec<u32>> {
        let text = match prompt {
            Prompt::Text(t) => t.clone(),
            Prompt::Tokens(t) => world::decode(t)?,
        };
        let reply =
            crate::client::external_generate(&self.config, &text, self.temperature, self.max_tokens)?;
        let mut toks = world::encode(&reply.text)?;
        if toks.last() != Some(&world::EOS) {
            toks.push(world::EOS);
        }
        Ok(toks)
    }
}

/// splitmix64 over (dataset seed, item, variant, retry): stable per-item
/// seeds, so parallel generation reproduces serial output exactly.
pub fn derive_seed(seed: u64, item: u64, variant: u64, retry: u64) -> u64 {
    let mut z = seed
        .wrapping_add(item.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(variant.wrapping_mul(0xBF58476D1CE4E5B9))
        .wrapping_add(retry.wrapping_mul(0x94D049BB133111EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PairGenReport {
    /// (item index, error) for generator failures.
    pub failures: Vec<(usize, String)>,
    /// Items dropped because chosen == rejected after all retries.
    pub degenerate: Vec<usize>,
}

const DEGENERATE_RETRIES: u64 = 3;

fn styles_for(
    kind: PairKind,
    desired: &StyleSpec,
    undesired: &StyleSpec,
) -> Result<(Option<StyleSpec>, Option<StyleSpec>)> {
    desired.validate()?;
    undesired.validate()?;
    if !desired.is_null() && desired.role != StyleRole::Desired {
        return Err(Error::Config(format!("style `{}` is not tagged desired", desired.name)));
    }
    if !undesired.is_null() && undesired.role != StyleRole::Undesired {
        return Err(Error::Config(format!("style `{}` is not tagged undesired", undesired.name)));
    }
    let want = |style: &StyleSpec, which: &str| -> Result<StyleSpec> {
        if style.is_null() {
            Err(Error::Config(format!("missing {which} style for {} pairs", kind.name())))
        } else {
            Ok(style.clone())
        }
    };
    match kind {
        PairKind::Enc => Ok((Some(want(desired, "desired")?), None)),
        PairKind::Dis | PairKind::Negation => Ok((None, Some(want(undesired, "undesired")?))),
        PairKind::Contrastive => Ok((
            Some(want(desired, "desired")?),
            Some(want(undesired, "undesired")?),
        )),
    }
}

/// Builds `count` pairs from the first `count` base prompts. Each needed
/// prompt variant is answered once per attempt; degenerate pairs are
/// resampled with a bumped retry seed up to three times and then dropped.
/// Generator failures leave a gap and are listed in the report.
pub fn generate_pairs(
    generator: &dyn Generator,
    base_prompts: &[Prompt],
    desired: &StyleSpec,
    undesired: &StyleSpec,
    kind: PairKind,
    seed: u64,
    count: usize,
    threads: usize,
) -> Result<(PairSet, PairGenReport)> {
    if count > base_prompts.len() {
        return Err(Error::Config(format!(
            "requested {count} pairs from {} base prompts",
            base_prompts.len()
        )));
    }
    let (des, und) = styles_for(kind, desired, undesired)?;
    let mut styles = Vec::new();
    if let Some(s) = &des {
        styles.push(s.name.clone());
    }
    if let Some(s) = &und {
        styles.push(s.name.clone());
    }

    // for enc/dis/negation the treatment carries whichever style the kind
    // uses; contrastive styles the treatment as desired, negative as
    // undesired
    let treatment_style = match kind {
        PairKind::Enc | PairKind::Contrastive => des.clone().unwrap(),
        PairKind::Dis | PairKind::Negation => und.clone().unwrap(),
    };

    let build_item = |i: usize| -> Result<Option<PreferencePair>> {
        let x_c = &base_prompts[i];
        let x_t = style_prompt(x_c, &treatment_style)?;
        let x_neg = match (kind, &und) {
            (PairKind::Contrastive, Some(u)) => Some(style_prompt(x_c, u)?),
            _ => None,
        };
        for retry in 0..=DEGENERATE_RETRIES {
            let sd = |variant: u64| derive_seed(seed, i as u64, variant, retry);
            let (y_c, y_t, y_neg) = match kind {
                PairKind::Contrastive => {
                    let y_t = generator.respond(&x_t, sd(1))?;
                    let y_n = generator.respond(x_neg.as_ref().unwrap(), sd(2))?;
                    (None, y_t, Some(y_n))
                }
                _ => {
                    let y_c = generator.respond(x_c, sd(0))?;
                    let y_t = generator.respond(&x_t, sd(1))?;
                    (Some(y_c), y_t, None)
                }
            };
            let inputs = PairInputs {
                x_c,
                x_t: &x_t,
                x_neg: x_neg.as_ref(),
                y_c: y_c.as_deref(),
                y_t: &y_t,
                y_neg: y_neg.as_deref(),
            };
            match assemble_pair(kind, i, &inputs, &generator.id(), seed) {
                Ok(pair) => return Ok(Some(pair)),
                Err(Error::DegeneratePair(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Ok(None)
    };

    let workers = threads.max(1).min(count.max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<Option<PreferencePair>>>>> =
        (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= count {
                    break;
                }
                let outcome = build_item(i);
                *slots[i].lock().unwrap() = Some(outcome);
            });
        }
    });

    let mut pairs = Vec::new();
    let mut report = PairGenReport::default();
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.into_inner().unwrap().expect("worker filled every slot") {
            Ok(Some(pair)) => pairs.push(pair),
            Ok(None) => report.degenerate.push(i),
            Err(e) => report.failures.push((i, e.to_string())),
        }
    }
    let meta = PairSetMeta {
        kind,
        styles,
        generator: generator.id(),
        seed,
        count: pairs.len(),
    };
    Ok((PairSet { meta, pairs }, report))
}

/// Header line with the metadata, then one pair per line, keys in struct
/// order.
pub fn write_pairs(path: &std::path::Path, set: &PairSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut f, &set.meta)?;
    f.write_all(b"\n")?;
    for p in &set.pairs {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_pairs(path: &std::path::Path) -> Result<PairSet> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = f.lines();
    let jerr = |line: usize, msg: String| Error::Jsonl {
        path: path.display().to_string(),
        line,
        msg,
    };
    let header = lines
        .next()
        .ok_or_else(|| jerr(1, "empty file, missing header".into()))??;
    let meta: PairSetMeta =
        serde_json::from_str(&header).map_err(|e| jerr(1, format!("bad header: {e}")))?;
    let mut pairs = Vec::with_capacity(meta.count);
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair =
            serde_json::from_str(&line).map_err(|e| jerr(idx + 2, e.to_string()))?;
        if pair.kind != meta.kind {
            return Err(Error::KindMismatch {
                header: meta.kind.name().into(),
                found: pair.kind.name().into(),
            });
        }
        if pair.chosen == pair.rejected {
            return Err(Error::DegeneratePair(pair.id));
        }
        pairs.push(pair);
    }
    if pairs.len() != meta.count {
        return Err(jerr(1, format!("header count {} but {} pairs", meta.count, pairs.len())));
    }
    Ok(PairSet { meta, pairs })
}
