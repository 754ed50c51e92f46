//! Deterministic synthetic micro-world.
//!
//! A fixed 96-token vocabulary, an article generator, and an instruction
//! corpus whose targets honor their style by construction. Articles are
//! filler text with a handful of entity mentions; the four task styles are:
//!
//! * `none`: reproduce the article (a degenerate "summary"),
//! * `redact`: reproduce it with every entity mention replaced by REDACTED,
//! * `include`: reproduce it twice, amplifying entity occurrences,
//! * `x`: prepend the fixed three-token marker XM_0 XM_1 XM_2 to the
//!   no-style response (a content-free style whose only observable is the
//!   marker). STYLE_X2 is a paraphrase of the same instruction: trained to
//!   the same behavior, but never used when synthesizing negation pairs, so
//!   it can act as the held-out phrasing in evaluations.
//!
//! Every response starts with the RESP marker (the response-template
//! analog of a chat header) and ends with EOS. Filler positions in targets
//! are jittered: with probability [`JITTER_Q`] a filler is resampled from
//! the filler vocabulary. Entities, markers, and structure stay exact, so
//! the style invariants hold verbatim while the fitted conditionals keep
//! bounded confidence at filler positions, the way real summaries vary in
//! wording but not in facts. Without the jitter a converged model is so
//! sharp that preference training can only move it in pathological
//! directions.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub const BOS: u32 = 0;
pub const EOS: u32 = 1;
pub const SEP: u32 = 2;
pub const REDACTED: u32 = 3;
pub const INSTR: u32 = 4;
pub const STYLE_REDACT: u32 = 5;
pub const STYLE_INCLUDE: u32 = 6;
pub const STYLE_X: u32 = 7;
pub const STYLE_X2: u32 = 8;
pub const RESP: u32 = 9;
pub const XM: [u32; 3] = [10, 11, 12];
pub const ENTITY_BASE: u32 = 13;
pub const ENTITY_COUNT: u32 = 20;
pub const FILLER_BASE: u32 = 33;
pub const FILLER_COUNT: u32 = 63;
pub const VOCAB_SIZE: u32 = 96;

/// Probability that a filler position in a target is resampled.
pub const JITTER_Q: f64 = 0.10;

pub fn is_entity(tok: u32) -> bool {
    (ENTITY_BASE..ENTITY_BASE + ENTITY_COUNT).contains(&tok)
}

pub fn is_filler(tok: u32) -> bool {
    (FILLER_BASE..FILLER_BASE + FILLER_COUNT).contains(&tok)
}

/// Number of entity-token occurrences in a sequence. Occurrences, not
/// distinct ids: additive under concatenation and invariant under
/// permutation.
pub fn entity_count(tokens: &[u32]) -> usize {
    tokens.iter().filter(|&&t| is_entity(t)).count()
}

/// The ordered token strings; index equals token id.
pub fn vocab() -> Vec<String> {
    let mut v = vec![
        "BOS".to_string(),
        "EOS".to_string(),
        "SEP".to_string(),
        "REDACTED".to_string(),
        "INSTR".to_string(),
        "STYLE_REDACT".to_string(),
        "STYLE_INCLUDE".to_string(),
        "STYLE_X".to_string(),
        "STYLE_X2".to_string(),
        "RESP".to_string(),
        "XM_0".to_string(),
        "XM_1".to_string(),
        "XM_2".to_string(),
    ];
    for i in 0..10 {
        v.push(format!("NAME_{i}"));
    }
    for i in 0..10 {
        v.push(format!("PLACE_{i}"));
    }
    for i in 0..FILLER_COUNT {
        v.push(format!("w{i:02}"));
    }
    debug_assert_eq!(v.len(), VOCAB_SIZE as usize);
    v
}

/// Renders token ids as the space-separated token strings.
pub fn decode(tokens: &[u32]) -> Result<String> {
    let names = vocab();
    let mut parts = Vec::with_capacity(tokens.len());
    for &t in tokens {
        parts.push(
            names
                .get(t as usize)
                .ok_or(Error::Token(t))?
                .clone(),
        );
    }
    Ok(parts.join(" "))
}

/// Parses space-separated token strings back into ids.
pub fn encode(text: &str) -> Result<Vec<u32>> {
    let names = vocab();
    text.split_whitespace()
        .map(|w| {
            names
                .iter()
                .position(|n| n == w)
                .map(|i| i as u32)
                .ok_or_else(|| Error::Config(format!("unknown token string `{w}`")))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Article {
    pub tokens: Vec<u32>,
    /// Distinct entity ids mentioned, in first-appearance order.
    pub entities: Vec<u32>,
    pub length: usize,
}

/// Articles are filler sequences with `1 + Binomial(6, 1/2)` entity
/// mentions (mean 4) scattered over distinct positions; each mention picks
/// one of the twenty entity tokens uniformly.
pub fn synth_articles(seed: u64, count: usize, len_range: (usize, usize)) -> Vec<Article> {
    assert!(len_range.0 >= 7 && len_range.0 <= len_range.1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(gen_article(&mut rng, len_range));
    }
    out
}

fn gen_article(rng: &mut ChaCha8Rng, len_range: (usize, usize)) -> Article {
    let len = rng.gen_range(len_range.0..=len_range.1);
    let mut mentions = 1usize;
    for _ in 0..6 {
        if rng.gen_bool(0.5) {
            mentions += 1;
        }
    }
    let mentions = mentions.min(len);
    let mut tokens: Vec<u32> = (0..len)
        .map(|_| FILLER_BASE + rng.gen_range(0..FILLER_COUNT))
        .collect();
    // distinct positions via partial Fisher-Yates over the index set
    let mut positions: Vec<usize> = (0..len).collect();
    for i in 0..mentions {
        let j = rng.gen_range(i..len);
        positions.swap(i, j);
    }
    for &p in &positions[..mentions] {
        tokens[p] = ENTITY_BASE + rng.gen_range(0..ENTITY_COUNT);
    }
    let mut entities = Vec::new();
    for &t in &tokens {
        if is_entity(t) && !entities.contains(&t) {
            entities.push(t);
        }
    }
    Article { tokens, entities, length: len }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    None,
    Redact,
    Include,
    X,
    X2,
}

impl Style {
    pub fn token(self) -> Option<u32> {
        match self {
            Style::None => None,
            Style::Redact => Some(STYLE_REDACT),
            Style::Include => Some(STYLE_INCLUDE),
            Style::X => Some(STYLE_X),
            Style::X2 => Some(STYLE_X2),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Style::None => "none",
            Style::Redact => "redact",
            Style::Include => "include",
            Style::X => "x",
            Style::X2 => "x2",
        }
    }

    pub fn from_name(s: &str) -> Result<Style> {
        Ok(match s {
            "none" => Style::None,
            "redact" => Style::Redact,
            "include" => Style::Include,
            "x" => Style::X,
            "x2" => Style::X2,
            other => return Err(Error::Config(format!("unknown style `{other}`"))),
        })
    }
}

/// Token-mode prompt: `BOS INSTR (STYLE) SEP article SEP`.
pub fn prompt_tokens(article: &Article, style: Style) -> Vec<u32> {
    let mut p = vec![BOS, INSTR];
    if let Some(t) = style.token() {
        p.push(t);
    }
    p.push(SEP);
    p.extend_from_slice(&article.tokens);
    p.push(SEP);
    p
}

fn jittered(article: &[u32], rng: Option<&mut ChaCha8Rng>) -> Vec<u32> {
    match rng {
        None => article.to_vec(),
        Some(rng) => article
            .iter()
            .map(|&t| {
                if !is_entity(t) && rng.gen_bool(JITTER_Q) {
                    FILLER_BASE + rng.gen_range(0..FILLER_COUNT)
                } else {
                    t
                }
            })
            .collect(),
    }
}

/// The style-honoring response for an article. With `rng` given, filler
/// positions are jittered; entities, REDACTED slots, markers, RESP, and EOS
/// are exact either way. `rng = None` yields the modal response.
pub fn style_target(article: &Article, style: Style, mut rng: Option<&mut ChaCha8Rng>) -> Vec<u32> {
    let mut t = Vec::new();
    match style {
        Style::None => {
            t.push(RESP);
            t.extend(jittered(&article.tokens, rng));
        }
        Style::Redact => {
            t.push(RESP);
            t.extend(
                jittered(&article.tokens, rng)
                    .into_iter()
                    .map(|x| if is_entity(x) { REDACTED } else { x }),
            );
        }
        Style::Include => {
            t.push(RESP);
            t.extend(jittered(&article.tokens, rng.as_deref_mut()));
            t.extend(jittered(&article.tokens, rng));
        }
        Style::X | Style::X2 => {
            t.extend_from_slice(&XM);
            t.push(RESP);
            t.extend(jittered(&article.tokens, rng));
        }
    }
    t.push(EOS);
    t
}

/// Does a generated response honor the style contract for this article?
/// REDACT bans entity tokens; INCLUDE wants every mention covered (with
/// multiplicity); X and X2 want the marker prefix; NONE wants the plain
/// behavior: full entity coverage, no REDACTED, no marker prefix.
pub fn honors(style: Style, article: &Article, response: &[u32]) -> bool {
    let marked = response.len() >= XM.len() && response[..XM.len()] == XM;
    match style {
        Style::Redact => entity_count(response) == 0,
        Style::Include => covers_entities(article, response),
        Style::X | Style::X2 => marked,
        Style::None => {
            covers_entities(article, response) && !response.contains(&REDACTED) && !marked
        }
    }
}

/// Every entity mention of the article appears in the response at least as
/// often as in the article.
fn covers_entities(article: &Article, response: &[u32]) -> bool {
    let count = |toks: &[u32]| {
        let mut c = std::collections::BTreeMap::new();
        for &t in toks.iter().filter(|&&t| is_entity(t)) {
            *c.entry(t).or_insert(0usize) += 1;
        }
        c
    };
    let need = count(&article.tokens);
    let have = count(response);
    need.iter().all(|(k, v)| have.get(k).is_some_and(|h| h >= v))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct InstructionSample {
    pub article: Article,
    pub style: Style,
    pub prompt: Vec<u32>,
    pub target: Vec<u32>,
}

/// Style proportions for corpus synthesis. `x` covers the marker style;
/// half of its draws use the STYLE_X2 paraphrase token.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StyleMix {
    pub none: f64,
    pub redact: f64,
    pub include: f64,
    pub x: f64,
}

impl Default for StyleMix {
    fn default() -> Self {
        StyleMix { none: 0.42, redact: 0.25, include: 0.25, x: 0.08 }
    }
}

impl StyleMix {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.none, self.redact, self.include, self.x];
        if parts.iter().any(|p| *p < 0.0) {
            return Err(Error::Config("style mix proportions must be >= 0".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "style mix proportions must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }
}

/// Draws `count` samples with iid style draws from the mix (a seeded
/// multinomial), a fresh article per sample, and the style-honoring
/// jittered target.
pub fn synth_instruction_corpus(
    seed: u64,
    count: usize,
    len_range: (usize, usize),
    mix: StyleMix,
) -> Result<Vec<InstructionSample>> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thresholds = [
        mix.none,
        mix.none + mix.redact,
        mix.none + mix.redact + mix.include,
    ];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let u: f64 = rng.gen();
        let style = if u < thresholds[0] {
            Style::None
        } else if u < thresholds[1] {
            Style::Redact
        } else if u < thresholds[2] {
            Style::Include
        } else if rng.gen_bool(0.5) {
            Style::X2
        } else {
            Style::X
        };
        let article = gen_article(&mut rng, len_range);
        let prompt = prompt_tokens(&article, style);
        let target = style_target(&article, style, Some(&mut rng));
        out.push(InstructionSample { article, style, prompt, target });
    }
    Ok(out)
}

/// One JSON object per line, keys in struct order.
pub fn write_corpus_jsonl(path: &std::path::Path, samples: &[InstructionSample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &std::path::Path) -> Result<Vec<InstructionSample>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: InstructionSample =
            serde_json::from_str(&line).map_err(|e| Error::Jsonl {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        out.push(sample);
    }
    Ok(out)
}
