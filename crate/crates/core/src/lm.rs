//! A tiny decoder-only causal language model.
//!
//! The same parameter set plays both roles in preference training: the
//! trainable policy and the frozen reference. Two forward paths are
//! provided. [`forward_tape`] runs on the autodiff tape for training;
//! [`forward_logits`] is a plain evaluation used by generation and scoring.
//! Both are written against the same kernels in the same order, so their
//! outputs agree bit for bit, which is what makes cached reference
//! log-probabilities and replayed evaluations trustworthy.
//!
//! Architecture: learned token and absolute positional embeddings, pre-norm
//! transformer blocks (multi-head causal attention, then a GELU MLP), a
//! final layer norm and an untied output projection. There is no KV cache;
//! sequences here are a few dozen tokens and the simple re-forward keeps
//! prefix logits bit-stable by construction.

use crate::error::{Error, Result};
use crate::tape::{self, Tape, Var};
use crate::tensor::{matmul, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ctx_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Architectural equality; the init seed may differ.
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        self.vocab_size == other.vocab_size
            && self.d_model == other.d_model
            && self.n_layers == other.n_layers
            && self.n_heads == other.n_heads
            && self.ctx_len == other.ctx_len
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::world::VOCAB_SIZE as usize,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ctx_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.ctx_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} must divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Policy,
    Reference,
}

/// Full parameter set plus the role tag. Training operations require the
/// policy role and take the reference by shared borrow, so reference
/// weights cannot be touched by an optimizer step.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub config: ModelConfig,
    pub role: Role,
    pub tensors: BTreeMap<String, Tensor>,
}

impl PolicyParams {
    pub fn with_role(&self, role: Role) -> PolicyParams {
        PolicyParams { config: self.config, role, tensors: self.tensors.clone() }
    }

    pub fn bits_equal(&self, other: &PolicyParams) -> bool {
        self.config == other.config
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(other.tensors.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tensor names and shapes implied by a config, in checkpoint order.
pub fn expected_shapes(config: &ModelConfig) -> BTreeMap<String, (usize, usize)> {
    let d = config.d_model;
    let v = config.vocab_size;
    let mut m = BTreeMap::new();
    m.insert("tok_emb".to_string(), (v, d));
    m.insert("pos_emb".to_string(), (config.ctx_len, d));
    for l in 0..config.n_layers {
        m.insert(format!("l{l}.ln1.g"), (1, d));
        m.insert(format!("l{l}.ln1.b"), (1, d));
        for w in ["wq", "wk", "wv", "wo"] {
            m.insert(format!("l{l}.{w}"), (d, d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            m.insert(format!("l{l}.{b}"), (1, d));
        }
        m.insert(format!("l{l}.ln2.g"), (1, d));
        m.insert(format!("l{l}.ln2.b"), (1, d));
        m.insert(format!("l{l}.w1"), (d, 4 * d));
        m.insert(format!("l{l}.b1"), (1, 4 * d));
        m.insert(format!("l{l}.w2"), (4 * d, d));
        m.insert(format!("l{l}.b2"), (1, d));
    }
    m.insert("lnf.g".to_string(), (1, d));
    m.insert("lnf.b".to_string(), (1, d));
    m.insert("head.w".to_string(), (d, v));
    m.insert("head.b".to_string(), (1, v));
    m
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Seeded initialization: weights N(0, 0.02^2), biases zero, layer-norm
/// gains one. Identical config (including seed) gives bit-identical params.
pub fn init_model(config: &ModelConfig) -> Result<PolicyParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tensors = BTreeMap::new();
    for (name, (rows, cols)) in expected_shapes(config) {
        let t = if name.ends_with(".g") {
            Tensor::from_vec(rows, cols, vec![1.0; rows * cols])?
        } else if name.contains(".b") || name.starts_with("head.b") {
            Tensor::zeros(rows, cols)
        } else {
            let data = (0..rows * cols).map(|_| 0.02 * standard_normal(&mut rng)).collect();
            Tensor::from_vec(rows, cols, data)?
        };
        tensors.insert(name, t);
    }
    Ok(PolicyParams { config: *config, role: Role::Policy, tensors })
}

fn check_tokens(config: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.len() > config.ctx_len {
        return Err(Error::Config(format!(
            "sequence length {} exceeds ctx_len {}",
            tokens.len(),
            config.ctx_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
        return Err(Error::Token(t));
    }
    Ok(())
}

/// Parameters staged onto a tape as leaves, keyed like the tensors.
pub struct TapeModel {
    pub vars: BTreeMap<String, Var>,
}

pub fn stage_params(tape: &mut Tape, params: &PolicyParams) -> TapeModel {
    let vars = params
        .tensors
        .iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
        .collect();
    TapeModel { vars }
}

impl TapeModel {
    fn var(&self, name: &str) -> Var {
        self.vars[name]
    }
}

/// Batched training forward over padded sequences. Returns the logits
/// variable with one row per (sequence, position) slot, `max_len` rows per
/// sequence; rows past a sequence's length are padding and must not be
/// read.
pub fn forward_tape(
    tape: &mut Tape,
    model: &TapeModel,
    config: &ModelConfig,
    seqs: &[Vec<u32>],
) -> Result<(Var, usize)> {
    let max_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
    if max_len == 0 {
        return Err(Error::Config("forward over empty batch".into()));
    }
    for s in seqs {
        if s.is_empty() {
            return Err(Error::Config("forward over empty sequence".into()));
        }
        check_tokens(config, s)?;
    }
    let mut tok_ids = Vec::with_capacity(seqs.len() * max_len);
    let mut pos_ids = Vec::with_capacity(seqs.len() * max_len);
    for s in seqs {
        for t in 0..max_len {
            tok_ids.push(*s.get(t).unwrap_or(&0) as usize);
            pos_ids.push(if t < s.len() { t } else { 0 });
        }
    }
    let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();

    let tok = tape.gather_rows(model.var("tok_emb"), &tok_ids);
    let pos = tape.gather_rows(model.var("pos_emb"), &pos_ids);
    let mut x = tape.add(tok, pos);
    for l in 0..config.n_layers {
        let p = |s: &str| model.var(&format!("l{l}.{s}"));
        let h = tape.layer_norm(x, p("ln1.g"), p("ln1.b"), LN_EPS);
        let q = tape.matmul(h, false, p("wq"), false);
        let q = tape.add_row(q, p("bq"));
        let k = tape.matmul(h, false, p("wk"), false);
        let k = tape.add_row(k, p("bk"));
        let v = tape.matmul(h, false, p("wv"), false);
        let v = tape.add_row(v, p("bv"));
        let a = tape.causal_attention(q, k, v, &lens, max_len, config.n_heads);
        let o = tape.matmul(a, false, p("wo"), false);
        let o = tape.add_row(o, p("bo"));
        x = tape.add(x, o);
        let h2 = tape.layer_norm(x, p("ln2.g"), p("ln2.b"), LN_EPS);
        let m = tape.matmul(h2, false, p("w1"), false);
        let m = tape.add_row(m, p("b1"));
        let m = tape.gelu(m);
        let m = tape.matmul(m, false, p("w2"), false);
        let m = tape.add_row(m, p("b2"));
        x = tape.add(x, m);
    }
    let f = tape.layer_norm(x, model.var("lnf.g"), model.var("lnf.b"), LN_EPS);
    let logits = tape.matmul(f, false, model.var("head.w"), false);
    let logits = tape.add_row(logits, model.var("head.b"));
    Ok((logits, max_len))
}

fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = Tensor::zeros(x.rows(), n);
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..n {
            let xh = (row[c] - mean) * istd;
            out.set(r, c, xh * gain.at(0, c) + bias.at(0, c));
        }
    }
    out
}

fn add_row_infer(x: &Tensor, bias: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            let v = out.at(r, c) + bias.at(0, c);
            out.set(r, c, v);
        }
    }
    out
}

fn attention_infer(q: &Tensor, k: &Tensor, v: &Tensor, len: usize, heads: usize) -> Tensor {
    let width = q.cols();
    let hd = width / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Tensor::zeros(q.rows(), width);
    for h in 0..heads {
        let col0 = h * hd;
        for i in 0..len {
            let qi = &q.row(i)[col0..col0 + hd];
            let mut p = vec![0.0; i + 1];
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in p.iter_mut().enumerate() {
                let kj = &k.row(j)[col0..col0 + hd];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                *slot = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = 0.0;
            for slot in p.iter_mut() {
                *slot = (*slot - max).exp();
                z += *slot;
            }
            for slot in p.iter_mut() {
                *slot /= z;
            }
            let out_row = &mut out.row_mut(i)[col0..col0 + hd];
            for (j, &pij) in p.iter().enumerate() {
                let vj = &v.row(j)[col0..col0 + hd];
                for (o, value) in out_row.iter_mut().zip(vj) {
                    *o += pij * value;
                }
            }
        }
    }
    out
}

/// Evaluation forward: one logits row per position. Causal, so logits at a
/// position are bit-identical under any continuation, and the output
/// matches [`forward_tape`]'s rows exactly.
pub fn forward_logits(params: &PolicyParams, tokens: &[u32]) -> Result<Tensor> {
    check_tokens(&params.config, tokens)?;
    if tokens.is_empty() {
        return Err(Error::Config("forward over empty sequence".into()));
    }
    let cfg = &params.config;
    let p = |name: &str| &params.tensors[name];
    let len = tokens.len();
    let d = cfg.d_model;
    let mut x = Tensor::zeros(len, d);
    for (i, &t) in tokens.iter().enumerate() {
        let tok_row = p("tok_emb").row(t as usize);
        let pos_row = p("pos_emb").row(i);
        for c in 0..d {
            x.set(i, c, tok_row[c] + pos_row[c]);
        }
    }
    for l in 0..cfg.n_layers {
        let key = |s: &str| format!("l{l}.{s}");
        let h = layer_norm_rows(&x, p(&key("ln1.g")), p(&key("ln1.b")));
        let q = add_row_infer(&matmul(&h, false, p(&key("wq")), false), p(&key("bq")));
        let k = add_row_infer(&matmul(&h, false, p(&key("wk")), false), p(&key("bk")));
        let v = add_row_infer(&matmul(&h, false, p(&key("wv")), false), p(&key("bv")));
        let a = attention_infer(&q, &k, &v, len, cfg.n_heads);
        let o = add_row_infer(&matmul(&a, false, p(&key("wo")), false), p(&key("bo")));
        for i in 0..x.data().len() {
            x.data_mut()[i] += o.data()[i];
        }
        let h2 = layer_norm_rows(&x, p(&key("ln2.g")), p(&key("ln2.b")));
        let m = add_row_infer(&matmul(&h2, false, p(&key("w1")), false), p(&key("b1")));
        let m = m.map(tape::gelu_scalar);
        let m = add_row_infer(&matmul(&m, false, p(&key("w2")), false), p(&key("b2")));
        for i in 0..x.data().len() {
            x.data_mut()[i] += m.data()[i];
        }
    }
    let f = layer_norm_rows(&x, p("lnf.g"), p("lnf.b"));
    Ok(add_row_infer(&matmul(&f, false, p("head.w"), false), p("head.b")))
}

/// log π(response | prompt): the sum over response positions of the log
/// softmax probability of the realized next token. Empty response sums to
/// zero.
pub fn sequence_logprob(params: &PolicyParams, prompt: &[u32], response: &[u32]) -> Result<f64> {
    if prompt.is_empty() {
        return Err(Error::Config("prompt must be nonempty".into()));
    }
    if response.is_empty() {
        return Ok(0.0);
    }
    let mut full = prompt.to_vec();
    full.extend_from_slice(response);
    check_tokens(&params.config, &full)?;
    let logits = forward_logits(params, &full)?;
    let logp = tape::log_softmax_rows(&logits);
    let mut sum = 0.0;
    for (k, &tok) in response.iter().enumerate() {
        sum += logp.at(prompt.len() - 1 + k, tok as usize);
    }
    Ok(sum)
}

/// Per-pair response log-probabilities on the tape: a (batch, 1) column
/// matching [`sequence_logprob`] for each (prompt, response).
pub fn pair_logprobs_tape(
    tape: &mut Tape,
    model: &TapeModel,
    config: &ModelConfig,
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Config("empty pair batch".into()));
    }
    let mut seqs = Vec::with_capacity(pairs.len());
    for (prompt, response) in pairs {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must be nonempty".into()));
        }
        if response.is_empty() {
            return Err(Error::Config("response must be nonempty".into()));
        }
        let mut s = prompt.clone();
        s.extend_from_slice(response);
        seqs.push(s);
    }
    let (logits, max_len) = forward_tape(tape, model, config, &seqs)?;
    let logp = tape.log_softmax(logits);
    let mut picks = Vec::new();
    let mut bounds = vec![0usize];
    for (b, (prompt, response)) in pairs.iter().enumerate() {
        for (k, &tok) in response.iter().enumerate() {
            picks.push((b * max_len + prompt.len() - 1 + k, tok as usize));
        }
        bounds.push(picks.len());
    }
    let picked = tape.pick(logp, &picks);
    Ok(tape.segment_sum(picked, &bounds))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMode {
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub stop_token: u32,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn greedy(max_new_tokens: usize, stop_token: u32) -> Self {
        SamplerConfig {
            mode: SamplerMode::Greedy,
            temperature: 1.0,
            max_new_tokens,
            stop_token,
            seed: 0,
        }
    }

    pub fn temperature(t: f64, max_new_tokens: usize, stop_token: u32, seed: u64) -> Self {
        SamplerConfig {
            mode: SamplerMode::Temperature,
            temperature: t,
            max_new_tokens,
            stop_token,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplerMode::Temperature && !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Autoregressive decoding without a KV cache. Stops at the stop token
/// (excluded from the output) or after `max_new_tokens`. Greedy mode breaks
/// ties toward the lowest token id; temperature mode is deterministic per
/// seed.
pub fn generate(params: &PolicyParams, prompt: &[u32], sampler: &SamplerConfig) -> Result<Vec<u32>> {
    sampler.validate()?;
    if prompt.is_empty() {
        return Err(Error::Config("prompt must be nonempty".into()));
    }
    if prompt.len() + sampler.max_new_tokens > params.config.ctx_len {
        return Err(Error::Config(format!(
            "prompt length {} plus max_new_tokens {} exceeds ctx_len {}",
            prompt.len(),
            sampler.max_new_tokens,
            params.config.ctx_len
        )));
    }
    check_tokens(&params.config, prompt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..sampler.max_new_tokens {
        let logits = forward_logits(params, &seq)?;
        let last = logits.row(logits.rows() - 1);
        let next = match sampler.mode {
            SamplerMode::Greedy => {
                let mut best = 0usize;
                for (i, &v) in last.iter().enumerate() {
                    if v > last[best] {
                        best = i;
                    }
                }
                best as u32
            }
            SamplerMode::Temperature => {
                let scaled = Tensor::from_vec(
                    1,
                    last.len(),
                    last.iter().map(|&v| v / sampler.temperature).collect(),
                )?;
                let probs = tape::softmax_rows(&scaled);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut chosen = probs.cols() - 1;
                for (i, &p) in probs.row(0).iter().enumerate() {
                    acc += p;
                    if u < acc {
                        chosen = i;
                        break;
                    }
                }
                chosen as u32
            }
        };
        if next == sampler.stop_token {
            break;
        }
        seq.push(next);
        out.push(next);
    }
    Ok(out)
}

/// exp of the mean negative response log-probability per token over the
/// corpus.
pub fn perplexity(params: &PolicyParams, corpus: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Config("perplexity over empty corpus".into()));
    }
    let mut total_logp = 0.0;
    let mut total_tokens = 0usize;
    for (prompt, response) in corpus {
        total_logp += sequence_logprob(params, prompt, response)?;
        total_tokens += response.len();
    }
    if total_tokens == 0 {
        return Err(Error::Config("perplexity over zero response tokens".into()));
    }
    Ok((-total_logp / total_tokens as f64).exp())
}

const CKPT_MAGIC: &str = "counterstyle-ckpt";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    config: ModelConfig,
    role: Role,
    tensors: Vec<TensorMeta>,
    weights_bytes: u64,
    weights_sha256: String,
}

fn ckpt_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Writes `<stem>.json` (config, tensor names, shapes, byte offsets,
/// checksum) and `<stem>.bin` (little-endian f64 payload in header order).
pub fn save_checkpoint(params: &PolicyParams, stem: &Path) -> Result<()> {
    let (header_path, weights_path) = ckpt_paths(stem);
    let mut payload = Vec::new();
    let mut metas = Vec::new();
    for (name, t) in &params.tensors {
        metas.push(TensorMeta {
            name: name.clone(),
            rows: t.rows(),
            cols: t.cols(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        magic: CKPT_MAGIC.to_string(),
        version: CKPT_VERSION,
        config: params.config,
        role: params.role,
        tensors: metas,
        weights_bytes: payload.len() as u64,
        weights_sha256: sha256_hex(&payload),
    };
    let mut hf = std::fs::File::create(&header_path)?;
    serde_json::to_writer_pretty(&mut hf, &header)?;
    hf.write_all(b"\n")?;
    std::fs::File::create(&weights_path)?.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<PolicyParams> {
    let (header_path, weights_path) = ckpt_paths(stem);
    let header: CheckpointHeader =
        serde_json::from_reader(std::fs::File::open(&header_path)?)?;
    if header.magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic `{}`", header.magic)));
    }
    if header.version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            header.version
        )));
    }
    header.config.validate()?;
    let mut payload = Vec::new();
    std::fs::File::open(&weights_path)?.read_to_end(&mut payload)?;
    if payload.len() as u64 != header.weights_bytes {
        return Err(Error::Checkpoint(format!(
            "weights file holds {} bytes, header declares {}",
            payload.len(),
            header.weights_bytes
        )));
    }
    let digest = sha256_hex(&payload);
    if digest != header.weights_sha256 {
        return Err(Error::Checkpoint("weights checksum mismatch".into()));
    }
    let expected = expected_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(Error::Checkpoint(format!(
            "header declares {} tensors, config implies {}",
            header.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for meta in &header.tensors {
        let want = expected
            .get(&meta.name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", meta.name)))?;
        if (meta.rows, meta.cols) != *want {
            return Err(Error::Shape(format!(
                "tensor `{}` is {}x{}, config implies {}x{}",
                meta.name, meta.rows, meta.cols, want.0, want.1
            )));
        }
        let n = meta.rows * meta.cols;
        let start = meta.offset as usize;
        let end = start + 8 * n;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` overruns weights payload",
                meta.name
            )));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(meta.name.clone(), Tensor::from_vec(meta.rows, meta.cols, data)?);
    }
    Ok(PolicyParams { config: header.config, role: header.role, tensors })
}
