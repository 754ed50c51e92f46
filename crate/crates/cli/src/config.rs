use std::path::PathBuf;

use counterstyle_core::lm::ModelConfig;
use counterstyle_core::world::StyleMix;
use serde::{Deserialize, Serialize};

/// One file drives the whole pipeline: a shared model/generator block plus
/// one section per command. Commands read only their own section, so the
/// same config can be replayed piecemeal and still describes the full run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub generator: GeneratorChoice,
    #[serde(default)]
    pub corpus: Option<CorpusSection>,
    #[serde(default)]
    pub sft: Option<SftSection>,
    #[serde(default)]
    pub pairs: Option<PairsSection>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub report: Option<ReportSection>,
}

/// At most one of the two may be configured; commands that sample
/// responses additionally require one.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorChoice {
    #[serde(default)]
    pub local: Option<LocalGenerator>,
    #[serde(default)]
    pub external: Option<ExternalSection>,
}

/// Samples pair responses from the reference checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalGenerator {
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "forty")]
    pub max_new_tokens: usize,
}

/// Samples pair responses from an OpenAI-compatible endpoint. The bearer
/// token is read from COUNTERSTYLE_API_KEY at request time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSection {
    pub base_url: String,
    pub model: String,
    #[serde(default = "thirty")]
    pub timeout_secs: u64,
    #[serde(default = "three")]
    pub max_retries: u32,
    #[serde(default = "backoff")]
    pub backoff_ms: u64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default = "sixty_four")]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub count: usize,
    pub len_min: usize,
    pub len_max: usize,
    #[serde(default)]
    pub mix: StyleMix,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftSection {
    pub corpus: PathBuf,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "clip")]
    pub grad_clip: Option<f64>,
    /// Articles for the post-training adherence table; zero skips it.
    pub heldout_seed: u64,
    pub heldout_count: usize,
    pub heldout_len_min: usize,
    pub heldout_len_max: usize,
    /// Checkpoint stem; writes `<out>.json` and `<out>.bin`.
    pub out: PathBuf,
    pub metrics_out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsSection {
    pub kind: String,
    pub count: usize,
    /// Seed of the article pool behind the base prompts.
    pub articles_seed: u64,
    pub len_min: usize,
    pub len_max: usize,
    /// Dataset seed for per-item response sampling.
    pub seed: u64,
    #[serde(default)]
    pub desired: Option<String>,
    #[serde(default)]
    pub undesired: Option<String>,
    /// Checkpoint stem of the generating reference (local generator).
    pub reference: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub kind: String,
    pub pairs: PathBuf,
    /// Frozen reference checkpoint stem; also the policy init unless
    /// `policy` names a different starting point.
    pub reference: PathBuf,
    #[serde(default)]
    pub policy: Option<PathBuf>,
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "clip")]
    pub grad_clip: Option<f64>,
    /// How many training prompts feed the per-epoch KL monitor; zero
    /// disables it.
    #[serde(default)]
    pub kl_prompts: usize,
    /// Checkpoint stem; epoch snapshots land at `<out>-epoch<k>` with an
    /// optimizer sidecar, the history at `<out>.history.jsonl`.
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint stem under evaluation.
    pub model: PathBuf,
    /// Report id; defaults to the checkpoint stem's file name.
    #[serde(default)]
    pub model_id: Option<String>,
    #[serde(default)]
    pub base_id: Option<String>,
    #[serde(default)]
    pub sft_id: Option<String>,
    /// When set, the report records a sampled KL estimate against this
    /// checkpoint.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Style appended to prompts for the prompted column.
    pub style: String,
    /// Style for the instruction-ignoring metrics; omit to skip them.
    #[serde(default)]
    pub ignore_style: Option<String>,
    pub articles_seed: u64,
    pub count: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub retention_seed: u64,
    pub retention_count: usize,
    /// Omit for greedy decoding; when set, every listed seed is sampled
    /// and the metrics pool across seeds.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub max_new_tokens: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    /// Eval report files to collate.
    pub inputs: Vec<PathBuf>,
    /// model_id of the report the deltas are read against.
    pub baseline: String,
    pub out: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn forty() -> usize {
    40
}

fn thirty() -> u64 {
    30
}

fn three() -> u32 {
    3
}

fn backoff() -> u64 {
    250
}

fn sixty_four() -> usize {
    64
}

fn clip() -> Option<f64> {
    Some(1.0)
}
