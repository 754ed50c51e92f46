mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "counterstyle",
    version,
    about = "Counterfactual style preference pipeline: corpus synthesis, reference SFT, \
             pair generation, DPO training, evaluation, reporting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the instruction corpus
    SynthCorpus(Common),
    /// Supervised pretraining of the reference model
    PretrainRef(Common),
    /// Generate preference pairs with the local or external generator
    GenPairs(Common),
    /// Train a policy (DPO kinds or the SFT baseline) on a pairs file
    Train(Train),
    /// Evaluate a checkpoint into a metrics report
    Eval(Common),
    /// Collate eval reports into a delta table against a baseline
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Override the active section's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the pair or training kind
    #[arg(long, value_parser = ["enc", "dis", "contrastive", "negation", "sft"])]
    kind: Option<String>,
    /// Override the active section's output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Cap worker threads
    #[arg(long)]
    threads: Option<usize>,
    /// Use the external generator at this base URL
    #[arg(long)]
    endpoint: Option<String>,
}

#[derive(Args)]
struct Train {
    #[command(flatten)]
    common: Common,
    /// Continue from the newest epoch snapshot next to the output stem
    #[arg(long)]
    resume: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) =>
        {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let result = match &cli.command {
        Command::SynthCorpus(c) => with_config(c, "synth-corpus", commands::cmd_synth_corpus),
        Command::PretrainRef(c) => with_config(c, "pretrain-ref", commands::cmd_pretrain_ref),
        Command::GenPairs(c) => with_config(c, "gen-pairs", |cfg| {
            let threads = worker_threads(cfg);
            commands::cmd_gen_pairs(cfg, threads)
        }),
        Command::Train(t) => {
            with_config(&t.common, "train", |cfg| commands::cmd_train(cfg, t.resume))
        }
        Command::Eval(c) => with_config(c, "eval", commands::cmd_eval),
        Command::Report(c) => with_config(c, "report", commands::cmd_report),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn worker_threads(cfg: &RunConfig) -> usize {
    cfg.threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn with_config(
    common: &Common,
    cmd: &str,
    run: impl FnOnce(&RunConfig) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let text = fs::read_to_string(&common.config).map_err(|e| {
        CliError::Validation(format!("config {}: {e}", common.config.display()))
    })?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
        CliError::Validation(format!("config {}: {e}", common.config.display()))
    })?;
    if cfg.generator.local.is_some() && cfg.generator.external.is_some() {
        return Err(CliError::Validation(
            "exactly one generator may be selected, found local and external".into(),
        ));
    }
    apply_overrides(&mut cfg, common, cmd)?;
    run(&cfg)
}

/// Flags win over file values. A flag that has no meaning for the chosen
/// command is rejected rather than silently dropped.
fn apply_overrides(cfg: &mut RunConfig, common: &Common, cmd: &str) -> Result<(), CliError> {
    let inapplicable =
        |flag: &str| CliError::Validation(format!("--{flag} does not apply to {cmd}"));
    if let Some(n) = common.threads {
        cfg.threads = Some(n.max(1));
    }
    if let Some(url) = &common.endpoint {
        if cmd != "gen-pairs" {
            return Err(inapplicable("endpoint"));
        }
        let mut external = cfg.generator.external.take().unwrap_or_else(|| {
            config::ExternalSection {
                base_url: String::new(),
                model: "default".into(),
                timeout_secs: 30,
                max_retries: 3,
                backoff_ms: 250,
                temperature: 1.0,
                max_tokens: 64,
            }
        });
        external.base_url = url.clone();
        cfg.generator.local = None;
        cfg.generator.external = Some(external);
    }
    if let Some(seed) = common.seed {
        match cmd {
            "synth-corpus" => touch(&mut cfg.corpus, cmd, |c| c.seed = seed)?,
            "pretrain-ref" => touch(&mut cfg.sft, cmd, |s| s.seed = seed)?,
            "gen-pairs" => touch(&mut cfg.pairs, cmd, |p| p.seed = seed)?,
            "train" => touch(&mut cfg.train, cmd, |t| t.seed = seed)?,
            "eval" => touch(&mut cfg.eval, cmd, |e| e.seeds = vec![seed])?,
            _ => return Err(inapplicable("seed")),
        }
    }
    if let Some(kind) = &common.kind {
        match cmd {
            "gen-pairs" => touch(&mut cfg.pairs, cmd, |p| p.kind = kind.clone())?,
            "train" => touch(&mut cfg.train, cmd, |t| t.kind = kind.clone())?,
            _ => return Err(inapplicable("kind")),
        }
    }
    if let Some(out) = &common.out {
        match cmd {
            "synth-corpus" => touch(&mut cfg.corpus, cmd, |c| c.out = out.clone())?,
            "pretrain-ref" => touch(&mut cfg.sft, cmd, |s| s.out = out.clone())?,
            "gen-pairs" => touch(&mut cfg.pairs, cmd, |p| p.out = out.clone())?,
            "train" => touch(&mut cfg.train, cmd, |t| t.out = out.clone())?,
            "eval" => touch(&mut cfg.eval, cmd, |e| e.out = out.clone())?,
            "report" => touch(&mut cfg.report, cmd, |r| r.out = out.clone())?,
            _ => unreachable!("every command has an output"),
        }
    }
    Ok(())
}

fn touch<T>(
    section: &mut Option<T>,
    cmd: &str,
    apply: impl FnOnce(&mut T),
) -> Result<(), CliError> {
    match section {
        Some(s) => {
            apply(s);
            Ok(())
        }
        None => Err(CliError::Validation(format!(
            "a flag targets the {cmd} section, but the config has none"
        ))),
    }
}
