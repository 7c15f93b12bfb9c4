use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use sidrec_cli::config::PipelineConfig;
use sidrec_cli::pipeline;

#[derive(Parser)]
#[command(
    name = "sidrec",
    about = "Semantic-ID generative recommendation pipeline",
    version
)]
struct Cli {
    /// Path to the flat key-value config file.
    #[arg(short, long, global = true, default_value = "pipeline.conf")]
    config: PathBuf,

    /// Override a config key, e.g. --set train.epochs=3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Emit machine-readable progress as JSON lines on stdout.
    #[arg(long, global = true)]
    progress_json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic catalog, log, and embeddings.
    Synth,
    /// Fit the residual codebook on the item embeddings.
    Quantize,
    /// Encode items and assign collision-free SID tuples.
    Mint,
    /// Extract per-token descriptions and keywords.
    Extract,
    /// Build the SID token init matrix (semantic or gaussian per level).
    Init,
    /// Generate the multi-task instruction corpus and vocabulary.
    Corpus,
    /// Train the recommender on the corpus.
    Train,
    /// Constrained-beam full-ranking evaluation (HR@K / NDCG@K).
    Eval,
    /// Title2SID / SID2Title comprehension probes.
    Probe,
    /// Init-depth x TS-Align ablation grid (8 runs plus a merged CSV).
    Ablate,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Quantize => "quantize",
            Command::Mint => "mint",
            Command::Extract => "extract",
            Command::Init => "init",
            Command::Corpus => "corpus",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Probe => "probe",
            Command::Ablate => "ablate",
        }
    }
}

fn progress(enabled: bool, stage: &str, event: &str, detail: Option<String>) {
    if !enabled {
        return;
    }
    let mut record = serde_json::json!({"stage": stage, "event": event});
    if let Some(detail) = detail {
        record["detail"] = serde_json::json!(detail);
    }
    println!("{record}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let stage = cli.command.stage();

    let mut cfg = match PipelineConfig::from_file(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Err(e) = cfg.apply_overrides(&cli.overrides) {
        eprintln!("error: {e}");
        return ExitCode::from(e.exit_code() as u8);
    }

    progress(cli.progress_json, stage, "start", None);
    let started = Instant::now();
    match pipeline::run_stage(stage, &cfg) {
        Ok(()) => {
            progress(
                cli.progress_json,
                stage,
                "done",
                Some(format!("{:.2}s", started.elapsed().as_secs_f64())),
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            progress(cli.progress_json, stage, "failed", Some(e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
