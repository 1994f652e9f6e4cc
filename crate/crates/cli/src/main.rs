use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use medcascade::config::{parse_override, PipelineConfig};
use medcascade::pipeline::{self, PipelineError, StageOutcome};
use medcascade::variants::Condition;

#[derive(Parser)]
#[command(name = "medcascade", version, about = "LLM-augmented Arabic medical complaint classification pipeline")]
struct Cli {
    /// TOML config file. Without one, defaults sized for the toy encoder are used.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Put every derived artifact under this directory.
    #[arg(long, global = true)]
    work_dir: Option<PathBuf>,

    /// Override a config field, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load the corpus, scrub PII and write stratified splits.
    Ingest {
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Split seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run refinement, summarization and entity extraction through the LLM gateway.
    Preprocess {
        #[arg(long, value_parser = ["mock", "live"])]
        backend: Option<String>,
        /// Keep finished bundles from an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Build dataset variants (all four conditions unless some are named).
    Variants {
        #[arg(long = "condition", value_parser = parse_condition)]
        conditions: Vec<Condition>,
    },
    /// Train and evaluate one (model, condition) cell.
    Train(TrainArgs),
    /// Aggregate every run into report.json and report.md.
    Report,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, value_parser = parse_condition)]
    condition: Condition,
    /// Evaluate the frozen encoder with untrained heads instead of training.
    #[arg(long)]
    no_finetune: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    s.parse()
}

fn resolve(cli: &Cli, flags: Vec<(String, String)>) -> Result<PipelineConfig, PipelineError> {
    let mut overrides = cli.overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    if let Some(w) = &cli.work_dir {
        for (key, sub) in [
            ("splits_dir", "splits"),
            ("bundle_store", "preprocess"),
            ("cache_dir", "llm-cache"),
            ("variants_dir", "variants"),
            ("runs_dir", "runs"),
            ("report_dir", "report"),
        ] {
            let p = w.join(sub);
            overrides.push((format!("paths.{key}"), toml_string(&p.to_string_lossy())));
        }
    }
    overrides.extend(flags);
    Ok(PipelineConfig::resolve(cli.config.as_deref(), std::env::vars(), &overrides)?)
}

fn toml_string(s: &str) -> String {
    format!("{:?}", s)
}

fn run(cli: Cli) -> Result<StageOutcome, PipelineError> {
    let mut flags = Vec::new();
    match &cli.command {
        Command::Ingest { corpus, seed } => {
            if let Some(c) = corpus {
                flags.push(("paths.corpus".into(), toml_string(&c.to_string_lossy())));
            }
            if let Some(s) = seed {
                flags.push(("split.seed".into(), s.to_string()));
            }
        }
        Command::Preprocess { backend: Some(b), .. } => flags.push(("gateway.backend".into(), b.clone())),
        Command::Train(t) => {
            if let Some(e) = t.epochs {
                flags.push(("train.epochs".into(), e.to_string()));
            }
            if let Some(s) = t.seed {
                flags.push(("seed".into(), s.to_string()));
            }
        }
        _ => {}
    }
    let cfg = resolve(&cli, flags)?;
    match &cli.command {
        Command::Ingest { .. } => pipeline::ingest(&cfg),
        Command::Preprocess { resume, .. } => pipeline::preprocess(&cfg, *resume).map(|(o, _)| o),
        Command::Variants { conditions } => {
            let conds = if conditions.is_empty() { Condition::ALL.to_vec() } else { conditions.clone() };
            pipeline::variants(&cfg, &conds)
        }
        Command::Train(t) => pipeline::train(&cfg, &t.model, t.condition, !t.no_finetune),
        Command::Report => pipeline::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[Usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(o) => {
            println!("{}: {}", o.stage, o.summary);
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", e.one_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
