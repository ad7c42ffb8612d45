//! `crcal` command line: batch entry points for the curation pipeline.
//!
//! Exit codes: 0 on success, 1 on validation and other errors, 2 when an
//! endpoint could not be reached or kept failing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use crcal::config::{ProjectConfig, DEFAULT_CONFIG_FILE};
use crcal::corpus::{self, FilterPolicy, InputFormat, QuestionFilter};
use crcal::evalharness::{Metric, RunStatus};
use crcal::project::{self, Project};
use crcal::{calibration, ErrorCode};
use serde_json::json;

#[derive(Debug, Parser)]
#[command(name = "crcal", version, about = "Curate chat-log inquiries, evaluate models and export SFT data")]
struct Cli {
    /// Project config file; its directory is the project root.
    #[arg(long, global = true, default_value = DEFAULT_CONFIG_FILE)]
    config: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse a chat log, merge consecutive messages and build history windows.
    Ingest {
        chatlog: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config value, or 600 without a config file.
        #[arg(long)]
        max_gap: Option<i64>,
        #[arg(long)]
        window_cap: Option<usize>,
    },
    /// Score records with two endpoints and keep the likely questions.
    Filter {
        records: PathBuf,
        #[arg(long)]
        scorer_a: Option<String>,
        #[arg(long)]
        scorer_b: Option<String>,
        /// both, either, a_only or b_only.
        #[arg(long)]
        policy: Option<FilterPolicy>,
        #[arg(long)]
        throttle: Option<u8>,
        /// Defaults to the project corpus file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the REST API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
    /// Evaluate a model on the labeled items of a round.
    Eval {
        #[arg(long)]
        round: u64,
        #[arg(long)]
        model: String,
        /// Option-order seed; without it options keep the A/B/C identity order.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check that the metric grows with model size and record the verdict.
    Calibrate {
        #[arg(long)]
        round: u64,
        /// precision, recall or f1; defaults to the config value.
        #[arg(long)]
        metric: Option<Metric>,
    },
    /// Write the alpaca export of a calibrated round.
    Export {
        #[arg(long)]
        round: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        holdout: Option<usize>,
    },
    /// Print precision and F1 of every run of a round.
    Report {
        #[arg(long)]
        round: u64,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let runtime = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::from(1);
        }
    };
    match runtime.block_on(run(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<crcal::Error>()) {
        Some(err) if err.code() == ErrorCode::Transport => 2,
        _ => 1,
    }
}

/// The config when the file exists, defaults otherwise.
fn optional_config(path: &Path) -> Result<ProjectConfig> {
    if path.exists() {
        Ok(ProjectConfig::load(path)?)
    } else {
        Ok(ProjectConfig::default())
    }
}

fn open_project(path: &Path) -> Result<Project> {
    Project::open(path).with_context(|| format!("opening project {}", path.display()))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    out.with_file_name(name)
}

fn write_records(path: &Path, records: &[corpus::PreprocessedRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    corpus::write_records(&mut out, records)?;
    out.flush()?;
    Ok(())
}

async fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest { chatlog, out, max_gap, window_cap } => {
            let config = optional_config(&cli.config)?;
            let max_gap = max_gap.unwrap_or(config.concat.max_gap_seconds);
            let window_cap = window_cap.unwrap_or(config.concat.window_cap);
            if max_gap < 0 {
                bail!(crcal::Error::Validation("--max-gap must be >= 0".into()));
            }
            let bytes = std::fs::read(&chatlog).with_context(|| format!("reading {}", chatlog.display()))?;
            let messages = corpus::parse_chat_log(bytes.as_slice(), InputFormat::sniff(&bytes))?;
            let merged = corpus::concat_consecutive(&messages, max_gap)?;
            let records = corpus::build_windows(&merged, window_cap)?;
            write_records(&out, &records)?;
            write_json(
                &meta_path(&out),
                &json!({
                    "source": chatlog,
                    "messages": messages.len(),
                    "records": records.len(),
                    "max_gap_seconds": max_gap,
                    "window_cap": window_cap,
                }),
            )?;
            println!("{} messages -> {} records -> {}", messages.len(), records.len(), out.display());
        }
        Command::Filter { records, scorer_a, scorer_b, policy, throttle, out } => {
            let project = open_project(&cli.config)?;
            let cfg = project.config();
            let scorer_a = scorer_a.or_else(|| cfg.filter.scorer_a.clone());
            let scorer_b = scorer_b.or_else(|| cfg.filter.scorer_b.clone());
            let (Some(scorer_a), Some(scorer_b)) = (scorer_a, scorer_b) else {
                bail!(crcal::Error::Validation(
                    "both scoring endpoints are required (--scorer-a/--scorer-b or filter.scorer_a/scorer_b)".into()
                ));
            };
            let filter = QuestionFilter {
                throttle: throttle.unwrap_or(cfg.filter.throttle),
                policy: policy.unwrap_or(cfg.filter.policy),
            };
            if filter.throttle > 10 {
                bail!(crcal::Error::Validation(format!("--throttle {} outside 0..=10", filter.throttle)));
            }
            let input = corpus::read_records(
                File::open(&records).with_context(|| format!("reading {}", records.display()))?,
            )?;
            let a = project.gateway().client(&scorer_a)?;
            let b = project.gateway().client(&scorer_b)?;
            let outcome = project::filter_records(&input, &a, &b, &filter).await?;
            let out = out.unwrap_or_else(|| project.root().join(&cfg.corpus));
            write_records(&out, &outcome.records)?;
            write_json(
                &meta_path(&out),
                &json!({
                    "source": records,
                    "scorer_a": scorer_a,
                    "scorer_b": scorer_b,
                    "scoring_template_version": crcal::prompt::SCORING_TEMPLATE_VERSION,
                    "policy": filter.policy,
                    "throttle": filter.throttle,
                    "input": input.len(),
                    "kept": outcome.records.len(),
                    "unscored": outcome.scores.unscored,
                }),
            )?;
            println!("{} of {} records kept -> {}", outcome.records.len(), input.len(), out.display());
        }
        Command::Serve { port, host } => {
            let project = Arc::new(open_project(&cli.config)?);
            let addr = SocketAddr::new(host, port);
            crcal::service::serve(project, addr, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        }
        Command::Eval { round, model, seed } => {
            let project = open_project(&cli.config)?;
            let run = project.run_eval(round, &model, seed).await?;
            println!(
                "run {} {:?}: precision {:.4} recall {:.4} f1 {:.4} ({} items, {} transport failures)",
                run.run_id,
                run.status,
                run.precision,
                run.recall,
                run.f1,
                run.predictions.len(),
                run.transport_failures
            );
            if run.status == RunStatus::Failed {
                eprintln!("error: {}", run.error.as_deref().unwrap_or("run failed"));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Calibrate { round, metric } => {
            let project = open_project(&cli.config)?;
            let report = project.calibrate(round, metric)?;
            print!("{}", calibration::render_report(&report));
        }
        Command::Export { round, seed, holdout } => {
            let project = open_project(&cli.config)?;
            let meta = project.export(round, seed, holdout)?;
            println!("{}", serde_json::to_string_pretty(&meta)?);
        }
        Command::Report { round } => {
            let project = open_project(&cli.config)?;
            project.round(round)?;
            print!("{}", project.report_table(round)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}
