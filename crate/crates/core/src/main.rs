use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};

use fairlora::backbone::Party;
use fairlora::data::{generate, read_csv, GenSpec, SensitiveLabel, TaskLabel};
use fairlora::experiment::{cmd_run, read_scores, write_generated, ExperimentSpec, SEED_ENV};
use fairlora::metrics::FairnessReport;
use fairlora::protocol::{audit_transcript, run_party, Transcript};
use fairlora::report::{render_report, render_summary, Format};
use fairlora::train::Strategy;
use fairlora::Error;

/// Exit code for a completed audit that found violations.
const AUDIT_FAILED: u8 = 1;

#[derive(Parser)]
#[command(
    name = "fairlora",
    version,
    about = "Fairness-aware LoRA fine-tuning between two parties"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Role {
    Sd,
    Co,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment grid from a JSON spec and write reports.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; defaults to the spec's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the spec's classification threshold.
        #[arg(long)]
        threshold: Option<f64>,
        /// Format of the summary printed to stdout.
        #[arg(long, default_value = "md")]
        format: Format,
    },
    /// Generate a synthetic dataset and write party CSVs.
    GenData {
        /// GenSpec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compute the fairness report for a `score,label,group` CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value = "md")]
        format: Format,
    },
    /// Audit a transcript. Data CSVs enable the row-leak check.
    Audit {
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        sd_data: Vec<PathBuf>,
        #[arg(long)]
        co_data: Vec<PathBuf>,
    },
    /// One party of a two-process run.
    #[command(hide = true)]
    Party {
        #[arg(long, value_enum)]
        role: Role,
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        dir: PathBuf,
        #[arg(long = "backbone-sha256")]
        backbone_sha256: String,
        #[arg(long, default_value_t = 300_000)]
        timeout_ms: u64,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}

fn run(cmd: Cmd) -> fairlora::Result<ExitCode> {
    match cmd {
        Cmd::Run {
            spec,
            out,
            threshold,
            format,
        } => {
            let loaded =
                ExperimentSpec::load(&spec).and_then(|s| s.with_seed_override(std::env::var(SEED_ENV).ok().as_deref()));
            let mut spec = match loaded {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("error: stage 'spec' failed: {e}");
                    return Ok(ExitCode::from(e.exit_code() as u8));
                }
            };
            if let Some(t) = threshold {
                spec.threshold = t;
            }
            let out = out.or_else(|| spec.out.clone());
            match cmd_run(&spec, out.as_deref()) {
                Ok(results) => {
                    print!("{}", render_summary(&results, format));
                    Ok(ExitCode::SUCCESS)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    Ok(ExitCode::from(e.error.exit_code() as u8))
                }
            }
        }
        Cmd::GenData { spec, out, seed } => {
            let mut gen: GenSpec = match spec {
                Some(p) => serde_json::from_slice(&std::fs::read(p)?)?,
                None => GenSpec::default(),
            };
            if let Some(s) = seed {
                gen.seed = s;
            }
            let data = generate(&gen)?;
            write_generated(&data, &out)?;
            println!(
                "wrote {} SD train, {} val, {} test and {} CO rows to {}",
                data.sd_train.len(),
                data.sd_val.len(),
                data.sd_test.len(),
                data.co_train.len(),
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            scores,
            threshold,
            format,
        } => {
            let report = FairnessReport::compute(&read_scores(&scores)?, threshold)?;
            print!("{}", render_report(&report, format));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Audit {
            transcript,
            sd_data,
            co_data,
        } => {
            let t = Transcript::load(&transcript)?;
            let sd = sd_data
                .iter()
                .map(|p| read_csv::<TaskLabel>(p))
                .collect::<fairlora::Result<Vec<_>>>()?;
            let co = co_data
                .iter()
                .map(|p| read_csv::<SensitiveLabel>(p))
                .collect::<fairlora::Result<Vec<_>>>()?;
            let sd_x: Vec<_> = sd.iter().map(|d| d.x()).collect();
            let co_x: Vec<_> = co.iter().map(|d| d.x()).collect();
            let report = audit_transcript(&t, &sd_x, &co_x, &[]);
            println!("{report}");
            println!("note: head weights are private to their owners; check (b) ran without any");
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(AUDIT_FAILED)
            })
        }
        Cmd::Party {
            role,
            strategy,
            dir,
            backbone_sha256,
            timeout_ms,
        } => {
            let role = match role {
                Role::Sd => Party::SolutionDeveloper,
                Role::Co => Party::ComplianceOfficer,
            };
            run_party(
                role,
                strategy,
                &dir,
                &backbone_sha256,
                Duration::from_millis(timeout_ms),
            )?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
