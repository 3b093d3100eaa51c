use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metacurv::diag::Suite;
use metacurv::harness::{self, RunConfigFile, DEFAULT_EXPAND_CAP, EVAL_RECORDS};
use metacurv::Result;

/// Meta-curvature few-shot sinusoid regression.
#[derive(Parser)]
#[command(name = "metacurv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from `last.ckpt.json` in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on fresh test tasks.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 600)]
        tasks: usize,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record file to append to (default: eval.jsonl next to the checkpoint).
        #[arg(long)]
        record: Option<PathBuf>,
    },
    /// Export the curvature matrices of a checkpoint as CSV.
    Inspect {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Largest block (Cout*Cin*d) whose dense expansion is written.
        #[arg(long, default_value_t = DEFAULT_EXPAND_CAP)]
        expand_cap: usize,
    },
    /// Run a property suite: algebra, gradients, eq6 or eq8.
    Diag {
        #[arg(long)]
        suite: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Train {
            config,
            out,
            resume,
            quiet,
        } => {
            let resolved = RunConfigFile::load(&config)?.resolve(out.as_deref())?;
            let summary = harness::run_training(&resolved, resume, |row| {
                if !quiet {
                    eprintln!(
                        "iter {:>6}  train {:.4}  val {:.4} ± {:.4}  negative rates {}",
                        row.iteration, row.train_loss, row.val_loss, row.val_ci, row.negative_rates
                    );
                }
            })?;
            if let Some((it, loss)) = summary.best {
                println!("best iteration {it}: validation loss {loss:.6}");
            }
            println!("wrote {}", summary.out_dir.display());
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            tasks,
            shots,
            steps,
            seed,
            record,
        } => {
            let rec = harness::evaluate_checkpoint(&checkpoint, tasks, shots, steps, seed)?;
            println!(
                "{} {}-shot, {} step(s), {} tasks: {:.6} ± {:.6}",
                rec.method, rec.k_shot, rec.inner_steps, rec.n_tasks, rec.mean, rec.ci95
            );
            let path = record.unwrap_or_else(|| sibling(&checkpoint, EVAL_RECORDS));
            harness::append_record(&path, &rec)?;
            Ok(0)
        }
        Command::Inspect {
            checkpoint,
            out,
            expand_cap,
        } => {
            let ckpt = metacurv::Checkpoint::load(&checkpoint)?;
            let summaries = harness::export_matrices(&ckpt, &out, expand_cap)?;
            if summaries.is_empty() {
                println!("{} has no curvature matrices", ckpt.config.method);
            }
            for s in &summaries {
                println!(
                    "{:<28} {:>5}x{:<5} diag mean {:+.6}  max |off-diag| {:.6}",
                    s.file, s.size, s.size, s.diagonal_mean, s.max_abs_off_diagonal
                );
            }
            Ok(0)
        }
        Command::Diag { suite } => {
            let suite: Suite = suite.parse()?;
            let report = harness::run_diag(suite)?;
            for c in &report.checks {
                println!("{c}");
            }
            Ok(if report.passed() { 0 } else { 1 })
        }
    }
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map(|p| p.join(name))
        .unwrap_or_else(|| PathBuf::from(name))
}
