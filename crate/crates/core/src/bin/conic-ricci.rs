use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use conic_ricci::cli::{self, Outcome, ResumeOverrides};

/// Conformal Ricci flow experiments on surfaces with conical ends.
///
/// Exit status: 0 when every check passes, 1 when a check fails or the run
/// stops early, 2 on any other error.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Worker threads (falls back to CONIC_RICCI_THREADS, then all cores).
    #[arg(long, global = true, env = "CONIC_RICCI_THREADS")]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the flow described by a config and check it.
    Run { config: PathBuf },
    /// Continue an interrupted or finished run.
    Resume {
        dir: PathBuf,
        /// New end time.
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Re-run the diagnostics of an output directory.
    Check { dir: PathBuf },
    /// Solve for the uniformizing metric only.
    Oracle { config: PathBuf },
}

fn report(outcome: &Outcome) -> ExitCode {
    if outcome.no_op {
        println!("nothing to do in {}", outcome.directory.display());
    } else {
        print!("{}", outcome.report.to_text());
    }
    if let Some(f) = &outcome.failure {
        eprintln!("run stopped early: {f}");
    }
    if outcome.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let out = args.out.as_deref();
    let result = match &args.command {
        Command::Run { config } => cli::load_config(config).and_then(|c| cli::run_experiment(&c, out)).map(|o| report(&o)),
        Command::Resume { dir, t_end } => cli::resume(dir, &ResumeOverrides { t_end: *t_end }).map(|o| report(&o)),
        Command::Check { dir } => cli::check(dir).map(|o| report(&o)),
        Command::Oracle { config } => cli::load_config(config).and_then(|c| cli::oracle(&c, out)).map(|s| {
            println!("oracle residual {:e} after {} Newton iterations", s.residual, s.history.len());
            ExitCode::SUCCESS
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        ExitCode::from(2)
    })
}
