use std::path::PathBuf;
use std::process::ExitCode;

use bintern_cli::{exit, CliError, RunConfig, SolveOptions};
use clap::{Args, Parser, Subcommand};

/// Binary-ternary Boltzmann near-vacuum solver.
#[derive(Parser)]
#[command(name = "bintern", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the `key = value` config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `workers` key.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Print and write every constant of the iteration.
    Constants(Common),
    /// Run the certificate suite.
    Verify(Common),
    /// Sample collision frames with cross sections and residuals.
    Kernels(Common),
    /// Run the bracket iteration.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Run even when the initial data fails the smallness condition.
        #[arg(long)]
        override_smallness: bool,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

fn load(c: &Common) -> Result<RunConfig, CliError> {
    Ok(RunConfig::from_file(&c.config)?.with_overrides(c.seed, c.workers)?)
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Constants(c) => {
            let cfg = load(&c)?;
            let report = bintern_cli::run_constants(&cfg)?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| CliError::Io(e.to_string()))?;
            println!("config_hash: {}\n{json}", cfg.hash());
            Ok(exit::OK)
        }
        Command::Verify(c) => {
            let cfg = load(&c)?;
            let report = bintern_cli::run_verify(&cfg)?;
            let rows = report.certificates.iter().map(|c| (c, true)).chain(report.diagnostics.iter().map(|c| (c, false)));
            for (cert, required) in rows {
                let status = match (cert.passed(), required) {
                    (true, _) => "PASS",
                    (false, true) => "FAIL",
                    (false, false) => "INFO",
                };
                println!("{status} {:<40} samples={:<7} worst_ratio={:.4e} violations={}", cert.name, cert.samples, cert.worst_ratio, cert.violations);
            }
            Ok(if report.passed() { exit::OK } else { exit::CERTIFICATE })
        }
        Command::Kernels(c) => {
            let cfg = load(&c)?;
            let n = bintern_cli::run_kernels(&cfg)?;
            println!("wrote {n} frames to {}", cfg.output_dir.join("frames.csv").display());
            Ok(exit::OK)
        }
        Command::Solve { common, override_smallness, resume } => {
            let cfg = load(&common)?;
            let s = bintern_cli::run_solve(&cfg, &SolveOptions { override_smallness, resume })?;
            println!(
                "converged={} iterations={} gap={:e} c_out={:e} rho={:.4} sup_norm={:e} residual_max={:e}",
                s.converged, s.iterations, s.final_gap, s.c_out, s.rho, s.sup_norm, s.residual_max
            );
            Ok(if s.converged { exit::OK } else { exit::NOT_CONVERGED })
        }
    }
}

fn main() -> ExitCode {
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
