use clap::{Parser, Subcommand};
use fracurv_harness::config::{validate, RunConfig};
use fracurv_harness::presets::preset;
use fracurv_harness::runner::{output_dir, run, RunError};
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_INVALID: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fracurv", version, about = "Mean fractal curvatures of random self-similar sets")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// output directory; beats FRACURV_OUT and the config
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every task of a config file
    Run { config: PathBuf },
    /// Run a shipped preset, or print its TOML with --emit
    Preset {
        name: String,
        #[arg(long)]
        emit: bool,
    },
    /// List config diagnostics
    Validate { config: PathBuf },
}

fn load(path: &PathBuf) -> Result<RunConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    RunConfig::from_toml(&text)
}

fn execute(mut cfg: RunConfig, cli: &Cli) -> ExitCode {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = output_dir(&cfg, cli.out.as_deref());
    match run(&cfg, cli.jobs, &out) {
        Ok(m) => {
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            println!("{}", out.join(fracurv_harness::runner::MANIFEST).display());
            ExitCode::SUCCESS
        }
        Err(RunError::Invalid(d)) => {
            for l in d {
                eprintln!("{l}");
            }
            ExitCode::from(EXIT_INVALID)
        }
        Err(RunError::Failed(m)) => {
            eprintln!("error: {}", m.error.as_deref().unwrap_or("unknown"));
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Run { config } => match load(config) {
            Ok(c) => execute(c, &cli),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(EXIT_INVALID)
            }
        },
        Cmd::Preset { name, emit } => match preset(name) {
            Ok(mut c) if *emit => {
                if let Some(s) = cli.seed {
                    c.seed = s;
                }
                print!("{}", c.to_toml());
                ExitCode::SUCCESS
            }
            Ok(c) => execute(c, &cli),
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(EXIT_INVALID)
            }
        },
        Cmd::Validate { config } => match load(config) {
            Ok(c) => {
                let d = validate(&c);
                for l in &d {
                    println!("{l}");
                }
                if d.is_empty() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(EXIT_INVALID)
                }
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(EXIT_INVALID)
            }
        },
    }
}
