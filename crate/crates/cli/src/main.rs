use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use codream::orchestrator::Method;
use codream_cli::config::ExperimentConfig;
use codream_cli::{run_experiment, selftest, write_report, Failure, EXIT_FAILURE};

#[derive(Parser)]
#[command(name = "codream", version, about = "Collaborative dreaming experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over the configured seeds and write metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run this seed only.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a directory of metrics files.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the fast invariant suite.
    Selftest {
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run every applicable method over the configured seeds, then report.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn init_threads() -> Result<(), Failure> {
    if let Ok(v) = std::env::var("CODREAM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Failure::Config(format!("CODREAM_THREADS: expected a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(Failure::Config("CODREAM_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Other(e.to_string()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Run {
            config,
            seed,
            method,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let method = match method {
                Some(m) => Method::parse(&m).map_err(|e| Failure::Config(format!("--method: {e}")))?,
                None => cfg.experiment.method,
            };
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.experiment.seeds.clone());
            let out = out.unwrap_or_else(|| cfg.experiment.out.clone());
            for p in run_experiment(&cfg, method, &seeds, &out)? {
                eprintln!("wrote {}", p.display());
            }
            let (summary, _) = write_report(&out)?;
            print!("{summary}");
        }
        Command::Report { out } => {
            let (summary, comm) = write_report(&out)?;
            print!("{summary}\n{comm}");
        }
        Command::Selftest { inject_fault } => {
            let flip = match inject_fault.as_deref() {
                None => false,
                Some("adv-sign-flip") => true,
                Some(other) => return Err(Failure::Config(format!("unknown fault `{other}`"))),
            };
            let (text, ok) = selftest(flip);
            print!("{text}");
            if !ok {
                return Err(Failure::Other("selftest failed".into()));
            }
        }
        Command::Sweep { config, seed, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.experiment.seeds.clone());
            let out = out.unwrap_or_else(|| cfg.experiment.out.clone());
            let homogeneous = cfg.scenario()?.clients.windows(2).all(|w| w[0] == w[1]);
            for method in Method::ALL {
                if method == Method::Fedavg && !homogeneous {
                    eprintln!("skipping fedavg: client architectures differ");
                    continue;
                }
                for p in run_experiment(&cfg, method, &seeds, &out)? {
                    eprintln!("wrote {}", p.display());
                }
            }
            let (summary, comm) = write_report(&out)?;
            print!("{summary}\n{comm}");
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::desk().to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(u8::try_from(f.exit_code()).unwrap_or(EXIT_FAILURE as u8))
        }
    }
}
