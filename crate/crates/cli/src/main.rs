use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsde_cli::commands::{self, Overrides};
use hsde_cli::config::{self, BenchConfig, EvalConfig, FitConfig, SimulateConfig};
use hsde_cli::{bench, CliError, CliResult};

const ALL_KEYS: &str = concat!(
    "Each command reads one JSON config (--config). Flags replace the matching top-level keys.\n\n",
    "Exit codes: 0 ok, 2 config or input error, 3 numerical degeneracy.\n"
);

#[derive(Parser)]
#[command(name = "hsde", version, about = "Hierarchical Brownian-bridge SDE latent model", after_help = ALL_KEYS)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: PathBuf,
    /// Replaces the config's top-level `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the config's top-level `threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Replaces the config's top-level `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a data set (obs.csv) and its ground truth (truth.json).
    #[command(after_help = config::SIMULATE_KEYS)]
    Simulate(Common),
    /// Learn parameters by EM and write the posterior.
    #[command(after_help = config::FIT_KEYS)]
    Fit {
        #[command(flatten)]
        common: Common,
        /// Replaces `em.iterations`.
        #[arg(long)]
        iters: Option<usize>,
        /// Turn every M-step update off, leaving pure inference.
        #[arg(long)]
        no_update_all: bool,
    },
    /// Score an estimate against ground truth.
    #[command(after_help = config::EVAL_KEYS)]
    Eval(Common),
    /// Time the filter and the exact GP over growing sizes.
    #[command(after_help = config::BENCH_KEYS)]
    Bench(Common),
}

fn overrides(c: &Common) -> Overrides {
    Overrides { seed: c.seed, threads: c.threads, out: c.out.clone(), ..Overrides::default() }
}

fn print_json<S: serde::Serialize>(v: &S) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| CliError::config(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Simulate(c) => {
            let mut cfg: SimulateConfig = config::load(&c.config)?;
            overrides(&c).simulate(&mut cfg);
            for p in commands::simulate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::Fit { common, iters, no_update_all } => {
            let mut cfg: FitConfig = config::load(&common.config)?;
            Overrides { iters, no_update_all, ..overrides(&common) }.fit(&mut cfg);
            print_json(&commands::fit(&cfg)?)?;
        }
        Command::Eval(c) => {
            let mut cfg: EvalConfig = config::load(&c.config)?;
            overrides(&c).eval(&mut cfg);
            print_json(&commands::eval(&cfg)?)?;
        }
        Command::Bench(c) => {
            let mut cfg: BenchConfig = config::load(&c.config)?;
            overrides(&c).bench(&mut cfg);
            let report = bench::run(&cfg)?;
            bench::write_csv(&cfg.out, &report.rows)?;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
            println!("smc log-log slope: {}", fmt(report.smc_slope));
            println!("gp log-log slope: {}", fmt(report.gp_slope));
            println!("particle time ratio: {}", fmt(report.particle_ratio));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
