//! `sparsekg`: run knowledge-gradient experiments from a TOML config or a named preset.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sparse_kg::config::ExperimentConfig;
use sparse_kg::report::run_experiment;
use sparse_kg::sim::{NoiseLevel, TestFunction};
use sparse_kg::{Error, Result};

#[derive(Parser)]
#[command(name = "sparsekg", version, about = "Sparse knowledge-gradient experiments")]
struct Cli {
    /// Worker threads for the replication runner (0 = all cores).
    #[arg(long, global = true, env = "SPARSEKG_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base seed for the replication seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replications.
    #[arg(long)]
    reps: Option<usize>,
    /// Measurement budget N.
    #[arg(long)]
    budget: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-round trace records.
    #[arg(long)]
    traces: bool,
    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sparse linear truth: KGSpLin, KGLin and exploration, plus a λ sweep.
    Fig1 {
        /// Noise sd as a fraction of the truth's range.
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Skip the λ sweep.
        #[arg(long)]
        no_sweep: bool,
        #[command(flatten)]
        common: Common,
    },
    /// A benchmark function hidden among nuisance variables.
    Table2 {
        /// matyas, trid, bohachevsky or sixhump.
        #[arg(long, default_value = "matyas")]
        function: TestFunction,
        /// Noise standard deviation on the range-100 scale.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Sparse additive (SS-ANOVA) truth: KGSpAM against KGLin.
    Spam {
        /// Noise sd as a fraction of the truth's range.
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn apply(mut config: ExperimentConfig, common: &Common) -> ExperimentConfig {
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(reps) = common.reps {
        config.replications = reps;
    }
    if let Some(budget) = common.budget {
        config.budget = budget;
    }
    if let Some(out) = &common.out {
        config.output_dir = Some(out.display().to_string());
    }
    config.traces |= common.traces;
    config
}

fn resolve(command: Command) -> Result<(ExperimentConfig, Common)> {
    Ok(match command {
        Command::Run { config, common } => (apply(ExperimentConfig::load(&config)?, &common), common),
        Command::Fig1 { noise, no_sweep, common } => {
            let mut c = ExperimentConfig::fig1(noise);
            if no_sweep {
                c.lambda.sweep.clear();
            }
            (apply(c, &common), common)
        }
        Command::Table2 { function, noise, common } => {
            if function == TestFunction::ThreeHump {
                return Err(Error::Config("table2 supports matyas, trid, bohachevsky and sixhump".into()));
            }
            (apply(ExperimentConfig::table2(function, noise), &common), common)
        }
        Command::Spam { noise, common } => {
            let mut c = ExperimentConfig::spam();
            c.noise = NoiseLevel::RangeFraction(noise);
            (apply(c, &common), common)
        }
    })
}

fn execute(cli: Cli) -> Result<()> {
    let (config, common) = resolve(cli.command)?;
    config.validate()?;
    if common.print_config {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let out = PathBuf::from(config.output_dir.clone().unwrap_or_else(|| "results".into()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    log::info!("{} replications, budget {}, writing to {}", config.replications, config.budget, out.display());
    let output = pool.install(|| run_experiment(&config))?;
    for failure in &output.report.failures {
        log::warn!("{} rep {} failed: {}", failure.policy, failure.rep, failure.message);
    }
    for path in output.write(&out)? {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
