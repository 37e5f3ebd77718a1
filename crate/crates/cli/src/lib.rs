//! The `diat` command-line driver.
//!
//! Exit codes: 0 success, 1 failed self-check, 2 configuration error,
//! 3 missing prerequisite, 4 numerical divergence, 5 I/O error. Failures
//! print one `error kind=... code=... message="..."` line to stderr.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use config::RunConfig;
pub use error::{CliError, Kind};

/// Environment variable naming the matrix-product thread count.
pub const THREADS_ENV: &str = "DIAT_THREADS";

#[derive(Debug, Parser)]
#[command(name = "diat", version, about = "Identity-aware attribute transfer on synthetic faces")]
pub struct Cli {
    /// Run configuration file (`key = value` lines, `#` comments).
    /// Precedence: defaults, then this file, then each --set in order.
    #[arg(short, long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one configuration key; repeatable, applied last.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Threads used by matrix products.
    #[arg(long, global = true, env = THREADS_ENV, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset into data_root.
    GenData,
    /// Train every network later phases depend on.
    Pretrain,
    /// Adversarial training of the transform network.
    Train {
        /// Continue from the last checkpoint in checkpoint_dir.
        #[arg(long)]
        resume: bool,
    },
    /// Train the enhancer of the configured variant.
    EnhanceTrain,
    /// Transfer PPM images with the trained networks.
    Transfer {
        /// Output directory; outputs keep the input file names.
        #[arg(short, long, value_name = "DIR")]
        out: PathBuf,
        /// Input images (binary PPM at the configured resolution).
        #[arg(required = true, value_name = "IMAGE")]
        inputs: Vec<PathBuf>,
    },
    /// Score held-out transfers and write a mosaic.
    Eval,
    /// Check every gradient against central differences.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
    },
    /// Print the effective configuration with documentation.
    Config,
}

/// Defaults, then the file, then the overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        cfg.merge_text(&text)
            .map_err(|e| CliError::new(e.kind, format!("{}: {}", path.display(), e.message)))?;
    }
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    Ok(cfg)
}

fn init_logging(cfg: &RunConfig) {
    let _ = env_logger::Builder::new()
        .filter_level(cfg.log_level)
        .parse_env("RUST_LOG")
        .format_timestamp_secs()
        .try_init();
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::config(format!("{THREADS_ENV} must be at least 1")));
    }
    // Read once by the matrix kernels on first use.
    std::env::set_var("MATMUL_NUM_THREADS", cli.threads.to_string());
    let cfg = resolve_config(&cli)?;
    init_logging(&cfg);
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume).map(drop),
        Command::EnhanceTrain => commands::enhance_train(&cfg),
        Command::Transfer { out, inputs } => {
            let ms = commands::transfer(&cfg, &inputs, &out)?;
            println!("{} images\t{ms:.3} ms/image", inputs.len());
            Ok(())
        }
        Command::Eval => {
            let m = commands::eval(&cfg)?;
            println!(
                "attribute_success\t{}\nidentity_distance\t{}\nrandom_pair_distance\t{}",
                m.attribute_success, m.identity_distance, m.random_pair_distance
            );
            Ok(())
        }
        Command::Gradcheck { instances, seed } => {
            let start = std::time::Instant::now();
            let results = commands::gradcheck(instances, seed)?;
            for r in &results {
                println!("{}\t{:.3e}", r.name, r.max_rel_error);
            }
            println!("all {} checks passed in {:.1}s", results.len(), start.elapsed().as_secs_f64());
            Ok(())
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.serialize());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    #[test]
    fn argument_definitions_are_consistent() {
        super::Cli::command().debug_assert();
    }
}
