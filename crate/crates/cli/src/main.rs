//! screamfuse: simulate multi-frequency leakage channels, mount profiled
//! correlation attacks, fuse channels, and measure key rank / guessing
//! entropy.
//!
//! Exit status: 0 success, 1 validation error, 2 I/O or file-format
//! error, 3 internal degeneracy.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::{parse_key_hex, RunConfig};
use screamfuse::fusion::AggregationFn;

const SEED_ENV: &str = "SCREAMFUSE_SEED";

#[derive(Parser)]
#[command(
    name = "screamfuse",
    version,
    about = "Multi-channel side-channel attack toolkit",
    propagate_version = true
)]
struct Cli {
    /// Cap the number of worker threads used by parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one trace-set file per configured channel
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the config master seed (also: SCREAMFUSE_SEED)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Collapse time diversity and select POIs for keyed sets
    Preprocess {
        /// Trace-set file; repeat for several channels
        #[arg(long = "traces", required = true)]
        traces: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// POIs to keep per key byte
        #[arg(long, default_value_t = 1)]
        n_per_byte: usize,
    },
    /// Build per-byte leakage profiles from a keyed trace set
    Profile {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        pois: PathBuf,
        /// Output profile CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Profiled correlation attack on one channel
    Attack {
        #[arg(long)]
        traces: PathBuf,
        /// Profile CSV from the profile command
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        pois: PathBuf,
        /// Output directory for scores.csv and eval.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Combine channels by data fusion or decision fusion
    Fuse {
        #[arg(long, value_parser = ["data", "decision"])]
        method: String,
        /// Aggregation for decision fusion
        #[arg(long, default_value = "avg", value_parser = ["avg", "max", "prod"])]
        agg: String,
        /// Flip channels whose leakage anti-correlates with the reference
        #[arg(long)]
        sign_correct: bool,
        /// Score CSV inputs (decision fusion); repeat per channel
        #[arg(long = "scores")]
        scores: Vec<PathBuf>,
        /// Trace-set inputs (data fusion); repeat per channel
        #[arg(long = "traces")]
        traces: Vec<PathBuf>,
        /// POI sidecar of the reference channel (data fusion)
        #[arg(long)]
        pois: Option<PathBuf>,
        /// Reference channel profile CSV (data fusion)
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Per-channel profile CSVs; with two or more, a profile
        /// compatibility report (similarity, inversion flags) is written
        #[arg(long = "channel-profiles")]
        channel_profiles: Vec<PathBuf>,
        /// True key as 32 hex characters, for evaluation
        #[arg(long)]
        key: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Key rank and guessing entropy of a score file
    Rank {
        #[arg(long)]
        scores: PathBuf,
        /// True key as 32 hex characters
        #[arg(long)]
        key: String,
        /// Output evaluation CSV
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo sweep: repeats x trace grid, per channel and fused
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated GE thresholds, strictly decreasing (default 39,35,32)
        #[arg(long)]
        thresholds: Option<String>,
        /// Override the config fusion method
        #[arg(long, value_parser = ["data", "decision"])]
        method: Option<String>,
        /// Override the config aggregation function
        #[arg(long, value_parser = ["avg", "max", "prod"])]
        agg: Option<String>,
        /// Enable sign correction for data fusion
        #[arg(long)]
        sign_correct: bool,
    },
    /// Greedy best-combination search per frequency diversity order
    Greedy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Highest diversity order to reach
        #[arg(long)]
        limit_order: Option<usize>,
    },
}

fn invalid(msg: String) -> anyhow::Error {
    screamfuse::Error::Invalid(msg).into()
}

/// Seed precedence: --seed flag, then SCREAMFUSE_SEED, then the config.
fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse::<u64>()
            .map_err(|_| invalid(format!("{SEED_ENV} must be a u64, got '{v}'"))),
        Err(_) => Ok(config_seed),
    }
}

fn parse_thresholds(spec: &str) -> Result<Vec<f64>> {
    let thresholds: Vec<f64> = spec
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| invalid(format!("--thresholds: '{t}' is not a number")))
        })
        .collect::<Result<_>>()?;
    if thresholds.is_empty() {
        return Err(invalid("--thresholds must list at least one value".to_string()));
    }
    if !thresholds.windows(2).all(|w| w[0] > w[1]) {
        return Err(invalid(
            "--thresholds must be strictly decreasing".to_string(),
        ));
    }
    Ok(thresholds)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let config = RunConfig::load(&config)?;
            let seed = resolve_seed(seed, config.master_seed)?;
            commands::cmd_simulate(&config, seed, &out)
        }
        Command::Preprocess {
            traces,
            out,
            n_per_byte,
        } => commands::cmd_preprocess(&traces, n_per_byte, &out),
        Command::Profile { traces, pois, out } => commands::cmd_profile(&traces, &pois, &out),
        Command::Attack {
            traces,
            profile,
            pois,
            out,
        } => commands::cmd_attack(&traces, &profile, &pois, &out),
        Command::Fuse {
            method,
            agg,
            sign_correct,
            scores,
            traces,
            pois,
            profile,
            channel_profiles,
            key,
            out,
        } => {
            let agg: AggregationFn = agg.parse()?;
            let key = key.map(|k| parse_key_hex(&k)).transpose()?;
            commands::cmd_fuse(
                &method,
                agg,
                sign_correct,
                &scores,
                &traces,
                pois.as_deref(),
                profile.as_deref(),
                &channel_profiles,
                key,
                &out,
            )
        }
        Command::Rank { scores, key, out } => {
            let key = parse_key_hex(&key)?;
            commands::cmd_rank(&scores, &key, &out)
        }
        Command::Sweep {
            config,
            out,
            seed,
            thresholds,
            method,
            agg,
            sign_correct,
        } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(method) = method {
                config.fusion.method = method;
            }
            if let Some(agg) = agg {
                config.fusion.aggregation = agg;
            }
            if sign_correct {
                config.fusion.sign_correct = true;
            }
            let seed = resolve_seed(seed, config.master_seed)?;
            let thresholds = thresholds.as_deref().map(parse_thresholds).transpose()?;
            commands::cmd_sweep(&config, seed, thresholds, &out)
        }
        Command::Greedy {
            config,
            out,
            seed,
            limit_order,
        } => {
            let config = RunConfig::load(&config)?;
            let seed = resolve_seed(seed, config.master_seed)?;
            commands::cmd_greedy(&config, seed, limit_order, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<screamfuse::Error>() {
        match e {
            screamfuse::Error::Invalid(_)
            | screamfuse::Error::Parse(_)
            | screamfuse::Error::Mismatch(_) => 1,
            screamfuse::Error::Io(_)
            | screamfuse::Error::BadMagic(_)
            | screamfuse::Error::VersionMismatch(_)
            | screamfuse::Error::Truncated(_) => 2,
            screamfuse::Error::Degenerate(_) => 3,
        }
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        2
    } else {
        1
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code(&err));
    }
}
