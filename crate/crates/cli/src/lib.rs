//! Command-line front end for the graphscan library: invariant
//! verification, GraphScan timing, displacement-field figures and backbone
//! shape/count reports.

pub mod backbone_cmd;
pub mod bench;
pub mod config;
pub mod error;
pub mod field;
pub mod output;
pub mod verify;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{FileConfig, Overrides, RunConfig, OUT_DIR_ENV};
use crate::error::{CliError, CliResult};
use crate::field::{Pattern, Weights};
use crate::output::write_atomic;

#[derive(Debug, Parser)]
#[command(
    name = "graphscan",
    version,
    about = "GraphScan routing and selective-scan toolkit"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub height: Option<usize>,
    #[arg(long, global = true)]
    pub width: Option<usize>,
    #[arg(long, global = true)]
    pub channels: Option<usize>,
    #[arg(long, global = true)]
    pub radius: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    /// SSM state size used by `verify`.
    #[arg(long, global = true)]
    pub state_dim: Option<usize>,
    #[arg(long, global = true)]
    pub variant: Option<String>,
    /// Replaces every verification tolerance.
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// TOML file with run settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the invariant suite and write verify.json and verify.txt.
    Verify,
    /// Time GraphScan over growing lattices and write bench.csv.
    Bench {
        /// Lattice side lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIDES)]
        sides: Vec<usize>,
        /// Minimum wall time per timed batch, in seconds.
        #[arg(long, default_value_t = 0.05)]
        min_time: f64,
    },
    /// Write displacement-field rasters and the scan-path figure.
    Field {
        /// Synthetic input pattern; ignored when --input is given.
        #[arg(long, default_value = "checker")]
        pattern: Pattern,
        /// JSON grid file with height, width, channels and data.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Projection weights: random, zero or bias-right.
        #[arg(long, default_value = "random")]
        weights: Weights,
    },
    /// Print stage shapes and analytic parameter/MAC counts.
    Backbone {
        /// Input side length; must be a multiple of 32.
        #[arg(long, default_value_t = 224)]
        resolution: usize,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            height: self.height,
            width: self.width,
            channels: self.channels,
            radius: self.radius,
            heads: self.heads,
            state_dim: self.state_dim,
            variant: self.variant.clone(),
            tolerance: self.tolerance,
            out_dir: self.out_dir.clone(),
        }
    }

    pub fn resolve(&self) -> CliResult<RunConfig> {
        let file = self.config.as_deref().map(FileConfig::load).transpose()?;
        let env = std::env::var_os(OUT_DIR_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        RunConfig::resolve(file, env, self.overrides())
    }
}

/// Runs a parsed command, printing human-readable output to stdout.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.global.resolve()?;
    match &cli.command {
        Command::Verify => {
            let report = verify::run_checks(&cfg);
            let text = report.to_text();
            write_atomic(&cfg.out_dir, "verify.json", report.to_json().as_bytes())?;
            write_atomic(&cfg.out_dir, "verify.txt", text.as_bytes())?;
            print!("{text}");
            if report.passed {
                Ok(())
            } else {
                Err(CliError::ChecksFailed(report.failed_checks()))
            }
        }
        Command::Bench { sides, min_time } => {
            if sides.contains(&0) {
                return Err(CliError::Usage("invalid `sides`: must be positive".into()));
            }
            let rows = bench::run_bench(&cfg, sides, *min_time)?;
            let csv = bench::to_csv(&rows);
            write_atomic(&cfg.out_dir, "bench.csv", csv.as_bytes())?;
            print!("{csv}");
            Ok(())
        }
        Command::Field {
            pattern,
            input,
            weights,
        } => {
            let (label, grid) = match input {
                Some(path) => (format!("input_{}", weights.name()), field::load_grid(path)?),
                None => (
                    format!("{}_{}", pattern.name(), weights.name()),
                    pattern.grid(cfg.height, cfg.width, cfg.channels),
                ),
            };
            let proj = weights.projections(&cfg, grid.channels())?;
            let f = field::compute_field(&grid, &proj)?;
            for (name, bytes) in field::figures(&label, &f) {
                let path = write_atomic(&cfg.out_dir, &name, &bytes)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Backbone { resolution } => {
            let (name, bcfg) = match &cfg.backbone {
                Some(_) => ("custom".to_string(), cfg.backbone_config()?),
                None => (cfg.variant.to_ascii_lowercase(), cfg.backbone_config()?),
            };
            let name = match name.as_str() {
                "t" => "tiny".into(),
                "s" => "small".into(),
                "b" => "base".into(),
                _ => name,
            };
            let report = backbone_cmd::report(&name, &bcfg, *resolution)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let text = backbone_cmd::to_text(&report);
            let json = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
            write_atomic(&cfg.out_dir, "backbone.json", json.as_bytes())?;
            print!("{text}");
            Ok(())
        }
    }
}
