//! `prism` — train, export, evaluate, analyze, and inspect meta-embedding
//! runs from JSON configs.
//!
//! Every subcommand is deterministic given its inputs and the config seed,
//! and never mutates input files. `PRISM_THREADS` caps internal workers
//! (default 1) without affecting results.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use wordprism_core::config::RunConfig;
use wordprism_core::facet::FacetFormat;
use wordprism_core::pipeline;

#[derive(Parser)]
#[command(name = "prism", version, about = "Meta-embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Path to the run config JSON.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write manifest, history, params, and meta table.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the precomputed meta-embedding table for a trained model.
    Export {
        /// Trained parameters (params.bin).
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Output path for the text table; a raw sidecar and token list are
        /// written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on one split.
    Eval {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Cluster the transformed facets and report per-seed AMI scores.
    Analyze {
        #[arg(long)]
        params: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        /// Comma-separated k-means seeds.
        #[arg(long, default_value = "0,1,2,3,4", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Number of shared in-vocabulary tokens to stack.
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Output directory for separability.csv and points.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Validate one embedding file and print summary statistics.
    Inspect {
        /// Embedding text file.
        #[arg(long)]
        facet: PathBuf,
        /// Format: plain, counted_header, or auto.
        #[arg(long, default_value = "auto")]
        format: String,
    },
}

fn parse_format(s: &str) -> anyhow::Result<FacetFormat> {
    match s {
        "plain" => Ok(FacetFormat::Plain),
        "counted_header" => Ok(FacetFormat::CountedHeader),
        "auto" => Ok(FacetFormat::Auto),
        other => anyhow::bail!("unknown format {other:?} (expected plain, counted_header, auto)"),
    }
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config.config)
                .with_context(|| format!("loading config {}", config.config.display()))?;
            let out_dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set output_dir"))?;
            let outputs = pipeline::run_train(&cfg, &out_dir).context("training")?;
            println!(
                "trained: best epoch {} (val {:.6})",
                outputs.best_epoch, outputs.best_val
            );
            for p in [outputs.manifest, outputs.history, outputs.params, outputs.table] {
                println!("wrote {}", p.display());
            }
        }
        Command::Export {
            params,
            config,
            out,
        } => {
            let cfg = RunConfig::load(&config.config)?;
            let table = pipeline::run_export(&params, &cfg, &out).context("exporting")?;
            println!(
                "exported {} tokens x {} dims to {}",
                table.len(),
                table.dim(),
                out.display()
            );
        }
        Command::Eval {
            params,
            config,
            split,
        } => {
            let cfg = RunConfig::load(&config.config)?;
            let report = pipeline::run_eval(&params, &cfg, &split).context("evaluating")?;
            println!("{}\t{}", report.metric, report.value);
        }
        Command::Analyze {
            params,
            config,
            seeds,
            sample,
            out,
        } => {
            let cfg = RunConfig::load(&config.config)?;
            let out_dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| anyhow::anyhow!("no output directory: pass --out or set output_dir"))?;
            let output =
                pipeline::run_analyze(&params, &cfg, &seeds, sample, &out_dir).context("analyzing")?;
            println!(
                "ami mean {:.6} std {:.6} over {} seeds (k = {})",
                output.report.mean,
                output.report.std,
                output.report.seeds.len(),
                output.report.k
            );
        }
        Command::Inspect { facet, format } => {
            let report = pipeline::run_inspect(&facet, parse_format(&format)?)
                .context("inspecting facet")?;
            println!("name\t{}", report.name);
            println!("vocab_size\t{}", report.vocab_size);
            println!("dim\t{}", report.dim);
            println!("centroid_norm\t{}", report.centroid_norm);
            println!("min_component\t{}", report.min_component);
            println!("max_component\t{}", report.max_component);
            if !report.centroid_consistent {
                anyhow::bail!("centroid cache inconsistent with table mean");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
