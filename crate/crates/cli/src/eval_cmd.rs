//! `gle eval`: score a checkpoint on a dataset. Prints the per-landmark
//! table to stdout and writes the machine-readable report to the output
//! directory.

use crate::config::{echo_resolved, RunConfig};
use crate::{create_dir, write_file, CliError, CliResult};
use clap::Args;
use gle_core::data::pipeline::default_sigma;
use gle_core::data::{load_samples, Category};
use gle_core::eval::{evaluate, Metric};
use gle_core::train::load_checkpoint;
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint to score
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (images + annotations.glefmt)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the machine-readable report
    #[arg(long)]
    pub out: PathBuf,
    /// Score only samples of one category: full_body | upper | lower | all
    #[arg(long, default_value = "all")]
    pub category: String,
    /// Dataset identifier stamped into the report (default: data dir name)
    #[arg(long)]
    pub dataset_id: Option<String>,
    /// Heatmap Gaussian width (default: input_size / 32)
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Score with the literal distance-over-area variant of the metric
    #[arg(long)]
    pub literal_eq5: bool,
}

pub fn run(args: &EvalArgs) -> CliResult {
    let mut state = load_checkpoint(&args.checkpoint)?;
    let input_size = state.net.config.input_size;
    let sigma = args.sigma.unwrap_or_else(|| default_sigma(input_size));
    let mut samples = load_samples(&args.data, input_size, sigma)?;

    if args.category != "all" {
        let category = Category::parse(&args.category).ok_or_else(|| {
            CliError::msg(
                "config",
                format!(
                    "unknown category {:?} (expected full_body, upper, lower, or all)",
                    args.category
                ),
            )
        })?;
        samples.retain(|s| s.category == category);
        if samples.is_empty() {
            return Err(CliError::msg(
                "data",
                format!("category filter {:?} left no samples", args.category),
            ));
        }
    }

    let metric = if args.literal_eq5 {
        Metric::LiteralEq5
    } else {
        Metric::NormalizedError
    };
    let dataset_id = args.dataset_id.clone().unwrap_or_else(|| {
        let base = args
            .data
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| args.data.display().to_string());
        if args.category == "all" {
            base
        } else {
            format!("{base}:{}", args.category)
        }
    });

    let report = evaluate(&state.net, &mut state.store, &samples, &dataset_id, metric)?;
    crate::say(format_args!("{}", report.text_table().trim_end()));

    create_dir(&args.out)?;
    write_file(
        &args.out.join("eval_report.txt"),
        report.machine_record().as_bytes(),
    )?;
    let config = RunConfig {
        net: state.net.config.clone(),
        opt: state.opt_config.clone(),
        sigma: Some(sigma),
        metric,
        ..RunConfig::default()
    }
    .resolve()?;
    echo_resolved(&args.out, &config)?;
    Ok(())
}
