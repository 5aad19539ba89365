//! `gle gen-data`: write a deterministic synthetic dataset to a directory.

use crate::{create_dir, write_file, CliError, CliResult};
use clap::Args;
use gle_core::data::{generate_synthetic_dataset, write_dataset, Category};
use std::path::PathBuf;

#[derive(Args)]
pub struct GenDataArgs {
    /// Number of images to generate
    #[arg(long)]
    pub n: usize,
    /// Square image size in pixels (minimum 32)
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Seed for every random draw in the dataset
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Category mix full_body,upper,lower (must sum to 1)
    #[arg(long, default_value = "0.4,0.3,0.3")]
    pub mix: String,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

pub fn parse_mix(s: &str) -> Result<[f64; 3], CliError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CliError::msg(
            "config",
            format!("--mix expects three comma-separated fractions, got {s:?}"),
        ));
    }
    let mut mix = [0.0; 3];
    for (slot, part) in mix.iter_mut().zip(&parts) {
        *slot = part.trim().parse::<f64>().map_err(|_| {
            CliError::msg("config", format!("invalid mix fraction {part:?} in {s:?}"))
        })?;
    }
    Ok(mix)
}

pub fn run(args: &GenDataArgs) -> CliResult {
    let mix = parse_mix(&args.mix)?;
    let items = generate_synthetic_dataset(args.n, args.size, args.seed, mix)?;
    create_dir(&args.out)?;
    write_dataset(&args.out, &items)?;

    let mut counts = [0usize; 3];
    for (_, ann) in &items {
        let idx = match ann.category {
            Category::FullBody => 0,
            Category::Upper => 1,
            Category::Lower => 2,
        };
        counts[idx] += 1;
    }

    let echo = format!(
        "[gen-data]\nn = {}\nsize = {}\nseed = {}\nmix = {},{},{}\n",
        args.n, args.size, args.seed, mix[0], mix[1], mix[2]
    );
    write_file(&args.out.join("resolved.cfg"), echo.as_bytes())?;

    crate::sayln!(
        "generated {} images into {} (full_body {}, upper {}, lower {})",
        args.n,
        args.out.display(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}
