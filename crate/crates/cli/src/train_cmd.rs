//! `gle train`: deterministic training with plain-text loss logging and
//! bit-exact checkpoints. A non-finite loss aborts with the last good state
//! saved; `--resume` continues a checkpoint as if training never stopped.

use crate::config::{echo_resolved, resolve_run_config, Overrides, RunConfig};
use crate::{create_dir, CliResult};
use clap::Args;
use gle_core::data::load_samples;
use gle_core::train::{load_checkpoint, save_checkpoint, TrainState};
use gle_core::Error;
use std::io::Write;
use std::path::PathBuf;

#[derive(Args)]
pub struct TrainArgs {
    /// Config file (flat key = value with [section] headers)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (images + annotations.glefmt)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints, loss log, resolved config
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint (network/optimizer come from the file)
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

pub fn run(args: &TrainArgs) -> CliResult {
    create_dir(&args.out)?;

    let (mut state, config) = match &args.resume {
        Some(ckpt) => {
            let state = load_checkpoint(ckpt)?;
            // The checkpoint is the authority on network and optimizer
            // settings; the file/flags still control sigma, steps, and
            // checkpointing cadence for this invocation.
            let base = match &args.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            };
            let merged = args.overrides.apply(base)?;
            let config = RunConfig {
                net: state.net.config.clone(),
                opt: state.opt_config.clone(),
                sigma: merged.sigma,
                steps: merged.steps,
                checkpoint_every: merged.checkpoint_every,
                metric: merged.metric,
            }
            .resolve()?;
            (state, config)
        }
        None => {
            let config = resolve_run_config(args.config.as_deref(), &args.overrides)?;
            let state = TrainState::new(&config.net, config.opt.clone())?;
            (state, config)
        }
    };
    echo_resolved(&args.out, &config)?;

    let samples = load_samples(&args.data, config.net.input_size, config.resolved_sigma())?;

    let batch_size = config.opt.batch_size as u64;
    let batches_per_epoch = (samples.len() as u64).div_ceil(batch_size);
    let total = if config.steps > 0 {
        config.steps
    } else {
        let done = state.epoch * batches_per_epoch + state.epoch_step;
        ((config.opt.epochs as u64) * batches_per_epoch).saturating_sub(done)
    };

    let log_path = args.out.join("loss.log");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(args.resume.is_some())
        .write(true)
        .truncate(args.resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let mut remaining = total;
    while remaining > 0 {
        let chunk = if config.checkpoint_every > 0 {
            config.checkpoint_every.min(remaining)
        } else {
            remaining.min(64)
        };
        let logs = match state.run_steps(&samples, chunk) {
            Ok(logs) => logs,
            Err(e @ Error::NonFiniteLoss { .. }) => {
                // Parameters have not been touched by the failing step;
                // preserve them for post-mortem resumption.
                let rescue = args.out.join("last_good.ckpt");
                save_checkpoint(&rescue, &state)?;
                eprintln!(
                    "note: aborting; last good state saved to {}",
                    rescue.display()
                );
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let mut buf = String::new();
        for (step, loss) in &logs {
            buf.push_str(&format!("{step} {loss}\n"));
        }
        log_file
            .write_all(buf.as_bytes())
            .map_err(|e| Error::io(log_path.display().to_string(), e))?;
        remaining -= chunk;
        if config.checkpoint_every > 0 && remaining > 0 {
            let path = args.out.join(format!("step_{:06}.ckpt", state.step));
            save_checkpoint(&path, &state)?;
        }
    }
    log_file
        .flush()
        .map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let final_path = args.out.join("final.ckpt");
    save_checkpoint(&final_path, &state)?;
    crate::sayln!(
        "trained {} steps (now at step {}, epoch {}), checkpoint {}",
        total,
        state.step,
        state.epoch,
        final_path.display()
    );
    Ok(())
}
