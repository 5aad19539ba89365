//! `gle predict`: run a checkpoint over a dataset directory, writing per
//! image a decoded-coordinates text file and an overlay PPM (left-side
//! landmarks yellow, right-side red). `--dump-heatmaps` adds the eight raw
//! heatmap channels as grayscale PGMs.

use crate::{create_dir, write_file, CliResult};
use clap::Args;
use gle_core::autodiff::GradTape;
use gle_core::data::pipeline::default_sigma;
use gle_core::data::{load_dataset_dir, make_sample, write_pgm, write_ppm, NUM_SLOTS, SLOT_NAMES};
use gle_core::eval::decode_heatmaps;
use gle_core::train::load_checkpoint;
use gle_core::Tensor;
use std::path::PathBuf;

#[derive(Args)]
pub struct PredictArgs {
    /// Checkpoint to run
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory (images + annotations.glefmt)
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Also write each heatmap channel as a grayscale PGM
    #[arg(long)]
    pub dump_heatmaps: bool,
    /// Heatmap Gaussian width used for target bookkeeping (default: input_size / 32)
    #[arg(long)]
    pub sigma: Option<f64>,
}

const LEFT_COLOR: [f64; 3] = [1.0, 1.0, 0.0]; // yellow
const RIGHT_COLOR: [f64; 3] = [1.0, 0.0, 0.0]; // red

/// Paint a small cross centered at (x, y); arms clamp at the image border.
fn draw_cross(image: &mut Tensor, x: usize, y: usize, color: [f64; 3]) {
    let shape = image.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let data = image.data_mut();
    let mut paint = |px: usize, py: usize| {
        for (c, &v) in color.iter().enumerate() {
            data[(c * h + py) * w + px] = v;
        }
    };
    for d in -2i64..=2 {
        let ax = x as i64 + d;
        if ax >= 0 && (ax as usize) < w {
            paint(ax as usize, y);
        }
        let ay = y as i64 + d;
        if ay >= 0 && (ay as usize) < h {
            paint(x, ay as usize);
        }
    }
}

/// Min-max normalize one heatmap channel into [0, 1] for PGM export.
fn normalized_plane(data: &[f64], h: usize, w: usize) -> Tensor {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = if hi > lo {
        data.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; data.len()]
    };
    Tensor::from_vec(vec![h, w], scaled).expect("plane dims")
}

pub fn run(args: &PredictArgs) -> CliResult {
    let mut state = load_checkpoint(&args.checkpoint)?;
    let input_size = state.net.config.input_size;
    let sigma = args.sigma.unwrap_or_else(|| default_sigma(input_size));
    let items = load_dataset_dir(&args.data)?;
    create_dir(&args.out)?;

    for (image, ann) in &items {
        let sample = make_sample(image, ann, input_size, sigma)?;
        let shape = sample.image.shape().to_vec();
        let batched = Tensor::from_vec(
            vec![1, shape[0], shape[1], shape[2]],
            sample.image.data().to_vec(),
        )?;
        let mut tape = GradTape::new();
        let input = tape.leaf(batched)?;
        let output = state.net.forward(&mut tape, &mut state.store, input, false)?;
        let heatmaps = tape.value(output);
        let decoded = decode_heatmaps(heatmaps)?[0];

        // Slots that exist for this garment category (absent ones are
        // neither listed nor drawn).
        let absent = ann.category.absent_slots();
        let mut coords_text = String::new();
        let mut overlay = sample.image.clone();
        for slot in 0..NUM_SLOTS {
            if absent.contains(&slot) {
                continue;
            }
            let (x, y) = decoded[slot];
            coords_text.push_str(&format!("{} {} {}\n", SLOT_NAMES[slot], x, y));
            let color = if slot % 2 == 0 { LEFT_COLOR } else { RIGHT_COLOR };
            draw_cross(&mut overlay, x, y, color);
        }

        let id = &sample.image_id;
        write_file(&args.out.join(format!("{id}.coords.txt")), coords_text.as_bytes())?;
        write_ppm(&args.out.join(format!("{id}.overlay.ppm")), &overlay)?;

        if args.dump_heatmaps {
            let hshape = heatmaps.shape();
            let (h, w) = (hshape[2], hshape[3]);
            let plane = h * w;
            for slot in 0..NUM_SLOTS {
                let channel = &heatmaps.data()[slot * plane..(slot + 1) * plane];
                let pgm = normalized_plane(channel, h, w);
                write_pgm(&args.out.join(format!("{id}.hm{slot}.pgm")), &pgm)?;
            }
        }
        crate::sayln!(
            "{id}: wrote coords + overlay{}",
            if args.dump_heatmaps {
                format!(" + {NUM_SLOTS} heatmaps")
            } else {
                String::new()
            }
        );
    }
    crate::sayln!("predicted {} images into {}", items.len(), args.out.display());
    Ok(())
}
