//! Preprocessing: bbox crop + bilinear resize with an explicit coordinate
//! transform, Gaussian target-heatmap rendering, and dataset directory I/O.

use std::path::Path;

use crate::data::annot::{
    load_annotations, save_annotations, Category, LandmarkAnnotation, Visibility, NUM_SLOTS,
};
use crate::data::ppm::{read_ppm, write_ppm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ANNOTATION_FILE: &str = "annotations.glefmt";

/// Standard target peak width: 7 px at the standard 224 input.
pub fn default_sigma(size: usize) -> f64 {
    size as f64 / 32.0
}

/// The affine map from original-image pixel coordinates to resized-crop
/// coordinates: x' = (x - x0) * sx, y' = (y - y0) * sy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordTransform {
    pub sx: f64,
    pub sy: f64,
    pub x0: f64,
    pub y0: f64,
}

impl CoordTransform {
    pub fn identity() -> Self {
        CoordTransform {
            sx: 1.0,
            sy: 1.0,
            x0: 0.0,
            y0: 0.0,
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.x0) * self.sx, (y - self.y0) * self.sy)
    }

    /// The inverse map, resized-crop coordinates back to original pixels.
    pub fn inverse(&self) -> CoordTransform {
        CoordTransform {
            sx: 1.0 / self.sx,
            sy: 1.0 / self.sy,
            x0: -self.x0 * self.sx,
            y0: -self.y0 * self.sy,
        }
    }
}

/// Crop `image` ([3,H,W], values in [0,1]) to `bbox` and bilinearly resize to
/// `target_size` square. Returns the resized crop and the coordinate
/// transform that maps original landmark coordinates into it.
pub fn crop_and_resize(
    image: &Tensor,
    bbox: [f64; 4],
    target_size: usize,
) -> Result<(Tensor, CoordTransform)> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "crop_and_resize",
            detail: format!("expected [3,H,W] image, got {shape:?}"),
        });
    }
    if target_size == 0 {
        return Err(Error::InvalidConfig("target_size must be >= 1".into()));
    }
    let (h, w) = (shape[1], shape[2]);
    let [x0, y0, x1, y1] = bbox;
    if !bbox.iter().all(|v| v.is_finite()) || x1 <= x0 || y1 <= y0 {
        return Err(Error::InvalidConfig(format!(
            "degenerate bbox ({x0}, {y0}, {x1}, {y1})"
        )));
    }
    if x1 <= 0.0 || y1 <= 0.0 || x0 >= w as f64 || y0 >= h as f64 {
        return Err(Error::InvalidConfig(format!(
            "bbox ({x0}, {y0}, {x1}, {y1}) does not intersect the {w}x{h} image"
        )));
    }

    let s = target_size as f64;
    let transform = CoordTransform {
        sx: s / (x1 - x0),
        sy: s / (y1 - y0),
        x0,
        y0,
    };

    // sample output pixel centers through the inverse map (edge-clamped)
    let plane_in = h * w;
    let plane_out = target_size * target_size;
    let data = image.data();
    let mut out = vec![0.0f64; 3 * plane_out];
    for v in 0..target_size {
        let sy_pos = (v as f64 + 0.5) / transform.sy + y0 - 0.5;
        let fy = sy_pos.floor();
        let wy = sy_pos - fy;
        let iy0 = (fy as isize).clamp(0, h as isize - 1) as usize;
        let iy1 = (fy as isize + 1).clamp(0, h as isize - 1) as usize;
        for u in 0..target_size {
            let sx_pos = (u as f64 + 0.5) / transform.sx + x0 - 0.5;
            let fx = sx_pos.floor();
            let wx = sx_pos - fx;
            let ix0 = (fx as isize).clamp(0, w as isize - 1) as usize;
            let ix1 = (fx as isize + 1).clamp(0, w as isize - 1) as usize;
            for c in 0..3 {
                let base = c * plane_in;
                let p00 = data[base + iy0 * w + ix0];
                let p01 = data[base + iy0 * w + ix1];
                let p10 = data[base + iy1 * w + ix0];
                let p11 = data[base + iy1 * w + ix1];
                let top = p00 + (p01 - p00) * wx;
                let bottom = p10 + (p11 - p10) * wx;
                out[c * plane_out + v * target_size + u] = top + (bottom - top) * wy;
            }
        }
    }
    let resized = Tensor::from_vec(vec![3, target_size, target_size], out)?;
    Ok((resized, transform))
}

/// Render per-slot Gaussian target heatmaps. Each visible slot gets
/// channel(u,v) = exp(-((u-x)^2 + (v-y)^2) / (2 sigma^2)) centered on the
/// rounded transformed landmark, so the peak value is exactly 1.0 there.
/// Occluded and absent slots yield all-zero channels and mask false.
/// Returns (heatmaps [8,S,S], mask, per-slot transformed coordinates).
pub fn render_target_heatmaps(
    annotation: &LandmarkAnnotation,
    transform: &CoordTransform,
    size: usize,
    sigma: f64,
) -> Result<(Tensor, [bool; NUM_SLOTS], [(f64, f64); NUM_SLOTS])> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidConfig(format!("sigma must be > 0, got {sigma}")));
    }
    if size == 0 {
        return Err(Error::InvalidConfig("heatmap size must be >= 1".into()));
    }

    let plane = size * size;
    let mut maps = vec![0.0f64; NUM_SLOTS * plane];
    let mut mask = [false; NUM_SLOTS];
    let mut coords = [(0.0f64, 0.0f64); NUM_SLOTS];
    let denom = 2.0 * sigma * sigma;

    for (slot, lm) in annotation.landmarks.iter().enumerate() {
        if lm.visibility == Visibility::Absent {
            continue;
        }
        let (tx, ty) = transform.apply(lm.x, lm.y);
        coords[slot] = (tx, ty);
        if lm.visibility != Visibility::Visible {
            continue;
        }
        mask[slot] = true;
        let px = tx.round().clamp(0.0, size as f64 - 1.0);
        let py = ty.round().clamp(0.0, size as f64 - 1.0);
        let channel = &mut maps[slot * plane..(slot + 1) * plane];
        for v in 0..size {
            let dy = v as f64 - py;
            for u in 0..size {
                let dx = u as f64 - px;
                channel[v * size + u] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }

    let maps = Tensor::from_vec(vec![NUM_SLOTS, size, size], maps)?;
    Ok((maps, mask, coords))
}

/// One training/eval example: resized image, rendered targets, loss/metric
/// mask, and ground-truth coordinates in resized-image pixels.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image_id: String,
    pub category: Category,
    pub image: Tensor,
    pub target: Tensor,
    pub mask: [bool; NUM_SLOTS],
    pub gt_coords: [(f64, f64); NUM_SLOTS],
}

/// Build a [`Sample`] from a raw image and its annotation: crop to the
/// annotated bbox, resize, and render targets through the same transform.
pub fn make_sample(
    image: &Tensor,
    annotation: &LandmarkAnnotation,
    target_size: usize,
    sigma: f64,
) -> Result<Sample> {
    let (resized, transform) = crop_and_resize(image, annotation.bbox, target_size)?;
    let (target, mask, gt_coords) =
        render_target_heatmaps(annotation, &transform, target_size, sigma)?;
    Ok(Sample {
        image_id: annotation.image_id.clone(),
        category: annotation.category,
        image: resized,
        target,
        mask,
        gt_coords,
    })
}

/// Write a generated dataset as PPM files plus one annotation file.
pub fn write_dataset(dir: &Path, items: &[(Tensor, LandmarkAnnotation)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (image, ann) in items {
        write_ppm(&dir.join(format!("{}.ppm", ann.image_id)), image)?;
    }
    let annotations: Vec<LandmarkAnnotation> = items.iter().map(|(_, a)| a.clone()).collect();
    save_annotations(&dir.join(ANNOTATION_FILE), &annotations)
}

/// Load a dataset directory written by [`write_dataset`]: annotations plus
/// one PPM per record, with visible landmarks checked against image bounds.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<(Tensor, LandmarkAnnotation)>> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let annotations = load_annotations(&ann_path)?;
    let mut items = Vec::with_capacity(annotations.len());
    for (i, ann) in annotations.into_iter().enumerate() {
        let image = read_ppm(&dir.join(format!("{}.ppm", ann.image_id)))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        ann.validate_bounds(w, h).map_err(|msg| Error::Annotation {
            file: ann_path.display().to_string(),
            line: i + 2, // header is line 1, records follow in order
            msg,
        })?;
        items.push((image, ann));
    }
    Ok(items)
}

/// Load a dataset directory straight into preprocessed samples.
pub fn load_samples(dir: &Path, target_size: usize, sigma: f64) -> Result<Vec<Sample>> {
    load_dataset_dir(dir)?
        .iter()
        .map(|(image, ann)| make_sample(image, ann, target_size, sigma))
        .collect()
}
