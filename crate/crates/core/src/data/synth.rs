//! Deterministic synthetic garment renderer. Each image is a parametric
//! figure — trapezoid torso, capsule sleeve strokes, a contrasting hem
//! stripe — over a noisy background, with landmark ground truth placed
//! analytically at the rendered structural points.

use crate::data::annot::{Category, Landmark, LandmarkAnnotation, Visibility, NUM_SLOTS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MIN_IMAGE_SIZE: usize = 32;
const OCCLUSION_RATE: f64 = 0.15;

#[derive(Clone, Copy)]
struct Point {
    x: f64,
    y: f64,
}

struct Figure {
    /// Convex torso quad, clockwise.
    torso: [Point; 4],
    /// Sleeve strokes as (start, end, radius); empty for lower garments.
    sleeves: Vec<(Point, Point, f64)>,
    /// Hem segment for the contrast stripe.
    hem: (Point, Point),
    /// Landmark positions by canonical slot; `None` where the category has
    /// no such landmark.
    landmarks: [Option<Point>; NUM_SLOTS],
}

/// Generate `n` images with annotations. The category of each image follows
/// a deterministic stratified assignment of the given (full_body, upper,
/// lower) proportions; every image is rendered from its own seeded stream,
/// so the dataset is reproducible bit for bit and images may be rendered in
/// parallel.
pub fn generate_synthetic_dataset(
    n: usize,
    image_size: usize,
    seed: u64,
    category_mix: [f64; 3],
) -> Result<Vec<(Tensor, LandmarkAnnotation)>> {
    let categories = plan_categories(n, category_mix, seed)?;
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::InvalidConfig(format!(
            "image_size {image_size} too small, figures need at least {MIN_IMAGE_SIZE}"
        )));
    }
    categories
        .into_iter()
        .enumerate()
        .map(|(i, category)| {
            let mut rng = Rng::seed_stream(seed, 1 + i as u64);
            let (image, mut ann) = render_garment(&mut rng, image_size, category);
            ann.image_id = format!("img_{i:05}");
            Ok((image, ann))
        })
        .collect()
}

/// Stratified category counts by largest remainder, then a seeded shuffle so
/// categories interleave instead of arriving in blocks.
pub fn plan_categories(n: usize, mix: [f64; 3], seed: u64) -> Result<Vec<Category>> {
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size n must be >= 1".into()));
    }
    if mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "category mix {mix:?} must be non-negative"
        )));
    }
    let total: f64 = mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "category mix {mix:?} sums to {total}, expected 1"
        )));
    }

    let mut counts = [0usize; 3];
    let mut remainders: Vec<(usize, f64)> = Vec::new();
    let mut assigned = 0usize;
    for (i, p) in mix.iter().enumerate() {
        let exact = p * n as f64;
        counts[i] = exact.floor() as usize;
        assigned += counts[i];
        remainders.push((i, exact - exact.floor()));
    }
    // distribute leftovers by largest fractional part, ties by index
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for k in 0..(n - assigned) {
        counts[remainders[k % 3].0] += 1;
    }

    let kinds = [Category::FullBody, Category::Upper, Category::Lower];
    let mut plan = Vec::with_capacity(n);
    for (kind, &count) in kinds.iter().zip(&counts) {
        plan.extend(std::iter::repeat(*kind).take(count));
    }
    let mut rng = Rng::seed_stream(seed, 0);
    rng.shuffle(&mut plan);
    Ok(plan)
}

fn render_garment(rng: &mut Rng, size: usize, category: Category) -> (Tensor, LandmarkAnnotation) {
    let s_img = size as f64;

    // geometry: retry with a smaller figure until all landmarks fit
    let mut figure;
    let mut attempt = 0usize;
    loop {
        let shrink = 0.88f64.powi(attempt as i32);
        figure = propose_figure(rng, s_img, category, shrink);
        let fits = figure.landmarks.iter().flatten().all(|p| {
            p.x >= 2.0 && p.y >= 2.0 && p.x <= s_img - 3.0 && p.y <= s_img - 3.0
        });
        if fits || attempt >= 16 {
            break;
        }
        attempt += 1;
    }

    // left/right slots follow image-space sides within each pair
    for pair in [(0usize, 1usize), (2, 3), (4, 5), (6, 7)] {
        if let (Some(a), Some(b)) = (figure.landmarks[pair.0], figure.landmarks[pair.1]) {
            if a.x > b.x {
                figure.landmarks[pair.0] = Some(b);
                figure.landmarks[pair.1] = Some(a);
            }
        }
    }

    // appearance
    let garment = [rng.range(0.25, 0.9), rng.range(0.25, 0.9), rng.range(0.25, 0.9)];
    let sleeve_color = [rng.range(0.25, 0.9), rng.range(0.25, 0.9), rng.range(0.25, 0.9)];
    let trim = rng.range(0.45, 0.75);
    let bg_base = rng.range(0.05, 0.35);
    let noise_amp = rng.range(0.01, 0.05);

    // visibility: each present landmark may be occluded; occluders are drawn
    let mut landmarks = [Landmark::absent(); NUM_SLOTS];
    let mut occluders: Vec<(Point, f64, [f64; 3])> = Vec::new();
    for (slot, lm) in landmarks.iter_mut().enumerate() {
        if let Some(p) = figure.landmarks[slot] {
            let occluded = rng.uniform() < OCCLUSION_RATE;
            let visibility = if occluded {
                let color = [rng.range(0.1, 0.95), rng.range(0.1, 0.95), rng.range(0.1, 0.95)];
                occluders.push((p, s_img * rng.range(0.03, 0.05), color));
                Visibility::Occluded
            } else {
                Visibility::Visible
            };
            *lm = Landmark {
                x: p.x,
                y: p.y,
                visibility,
            };
        }
    }

    // raster, painter's order: background, torso, stripe, sleeves, occluders
    let plane = size * size;
    let mut data = vec![0.0f64; 3 * plane];
    let hem_width = (s_img * 0.02).max(1.2);
    for py in 0..size {
        for px in 0..size {
            let p = Point {
                x: px as f64,
                y: py as f64,
            };
            let noise = bg_base + noise_amp * (rng.uniform() * 2.0 - 1.0);
            let mut color = [noise, noise, noise];
            if point_in_quad(p, &figure.torso) {
                color = garment;
                if segment_distance(p, figure.hem.0, figure.hem.1) <= hem_width {
                    color = [garment[0] * trim, garment[1] * trim, garment[2] * trim];
                }
            }
            for &(a, b, r) in &figure.sleeves {
                if segment_distance(p, a, b) <= r {
                    color = sleeve_color;
                }
            }
            for &(center, radius, occ_color) in &occluders {
                let (dx, dy) = (p.x - center.x, p.y - center.y);
                if dx * dx + dy * dy <= radius * radius {
                    color = occ_color;
                }
            }
            let idx = py * size + px;
            for c in 0..3 {
                data[c * plane + idx] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::from_vec(vec![3, size, size], data).expect("raster values are finite");

    // tight bbox over the geometry with a small margin, clipped to the image
    let mut min_x = f64::INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut include = |p: Point, r: f64| {
        min_x = min_x.min(p.x - r);
        min_y = min_y.min(p.y - r);
        max_x = max_x.max(p.x + r);
        max_y = max_y.max(p.y + r);
    };
    for &corner in &figure.torso {
        include(corner, 0.0);
    }
    for &(a, b, r) in &figure.sleeves {
        include(a, r);
        include(b, r);
    }
    let margin = s_img * 0.04;
    let bbox = [
        (min_x - margin).max(0.0),
        (min_y - margin).max(0.0),
        (max_x + margin).min(s_img - 1.0),
        (max_y + margin).min(s_img - 1.0),
    ];

    let ann = LandmarkAnnotation {
        image_id: String::new(), // assigned by the caller
        category,
        bbox,
        landmarks,
    };
    debug_assert!(ann.validate().is_ok(), "generator broke its own schema");
    (image, ann)
}

/// Draw one candidate figure. The rotation is kept small enough that the
/// garment's left side stays on the image's left.
fn propose_figure(rng: &mut Rng, s_img: f64, category: Category, shrink: f64) -> Figure {
    let s = s_img * rng.range(0.20, 0.28) * shrink;
    let cx = s_img * 0.5 + s_img * rng.range(-0.08, 0.08);
    let cy = s_img * 0.5 + s_img * rng.range(-0.08, 0.08);
    let angle = rng.range(-0.25, 0.25);
    let (sin, cos) = angle.sin_cos();
    let place = |x: f64, y: f64| Point {
        x: x * cos - y * sin + cx,
        y: x * sin + y * cos + cy,
    };

    let mut landmarks: [Option<Point>; NUM_SLOTS] = [None; NUM_SLOTS];
    match category {
        Category::FullBody | Category::Upper => {
            let w_sh = s * rng.range(0.45, 0.62);
            let w_hem = s * rng.range(0.50, 0.78);
            let collar_dx = s * rng.range(0.12, 0.20);
            let sleeve_len = s * rng.range(0.35, 0.60);
            let sleeve_drop = s * rng.range(0.45, 0.90);
            let sleeve_r = s * rng.range(0.10, 0.16);

            let torso = [
                place(-w_sh, -s),
                place(w_sh, -s),
                place(w_hem, s),
                place(-w_hem, s),
            ];
            let sleeves = vec![
                (
                    place(-w_sh, -s),
                    place(-(w_sh + sleeve_len), -s + sleeve_drop),
                    sleeve_r,
                ),
                (
                    place(w_sh, -s),
                    place(w_sh + sleeve_len, -s + sleeve_drop),
                    sleeve_r,
                ),
            ];
            landmarks[0] = Some(place(-collar_dx, -s));
            landmarks[1] = Some(place(collar_dx, -s));
            landmarks[2] = Some(sleeves[0].1);
            landmarks[3] = Some(sleeves[1].1);
            if category == Category::FullBody {
                let y_w = s * rng.range(-0.15, 0.15);
                // torso edge width at waist height, by linear interpolation
                let t = (y_w + s) / (2.0 * s);
                let w_at = w_sh + (w_hem - w_sh) * t;
                landmarks[4] = Some(place(-w_at, y_w));
                landmarks[5] = Some(place(w_at, y_w));
            }
            landmarks[6] = Some(place(-w_hem, s));
            landmarks[7] = Some(place(w_hem, s));
            Figure {
                torso,
                sleeves,
                hem: (place(-w_hem, s), place(w_hem, s)),
                landmarks,
            }
        }
        Category::Lower => {
            let w_top = s * rng.range(0.35, 0.55);
            let w_bot = s * rng.range(0.50, 0.80);
            let torso = [
                place(-w_top, -s),
                place(w_top, -s),
                place(w_bot, s),
                place(-w_bot, s),
            ];
            landmarks[4] = Some(place(-w_top, -s));
            landmarks[5] = Some(place(w_top, -s));
            landmarks[6] = Some(place(-w_bot, s));
            landmarks[7] = Some(place(w_bot, s));
            Figure {
                torso,
                sleeves: Vec::new(),
                hem: (place(-w_bot, s), place(w_bot, s)),
                landmarks,
            }
        }
    }
}

/// Inside test for a convex quad given in consistent winding order.
fn point_in_quad(p: Point, quad: &[Point; 4]) -> bool {
    let mut sign = 0i8;
    for i in 0..4 {
        let a = quad[i];
        let b = quad[(i + 1) % 4];
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        let s = if cross > 0.0 {
            1i8
        } else if cross < 0.0 {
            -1
        } else {
            0
        };
        if s != 0 {
            if sign == 0 {
                sign = s;
            } else if s != sign {
                return false;
            }
        }
    }
    true
}

/// Distance from `p` to the segment `ab`.
fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (abx, aby) = (b.x - a.x, b.y - a.y);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * abx + (p.y - a.y) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (p.x - (a.x + t * abx), p.y - (a.y + t * aby));
    (dx * dx + dy * dy).sqrt()
}
