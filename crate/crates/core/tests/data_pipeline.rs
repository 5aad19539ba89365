//! Dataset behavior: deterministic generation, schema enforcement, format
//! round trips, crop/resize coordinate algebra, and Gaussian target
//! construction.

use gle_core::data::{
    crop_and_resize, generate_synthetic_dataset, load_annotations, load_dataset_dir, load_samples,
    make_sample, plan_categories, read_ppm, render_target_heatmaps, save_annotations,
    write_dataset, write_ppm, Category, CoordTransform, Landmark, LandmarkAnnotation, Visibility,
    NUM_SLOTS, SLOT_NAMES,
};
use gle_core::rng::Rng;
use gle_core::{Error, Tensor};

const MIX: [f64; 3] = [0.4, 0.4, 0.2];

fn full_body_annotation() -> LandmarkAnnotation {
    let coords = [
        (10.0, 10.0),
        (30.0, 10.0),
        (5.0, 20.0),
        (35.0, 20.0),
        (12.0, 30.0),
        (28.0, 30.0),
        (8.0, 50.0),
        (32.0, 50.0),
    ];
    let mut landmarks = [Landmark::absent(); NUM_SLOTS];
    for (lm, (x, y)) in landmarks.iter_mut().zip(coords) {
        *lm = Landmark {
            x,
            y,
            visibility: Visibility::Visible,
        };
    }
    LandmarkAnnotation {
        image_id: "img_test".into(),
        category: Category::FullBody,
        bbox: [0.0, 0.0, 64.0, 64.0],
        landmarks,
    }
}

fn argmax_2d(channel: &[f64], size: usize) -> (usize, usize) {
    let mut best = 0usize;
    for (i, &v) in channel.iter().enumerate() {
        if v > channel[best] {
            best = i;
        }
    }
    (best % size, best / size) // (x, y)
}

#[test]
fn same_seed_generates_bitwise_identical_datasets() {
    let a = generate_synthetic_dataset(6, 48, 7, MIX).unwrap();
    let b = generate_synthetic_dataset(6, 48, 7, MIX).unwrap();
    assert_eq!(a.len(), b.len());
    for ((img_a, ann_a), (img_b, ann_b)) in a.iter().zip(&b) {
        assert!(img_a.bitwise_eq(img_b));
        assert_eq!(ann_a, ann_b);
    }
    let c = generate_synthetic_dataset(6, 48, 8, MIX).unwrap();
    assert!(
        a.iter().zip(&c).any(|((ia, _), (ic, _))| !ia.bitwise_eq(ic)),
        "different seeds must give different images"
    );
}

#[test]
fn category_mix_is_stratified_within_one() {
    let items = generate_synthetic_dataset(1000, 32, 3, MIX).unwrap();
    let mut counts = [0usize; 3];
    for (_, ann) in &items {
        match ann.category {
            Category::FullBody => counts[0] += 1,
            Category::Upper => counts[1] += 1,
            Category::Lower => counts[2] += 1,
        }
    }
    for (got, want) in counts.iter().zip([400usize, 400, 200]) {
        assert!(
            (*got as i64 - want as i64).abs() <= 1,
            "counts {counts:?} vs (400, 400, 200)"
        );
    }

    // the plan interleaves categories rather than emitting blocks
    let plan = plan_categories(1000, MIX, 3).unwrap();
    assert!(plan[..500].iter().any(|c| *c == Category::Lower));
}

#[test]
fn upper_category_has_absent_waistlines() {
    let items = generate_synthetic_dataset(40, 48, 11, [0.0, 1.0, 0.0]).unwrap();
    assert_eq!(items.len(), 40);
    for (_, ann) in &items {
        assert_eq!(ann.category, Category::Upper);
        assert_eq!(ann.landmarks[4].visibility, Visibility::Absent);
        assert_eq!(ann.landmarks[5].visibility, Visibility::Absent);
        for slot in [0usize, 1, 2, 3, 6, 7] {
            assert_ne!(ann.landmarks[slot].visibility, Visibility::Absent);
        }
    }
}

#[test]
fn generation_rejects_tiny_images_and_bad_mixes() {
    assert!(matches!(
        generate_synthetic_dataset(4, 16, 1, MIX),
        Err(Error::InvalidConfig(msg)) if msg.contains("too small")
    ));
    assert!(generate_synthetic_dataset(0, 64, 1, MIX).is_err());
    assert!(generate_synthetic_dataset(4, 64, 1, [0.5, 0.4, 0.2]).is_err());
    assert!(generate_synthetic_dataset(4, 64, 1, [0.5, 0.6, -0.1]).is_err());
}

#[test]
fn generated_samples_satisfy_all_invariants_over_many_seeds() {
    for seed in 0..1000u64 {
        let items = generate_synthetic_dataset(2, 48, seed, [0.34, 0.33, 0.33]).unwrap();
        for (image, ann) in &items {
            ann.validate().unwrap_or_else(|msg| {
                panic!("seed {seed} {}: schema violation: {msg}", ann.image_id)
            });
            ann.validate_bounds(48, 48).unwrap_or_else(|msg| {
                panic!("seed {seed} {}: bounds violation: {msg}", ann.image_id)
            });
            assert!(image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            let [x0, y0, x1, y1] = ann.bbox;
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 48.0 && y1 <= 48.0 && x1 > x0 && y1 > y0);
            // non-absent landmarks sit inside the annotated bbox
            for lm in &ann.landmarks {
                if lm.visibility != Visibility::Absent {
                    assert!(
                        lm.x > x0 && lm.x < x1 && lm.y > y0 && lm.y < y1,
                        "seed {seed}: landmark ({}, {}) outside bbox {:?}",
                        lm.x,
                        lm.y,
                        ann.bbox
                    );
                }
            }
            // left/right pairs follow image-space sides
            for (l, r) in [(0usize, 1usize), (2, 3), (4, 5), (6, 7)] {
                if ann.landmarks[l].visibility != Visibility::Absent {
                    assert!(ann.landmarks[l].x <= ann.landmarks[r].x);
                }
            }
        }
    }
}

#[test]
fn heatmap_peaks_sit_on_rounded_ground_truth_across_seeds() {
    let size = 48usize;
    for seed in 0..60u64 {
        let items = generate_synthetic_dataset(2, 64, seed, [0.34, 0.33, 0.33]).unwrap();
        for (image, ann) in &items {
            let sample = make_sample(image, ann, size, size as f64 / 32.0).unwrap();
            let plane = size * size;
            for slot in 0..NUM_SLOTS {
                let channel = &sample.target.data()[slot * plane..(slot + 1) * plane];
                if !sample.mask[slot] {
                    assert!(channel.iter().all(|&v| v == 0.0), "masked slot {slot} not zero");
                    continue;
                }
                let (gx, gy) = sample.gt_coords[slot];
                let (px, py) = argmax_2d(channel, size);
                assert_eq!(px as f64, gx.round().clamp(0.0, size as f64 - 1.0));
                assert_eq!(py as f64, gy.round().clamp(0.0, size as f64 - 1.0));
                assert_eq!(channel[py * size + px], 1.0, "peak must be exactly 1.0");
                // decode error stays within rounding distance per axis
                assert!((px as f64 - gx).abs() <= 0.5 + 1e-9);
                assert!((py as f64 - gy).abs() <= 0.5 + 1e-9);
            }
        }
    }
}

#[test]
fn annotations_round_trip_through_glefmt() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("anns.glefmt");
    let items = generate_synthetic_dataset(12, 48, 21, MIX).unwrap();
    let original: Vec<LandmarkAnnotation> = items.iter().map(|(_, a)| a.clone()).collect();
    save_annotations(&path, &original).unwrap();
    let loaded = load_annotations(&path).unwrap();
    assert_eq!(original, loaded);
}

#[test]
fn loader_reports_row_and_slot_of_invariant_violations() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("anns.glefmt");

    // well-formed 3-row file parses fully
    let items = generate_synthetic_dataset(3, 48, 22, MIX).unwrap();
    let anns: Vec<LandmarkAnnotation> = items.iter().map(|(_, a)| a.clone()).collect();
    save_annotations(&path, &anns).unwrap();
    assert_eq!(load_annotations(&path).unwrap().len(), 3);

    // an upper-category record with a waistline coordinate present
    let mut bad = anns[0].clone();
    bad.category = Category::Upper;
    for lm in bad.landmarks.iter_mut() {
        lm.visibility = Visibility::Visible;
    }
    save_annotations(&path, &[anns[0].clone(), bad]).unwrap();
    match load_annotations(&path) {
        Err(Error::Annotation { line, msg, .. }) => {
            assert_eq!(line, 3, "header is line 1, bad record is line 3");
            assert!(msg.contains("Waistline"), "error must name the slot: {msg}");
        }
        other => panic!("expected annotation error, got {other:?}"),
    }

    // bad header
    std::fs::write(&path, "glefmt v9\n").unwrap();
    assert!(matches!(
        load_annotations(&path),
        Err(Error::Annotation { line: 1, .. })
    ));
}

#[test]
fn ppm_round_trip_preserves_quantized_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("img.ppm");
    let mut rng = Rng::seed(31);
    let data: Vec<f64> = (0..3 * 20 * 17).map(|_| rng.uniform()).collect();
    let image = Tensor::from_vec(vec![3, 20, 17], data).unwrap();

    write_ppm(&path, &image).unwrap();
    let loaded = read_ppm(&path).unwrap();
    assert_eq!(loaded.shape(), &[3, 20, 17]);
    for (&orig, &back) in image.data().iter().zip(loaded.data()) {
        let quantized = (orig.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        assert_eq!(back, quantized);
    }

    // a second write is byte-identical
    let bytes1 = std::fs::read(&path).unwrap();
    write_ppm(&path, &image).unwrap();
    assert_eq!(bytes1, std::fs::read(&path).unwrap());
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let items = generate_synthetic_dataset(5, 48, 41, MIX).unwrap();
    write_dataset(dir.path(), &items).unwrap();
    let loaded = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 5);
    for ((img, ann), (limg, lann)) in items.iter().zip(&loaded) {
        assert_eq!(ann, lann);
        assert_eq!(img.shape(), limg.shape());
    }
    // loading into samples works end to end
    let samples = load_samples(dir.path(), 32, 1.5).unwrap();
    assert_eq!(samples.len(), 5);
    for s in &samples {
        assert_eq!(s.image.shape(), &[3, 32, 32]);
        assert_eq!(s.target.shape(), &[8, 32, 32]);
    }
}

#[test]
fn full_image_crop_is_the_identity() {
    let mut rng = Rng::seed(51);
    let data: Vec<f64> = (0..3 * 40 * 40).map(|_| rng.uniform()).collect();
    let image = Tensor::from_vec(vec![3, 40, 40], data).unwrap();
    let (resized, t) = crop_and_resize(&image, [0.0, 0.0, 40.0, 40.0], 40).unwrap();
    assert_eq!(t, CoordTransform::identity());
    assert!(resized.bitwise_eq(&image), "identity crop must copy pixels exactly");
}

#[test]
fn crop_transform_matches_the_affine_examples() {
    let image = Tensor::zeros(&[3, 120, 120]);
    let (resized, t) = crop_and_resize(&image, [0.0, 0.0, 100.0, 100.0], 224).unwrap();
    assert_eq!(resized.shape(), &[3, 224, 224]);
    assert!((t.sx - 2.24).abs() < 1e-12);
    assert!((t.sy - 2.24).abs() < 1e-12);
    let (x, y) = t.apply(50.0, 50.0);
    assert!((x - 112.0).abs() < 1e-12);
    assert!((y - 112.0).abs() < 1e-12);

    // a landmark on the bbox corner maps to the origin
    let (t2_img, t2) = crop_and_resize(&image, [15.0, 22.0, 95.0, 102.0], 64).unwrap();
    assert_eq!(t2_img.shape(), &[3, 64, 64]);
    assert_eq!(t2.apply(15.0, 22.0), (0.0, 0.0));

    // transform composed with its inverse returns original coordinates
    let inv = t2.inverse();
    for (x, y) in [(15.0, 22.0), (40.5, 60.25), (94.9, 101.0)] {
        let (u, v) = t2.apply(x, y);
        let (bx, by) = inv.apply(u, v);
        assert!((bx - x).abs() < 0.5 && (by - y).abs() < 0.5);
        assert!((bx - x).abs() < 1e-9, "round trip should be exact to float noise");
    }
}

#[test]
fn crop_rejects_degenerate_and_disjoint_boxes() {
    let image = Tensor::zeros(&[3, 32, 32]);
    for bbox in [
        [10.0, 10.0, 10.0, 20.0], // zero width
        [10.0, 25.0, 20.0, 25.0], // zero height
        [20.0, 10.0, 10.0, 20.0], // inverted
        [40.0, 0.0, 60.0, 20.0],  // disjoint from the image
    ] {
        assert!(
            crop_and_resize(&image, bbox, 16).is_err(),
            "bbox {bbox:?} must be rejected"
        );
    }
}

#[test]
fn gaussian_example_at_sigma_two() {
    let ann = full_body_annotation();
    let size = 64usize;
    let (maps, mask, coords) =
        render_target_heatmaps(&ann, &CoordTransform::identity(), size, 2.0).unwrap();
    assert!(mask.iter().all(|&m| m));
    assert_eq!(coords[0], (10.0, 10.0));

    let plane = size * size;
    let channel = &maps.data()[..plane];
    assert_eq!(channel[10 * size + 10], 1.0, "peak value must be exactly 1");
    let expected = (-0.125f64).exp();
    assert!((channel[11 * size + 10] - expected).abs() < 1e-12, "(10,11) one row below");
    assert!((channel[10 * size + 11] - expected).abs() < 1e-12, "(11,10) one column right");
    assert!(maps.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn masked_slots_are_zero_and_channels_do_not_bleed() {
    let mut ann = full_body_annotation();
    ann.category = Category::Upper;
    ann.landmarks[4] = Landmark::absent();
    ann.landmarks[5] = Landmark::absent();
    ann.landmarks[2].visibility = Visibility::Occluded;

    let size = 64usize;
    let (maps, mask, _) =
        render_target_heatmaps(&ann, &CoordTransform::identity(), size, 2.0).unwrap();
    let plane = size * size;

    for slot in [2usize, 4, 5] {
        assert!(!mask[slot], "slot {} must be masked out", SLOT_NAMES[slot]);
        let channel = &maps.data()[slot * plane..(slot + 1) * plane];
        assert!(channel.iter().all(|&v| v == 0.0));
    }

    // slot 0 peaks at (10,10); slot 1 peaks at (30,10); no cross-channel sum
    let c0 = &maps.data()[..plane];
    let d = 20.0f64; // distance between the two peaks
    let expected_tail = (-(d * d) / 8.0).exp();
    assert!((c0[10 * size + 30] - expected_tail).abs() < 1e-12);

    // sigma must be positive
    assert!(render_target_heatmaps(&ann, &CoordTransform::identity(), size, 0.0).is_err());
}

#[test]
fn occluded_landmarks_appear_and_are_masked() {
    let mut found = false;
    'outer: for seed in 0..50u64 {
        let items = generate_synthetic_dataset(2, 48, seed, [0.34, 0.33, 0.33]).unwrap();
        for (image, ann) in &items {
            if ann
                .landmarks
                .iter()
                .any(|lm| lm.visibility == Visibility::Occluded)
            {
                let sample = make_sample(image, ann, 48, 1.5).unwrap();
                for (slot, lm) in ann.landmarks.iter().enumerate() {
                    assert_eq!(
                        sample.mask[slot],
                        lm.visibility == Visibility::Visible,
                        "mask true iff visible"
                    );
                }
                found = true;
                break 'outer;
            }
        }
    }
    assert!(found, "no occluded landmark in 100 generated images");
}

#[test]
fn golden_annotation_file_loads_and_round_trips() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.glefmt");
    let anns = load_annotations(&path).unwrap();
    assert_eq!(anns.len(), 3, "comments and blank lines must be skipped");

    let full = &anns[0];
    assert_eq!(full.image_id, "img_full");
    assert_eq!(full.category, Category::FullBody);
    assert_eq!(full.bbox, [10.0, 4.0, 52.0, 60.0]);
    assert_eq!((full.landmarks[0].x, full.landmarks[0].y), (18.0, 9.0));
    assert_eq!(full.landmarks[2].visibility, Visibility::Occluded);
    assert!(full
        .landmarks
        .iter()
        .all(|lm| lm.visibility != Visibility::Absent));

    let upper = &anns[1];
    assert_eq!(upper.category, Category::Upper);
    for slot in [4, 5] {
        assert_eq!(upper.landmarks[slot].visibility, Visibility::Absent);
        assert_eq!((upper.landmarks[slot].x, upper.landmarks[slot].y), (0.0, 0.0));
    }
    assert_eq!((upper.landmarks[7].x, upper.landmarks[7].y), (50.0, 38.0));

    let lower = &anns[2];
    assert_eq!(lower.category, Category::Lower);
    for slot in 0..4 {
        assert_eq!(lower.landmarks[slot].visibility, Visibility::Absent);
    }
    assert_eq!(lower.landmarks[5].visibility, Visibility::Occluded);

    // save -> load returns the same records (comments are not preserved,
    // the data is)
    let dir = tempfile::tempdir().unwrap();
    let copy = dir.path().join("copy.glefmt");
    save_annotations(&copy, &anns).unwrap();
    assert_eq!(load_annotations(&copy).unwrap(), anns);
}
