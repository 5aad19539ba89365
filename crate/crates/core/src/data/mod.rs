//! Synthetic dataset generation, annotation I/O, preprocessing, and target
//! heatmap rendering.

pub mod annot;
pub mod pipeline;
pub mod ppm;
pub mod synth;

pub use annot::{
    load_annotations, save_annotations, Category, Landmark, LandmarkAnnotation, Visibility,
    FORMAT_HEADER, NUM_SLOTS, SLOT_NAMES,
};
pub use pipeline::{
    crop_and_resize, default_sigma, load_dataset_dir, load_samples, make_sample,
    render_target_heatmaps, write_dataset, CoordTransform, Sample, ANNOTATION_FILE,
};
pub use ppm::{read_ppm, write_pgm, write_ppm};
pub use synth::{generate_synthetic_dataset, plan_categories, MIN_IMAGE_SIZE};
