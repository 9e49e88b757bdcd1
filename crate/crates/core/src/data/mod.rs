//! Labelled images: PPM/PGM I/O, a procedural distortion generator, CSV
//! manifests and group-aware splits.

mod image;
mod manifest;
mod synth;

pub use image::Image;
pub use manifest::{split, split_fixed_test, ImageRef, Manifest, Sample};
pub use synth::{apply_distortion, gen_base_images, gen_synthetic_dataset, DistortionKind, DistortionSpec};
