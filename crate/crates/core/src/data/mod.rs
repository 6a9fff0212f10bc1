//! Images, label maps, synthetic scenes, corruptions and dataset files.

pub mod corrupt;
pub mod dataset;
mod image;
pub mod netpbm;
pub mod synth;

pub use corrupt::{corrupt, psnr, CorruptionKind, CorruptionSpec};
pub use dataset::{build_splits, split_dir, Dataset, Manifest, Sample, Split};
pub use image::{quantize, LabelMap, RgbImage, IGNORE_LABEL};
pub use synth::{generate_scene, SceneSpec};
