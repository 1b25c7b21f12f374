//! Frames and datasets: raster I/O, colour-to-sketch conversion, triplet
//! datasets and training augmentation.

mod augment;
mod dataset;
mod raster;
mod sketchize;

pub use augment::{augment, AugmentParams, AugmentPlan};
pub use dataset::{
    build_dataset, list_clips, list_frames, triplet_count, BuildOptions, DatasetEntry, DatasetIndex,
    sketchize_tree, SkippedClip, Triplet, MANIFEST_NAME, SKETCH_MANIFEST_NAME,
};
pub use raster::{load_raster, Raster, MIN_SIDE};
pub use sketchize::{sketchize, stroke_mask, thin, SketchParams};
