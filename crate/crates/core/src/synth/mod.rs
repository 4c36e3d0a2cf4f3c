//! Synthetic training data: sampled body parameters rendered to silhouette or
//! part-label images with matching meshes, keypoints and cameras.

mod dataset;
mod raster;

pub use dataset::{
    generate_dataset, render_sample, sample_camera, sample_params, Dataset, DatasetManifest, GenerateOptions,
    InputMode, ManifestEntry, SamplingRanges, Split, TrainingSample, MANIFEST_FILE, MODEL_FILE,
};
pub use raster::{pixel_center, rasterize, Shading};
