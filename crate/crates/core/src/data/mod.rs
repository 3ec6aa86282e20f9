//! Annotations, category splits, episodic sampling, preprocessing and the
//! synthetic dataset generator.

mod annotation;
mod episode;
mod preprocess;
mod split;
pub mod synthetic;

pub use annotation::{
    load_annotations, resolve, save_annotations, to_annotation_file, AnnotationFile, AnnotationRecord, BBox,
    CategoryDef, ImageRecord, ImageRef, ImageStore, InstanceAnnotation, Keypoint, Visibility,
};
pub use episode::{sample_episode, Episode, EpisodeSampler};
pub use preprocess::{crop_transform, preprocess, Affine2, PreprocessConfig, ProcessedSample, PIXEL_MEAN, PIXEL_STD};
pub use split::DatasetSplit;
pub use synthetic::{generate_synthetic, render_synthetic, ShapeFamily, SplitRole, SynthConfig, SynthDataset};
