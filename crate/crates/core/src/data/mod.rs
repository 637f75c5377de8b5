//! Dataset ingestion, synthetic generation and ground-truth construction.

mod labels;
mod record;
mod sampling;
mod segmap;
mod synth;

pub use labels::{label_patch, CrowdClass, DatasetStats};
pub use record::{load_dataset, load_image, write_dataset, ImageRecord, ManifestEntry, Point};
pub use sampling::{
    crop_resized, sample_training_patches, sample_training_patches_sized, DEFAULT_CROP_SIZES,
};
pub use segmap::{make_gt_segmap, make_gt_segmap_sized, SegTarget};
pub use synth::{generate_synthetic, generate_synthetic_with, SynthOptions};
