//! Dataset manifests, image preprocessing and fold planning.

pub mod folds;
pub mod manifest;
pub mod preprocess;

pub use folds::{make_stratified_folds, DevRole, FoldPlan};
pub use manifest::{
    load_manifest, parse_manifest, relabel_binary, scan_image_folder, validate_manifest, CheckResult,
    DatasetManifest, ImageRecord, ValidationReport,
};
pub use preprocess::{decode_rgb, preprocess_image, preprocess_rgb, CropRect, PreprocessConfig};
