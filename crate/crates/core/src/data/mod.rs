//! Dataset ingestion, splitting, preprocessing, batching and the synthetic
//! texture generator.

mod batch;
mod manifest;
mod preprocess;
mod split;
mod synth;

pub use batch::{batch_order, Batch, ImageSet};
pub use manifest::{
    load_dataset, load_dataset_with_report, read_manifest_csv, write_manifest_csv, parse_manifest_csv,
    DatasetManifest, Record, SkippedFile, Split,
};
pub use preprocess::{bilinear_resize, preprocess, preprocess_bytes, NORM_MEAN, NORM_STD};
pub use split::{split_counts, stratified_split, SplitConfig};
pub use synth::{synth_generate, SynthConfig, SynthSummary, GEN_PARAMS_FILE};

/// Class table; the index is the class id used everywhere.
pub const CLASS_NAMES: [&str; 3] = ["Normal", "Liver", "Aspergillosis"];

/// Default model input side length.
pub const IMAGE_SIZE: usize = 128;

/// Human-readable name for a class id. Falls back to `class<i>` for models
/// with a class count other than the fixed table.
pub fn class_name(index: usize, num_classes: usize) -> String {
    if num_classes == CLASS_NAMES.len() {
        if let Some(n) = CLASS_NAMES.get(index) {
            return (*n).to_string();
        }
    }
    format!("class{index}")
}
