//! Files on disk: the per-instance mask dataset layout, the prediction
//! interchange document, evaluation reports, and train/validation splits.
//!
//! Every writer goes through a temp file and a rename, so readers never see a
//! partial file.

mod dataset;
mod predictions;
mod report;
mod split;

use std::fs;
use std::path::{Path, PathBuf};

pub use dataset::{
    label_image, load_ground_truth, load_image, scan_dataset, write_image, write_label_masks, write_sample,
    DatasetEntry, DatasetLayout, GT_SOURCE,
};
pub use predictions::{parse_predictions, read_predictions, serialize_predictions, write_predictions, SCHEMA_VERSION};
pub use report::{format_miou, render_csv, render_report, write_report};
pub use split::split_train_val;

use crate::error::{Error, Result};

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` atomically, creating parent directories.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
