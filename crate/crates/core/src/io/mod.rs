//! File formats: model manifests with a binary weight blob, IDX datasets,
//! plain-text matrices, and TOML run configs.

pub mod config;
pub mod idx;
pub mod manifest;
pub mod matrix;

pub use config::RunConfig;
pub use idx::{load_idx, read_idx, write_idx_images, write_idx_labels, IdxArray};
pub use manifest::{decode_model, encode_model, load_model, save_model, ModelManifest};
pub use matrix::{plant_low_rank, read_matrix, write_matrix};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
