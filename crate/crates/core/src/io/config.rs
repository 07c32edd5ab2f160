//! TOML run configuration for `musco compress`.
//!
//! ```toml
//! steps = 2
//! seed = 7
//!
//! [strategy]
//! mode = "constant_rate"
//! alpha = 2.0
//!
//! [finetune]
//! epochs = 2
//!
//! [data]
//! train_images = "train-images.idx"
//! train_labels = "train-labels.idx"
//! ```
//!
//! Relative data paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::read_file;
use crate::driver::MuscoConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    /// Defaults to the training set.
    #[serde(default)]
    pub eval_images: Option<PathBuf>,
    #[serde(default)]
    pub eval_labels: Option<PathBuf>,
    #[serde(default = "ten")]
    pub classes: usize,
}

fn ten() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub musco: MuscoConfig,
    /// Overrides the fine-tuning and ALS seeds when set.
    #[serde(default)]
    pub seed: Option<u64>,
    pub data: DataPaths,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))?;
        if let Some(seed) = cfg.seed {
            cfg.apply_seed(seed);
        }
        let base = origin.parent().unwrap_or(Path::new(""));
        let d = &mut cfg.data;
        for p in [&mut d.train_images, &mut d.train_labels] {
            *p = base.join(&*p);
        }
        for p in [&mut d.eval_images, &mut d.eval_labels].into_iter().flatten() {
            *p = base.join(&*p);
        }
        if d.eval_images.is_some() != d.eval_labels.is_some() {
            return Err(Error::Config("eval_images and eval_labels go together".into()));
        }
        cfg.musco.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.musco.finetune.seed = seed;
        self.musco.als.seed = seed;
    }
}
