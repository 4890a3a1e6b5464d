//! TOML run configuration. Every key is optional and mirrors a CLI flag.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_err, PipelineError};
use crate::attention::ThresholdMode;
use crate::llm::BackendKind;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub trees: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub endpoint_url: Option<String>,
    pub model_id: Option<String>,
    pub timeout_ms: Option<u64>,
    pub max_retries: Option<u32>,
    pub tau: Option<f64>,
    pub threshold_mode: Option<ThresholdMode>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub ra_quantile: Option<f64>,
    pub steps: Option<usize>,
    /// `"HxW"`.
    pub grid: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub stories_per_pair: Option<usize>,
    pub workers: Option<usize>,
    pub k_elements: Option<usize>,
    pub max_words: Option<usize>,
    pub min_frequency: Option<u32>,
    pub subjects: Option<PathBuf>,
    pub timestamps: Option<bool>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(format!("{origin}: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Parses `"8x8"` (also `X`) into `(h, w)`.
pub fn parse_grid(text: &str) -> Result<(usize, usize), PipelineError> {
    let bad = || PipelineError::Config(format!("grid `{text}` is not HxW with positive integers"));
    let (h, w) = text.trim().split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}
