//! Run configuration: one JSON document with `{data, model, train, eval}`
//! sections. Every field is optional and falls back to its documented
//! default; unknown keys anywhere are a hard error (they are almost always
//! typos, and a silently ignored knob is worse than a refusal). The fully
//! resolved configuration is echoed into each output directory as
//! `config.effective.json` so results stay reproducible.

use crate::data::sample::DatasetConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// `data` section: dataset sampling knobs plus the procedural-corpus shape
/// used when `source` is `"procedural"`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// `"procedural"` or a corpus directory containing `train/` and `val/`.
    pub source: String,
    /// LR patch side p; GT crops are ⌊p·s⌋ square.
    pub lr_patch: usize,
    /// Training scale range [s_min, s_max], sampled uniformly.
    pub scale_range: [f64; 2],
    /// Query pixels sampled per patch.
    pub queries_per_patch: usize,
    /// Sample-stream seed (also the procedural corpus seed).
    pub seed: u64,
    /// Procedural corpus: number of images (3/4 train, 1/4 val).
    pub n_images: usize,
    /// Procedural corpus: square image side in pixels.
    pub image_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        DataSection {
            source: d.source,
            lr_patch: d.lr_patch,
            scale_range: d.scale_range,
            queries_per_patch: d.queries_per_patch,
            seed: d.seed,
            n_images: 32,
            image_size: 96,
        }
    }
}

impl DataSection {
    /// The sampling-side view of this section.
    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            source: self.source.clone(),
            lr_patch: self.lr_patch,
            scale_range: self.scale_range,
            queries_per_patch: self.queries_per_patch,
            seed: self.seed,
        }
    }
}

/// `eval` section: evaluation protocol knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Scales evaluated by `eval` when `--scales` is not given.
    pub scales: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { scales: vec![2.0, 3.0] }
    }
}

/// The whole run configuration document.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Parse a JSON document; unknown keys in any section are fatal.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Load from a file, naming the path in every failure.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Serialize with every default applied (the "effective" form).
    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// Write `config.effective.json` into `dir`, creating it if needed.
    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.effective.json");
        std::fs::write(&path, self.to_pretty_json() + "\n").map_err(|e| Error::io(path, e))
    }
}
