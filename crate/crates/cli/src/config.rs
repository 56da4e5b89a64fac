//! JSON run configuration shared by `train`, `ablate` and `profile`.
//!
//! Schema (every key optional, unknown keys rejected at every level):
//!
//! ```json
//! {
//!   "model": {
//!     "channels": 32, "heads": 4, "n_single": 2, "n_cross": 2, "ffn_ratio": 2,
//!     "use_rope": true, "use_seq_transformer": true, "use_sap": true,
//!     "global_residual": true, "rope_base": 10000.0, "ms_bands": 4
//!   },
//!   "train": {
//!     "epochs": 60, "batch_size": 4, "steps_per_epoch": null, "crop": 64,
//!     "lr_init": 5e-4, "lr_final": 5e-8, "clip_norm": 4.0,
//!     "adam_beta1": 0.9, "adam_beta2": 0.999, "adam_eps": 1e-8, "seed": 0,
//!     "buckets": [8, 16, 32], "bucket_probs": null, "infer_window": 16
//!   }
//! }
//! ```

use std::fs;
use std::path::Path;

use scaleformer::data::DatasetSpec;
use scaleformer::model::ModelConfig;
use scaleformer::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| scaleformer::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Reads and validates a run config; `None` gives the defaults.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(|e| match (e, path) {
        (CliError::Config(m), Some(p)) => CliError::Config(format!("{}: {m}", p.display())),
        (e, _) => e,
    })?;
    Ok(cfg)
}

/// Reads a `synth-data` dataset spec (same rules: unknown keys rejected).
pub fn load_dataset_spec(path: &Path) -> Result<DatasetSpec, CliError> {
    read_json(path)
}
