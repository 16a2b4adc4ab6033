//! Training, evaluation, inference and ablation workflows, plus run
//! directories and configuration files.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod infer;
pub mod train;

pub use ablate::{ablate, write_ablation_csv, AblationRow};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint};
pub use config::{AblationVariant, DataConfig, OptimizerConfig, TrainConfig};
pub use evaluate::{evaluate, write_eval_csv, EvalOutcome, EvalRow, PassThrough, Prediction, Remover};
pub use infer::{infer_image, write_inference, Inference};
pub use train::{load_training_data, train, Batch, StepRecord, TrainOutcome, Trainer};

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// Environment variable naming the root directory for run outputs.
pub const OUTPUT_ROOT_ENV: &str = "FETNET_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const RESOLVED_CONFIG_FILE: &str = "config.toml";

/// Create `root/<command>-<UTC timestamp>`; a numeric suffix keeps
/// directories created within the same second apart.
pub fn create_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{command}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Serialize the fully resolved configuration next to the run's artifacts.
pub fn write_resolved_config<T: Serialize>(dir: &Path, config: &T) -> Result<PathBuf> {
    let path = dir.join(RESOLVED_CONFIG_FILE);
    let text = toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
