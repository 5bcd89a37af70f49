//! The JSON run configuration accepted by `kt train`.

use std::fs;
use std::path::{Path, PathBuf};

use kt_core::ingest::Schema;
use kt_core::train::TrainConfig;
use serde::Deserialize;

use crate::UsageError;

/// CSV input that `kt train` preprocesses before training.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    pub input: PathBuf,
    pub schema: Schema,
    #[serde(default)]
    pub max_score_table: Option<PathBuf>,
    /// Where the dataset directory is written; defaults to `<out_dir>/data`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    /// A directory written by `kt preprocess`.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub ingest: Option<IngestOptions>,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
}

impl RunConfigFile {
    /// Reads `path` and resolves every relative path against its directory.
    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text = fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        if cfg.data.is_some() == cfg.ingest.is_some() {
            return Err(UsageError(format!(
                "config {}: set exactly one of \"data\" or \"ingest\"",
                path.display()
            )));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.out_dir);
        if let Some(d) = cfg.data.as_mut() {
            resolve(d);
        }
        if let Some(ing) = cfg.ingest.as_mut() {
            resolve(&mut ing.input);
            ing.max_score_table.as_mut().map(resolve);
            ing.out_dir.as_mut().map(resolve);
        }
        cfg.train
            .validate()
            .map_err(|e| UsageError(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        match (&self.data, &self.ingest) {
            (Some(d), _) => d.clone(),
            (None, Some(ing)) => ing
                .out_dir
                .clone()
                .unwrap_or_else(|| self.out_dir.join("data")),
            (None, None) => unreachable!("checked at load"),
        }
    }
}
