use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vae_anomaly::model::ModelConfig;
use vae_anomaly::scores::ScoreConfig;
use vae_anomaly::train::TrainConfig;

/// Everything a run needs in one JSON document. Missing sections and fields
/// take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub normal_label: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            normal_label: vae_anomaly::data::NORMAL_LABEL.to_string(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        if self.score.samples == 0 {
            return Err("score.L must be at least 1".into());
        }
        if self.score.scores.is_empty() {
            return Err("score.scores is empty".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
