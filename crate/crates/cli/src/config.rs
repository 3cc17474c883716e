//! Run configuration: one JSON file plus command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use pdtr_core::backbone::BackboneKind;
use pdtr_core::data::synth::SceneSpec;
use pdtr_core::eval::EvalConfig;
use pdtr_core::model::ModelConfig;
use pdtr_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory read by `train` and `eval`.
    pub dataset: Option<PathBuf>,
    /// Checkpoint read by `eval`.
    pub checkpoint: Option<PathBuf>,
    pub synth: SceneSpec,
    /// Scenes written by `synth`.
    pub count: usize,
    /// Detections at or above this confidence are drawn in visualizations.
    pub vis_threshold: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint: None,
            synth: SceneSpec::default(),
            count: 8,
            vis_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

/// Flag values that replace config entries when present.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub use_qse: Option<bool>,
    pub use_qsh: Option<bool>,
    pub backbone: Option<BackboneKind>,
}

impl RunConfig {
    /// Reads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(v) = o.use_qse {
            self.model.use_qse = v;
        }
        if let Some(v) = o.use_qsh {
            self.model.head.use_qsh = v;
        }
        if let Some(k) = o.backbone {
            self.model.backbone_kind = k;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: pdtr_core::Error| CliError::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.eval.validate().map_err(usage)?;
        self.data.synth.validate().map_err(usage)?;
        if self.eval.num_classes != self.model.head.num_classes {
            return Err(CliError::Usage(format!(
                "eval.num_classes {} differs from model.head.num_classes {}",
                self.eval.num_classes, self.model.head.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serialises") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(
            &p,
            r#"{"seed": 5, "model": {"use_qse": false}, "train": {"epochs": 3}}"#,
        )
        .unwrap();
        let mut c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(c.seed, 5);
        assert!(!c.model.use_qse);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.model.head, ModelConfig::desk().head);
        c.apply(&Overrides {
            seed: Some(9),
            use_qse: Some(true),
            use_qsh: Some(false),
            backbone: Some(BackboneKind::Plain),
        });
        assert_eq!(c.seed, 9);
        assert!(c.model.use_qse && !c.model.head.use_qsh);
        assert_eq!(c.model.backbone_kind, BackboneKind::Plain);
        c.validate().unwrap();
    }

    #[test]
    fn defaults_round_trip_through_json() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn bad_files_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, "{ not json").unwrap();
        assert_eq!(RunConfig::load(Some(&p)).unwrap_err().exit_code(), 1);
        assert_eq!(
            RunConfig::load(Some(&dir.path().join("missing.json")))
                .unwrap_err()
                .exit_code(),
            1
        );
        let mut c = RunConfig::default();
        c.eval.num_classes = 3;
        assert_eq!(c.validate().unwrap_err().exit_code(), 1);
    }
}
