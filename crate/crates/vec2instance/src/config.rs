//! Run configuration: a JSON file merged with command-line flags and echoed
//! beside every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vec2instance_core::data::{FilterConfig, SynthConfig};
use vec2instance_core::evaluation::EvalConfig;
use vec2instance_core::inference::InferenceConfig;
use vec2instance_core::models::DecoderKind;
use vec2instance_core::training::TrainConfig;

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};

/// File name of the configuration echo written next to artifacts.
pub const ECHO_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    /// Worker threads for per-tile work; 1 keeps everything sequential.
    pub workers: usize,
    pub data_dir: Option<PathBuf>,
    /// Output location. Not echoed, so identical runs into different
    /// directories produce identical files.
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub detection_threshold: f32,
    pub nms_iou: f64,
    /// Chebyshev tolerance (cells) for centroid matching in reports.
    pub centroid_distance: usize,
    /// Training overrides; unset values use the per-network defaults.
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f32>,
    pub checkpoint_every: Option<usize>,
    pub w_pos: f64,
    pub w_neg: f64,
    pub decoder: DecoderKind,
    pub budgets: Vec<usize>,
    pub tiles: usize,
    pub synth: SynthConfig,
    pub filter: FilterConfig,
    pub centroid_checkpoint: Option<PathBuf>,
    pub instance_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::centroid_default();
        let inference = InferenceConfig::default();
        Self {
            command: String::new(),
            seed: 0,
            workers: 1,
            data_dir: None,
            out: None,
            detection_threshold: inference.detection_threshold,
            nms_iou: inference.nms_iou,
            centroid_distance: 0,
            epochs: None,
            batch_size: None,
            learning_rate: None,
            checkpoint_every: None,
            w_pos: train.w_pos,
            w_neg: train.w_neg,
            decoder: DecoderKind::Vec2Instance,
            budgets: vec![200_000, 300_000],
            tiles: 300,
            synth: SynthConfig::default(),
            filter: FilterConfig::default(),
            centroid_checkpoint: None,
            instance_checkpoint: None,
        }
    }
}

impl RunConfig {
    /// Unparseable files and unknown keys are configuration errors.
    pub fn from_file(path: &Path) -> Result<Self> {
        read_json(path).map_err(|e| match e {
            Error::Format { path, message } => Error::config(format!("{}: {message}", path.display())),
            other => other,
        })
    }

    /// Training settings on top of `base` (a per-network default).
    pub fn train_config(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            w_pos: self.w_pos,
            w_neg: self.w_neg,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every.unwrap_or(base.checkpoint_every),
            device: base.device,
        }
    }

    pub fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            detection_threshold: self.detection_threshold,
            nms_iou: self.nms_iou,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            inference: self.inference(),
            centroid_distance: self.centroid_distance,
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    /// Writes the echo into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(ECHO_FILE), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 4, "synth": {"count_range": [2, 3]}}"#).unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.synth.count_range, (2, 3));
        assert_eq!(c.synth.size_range, SynthConfig::default().size_range);
        assert_eq!(c.workers, 1);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 4}"#).is_err());
    }

    #[test]
    fn echo_omits_output_path() {
        let c = RunConfig {
            out: Some("/tmp/x".into()),
            ..RunConfig::default()
        };
        assert!(c.echo().get("out").is_none());
        let back: RunConfig = serde_json::from_value(c.echo()).unwrap();
        assert_eq!(back, RunConfig { out: None, ..c });
    }

    #[test]
    fn overrides_apply_to_training() {
        let c = RunConfig {
            epochs: Some(5),
            seed: 3,
            ..RunConfig::default()
        };
        let t = c.train_config(TrainConfig::instance_default());
        assert_eq!((t.epochs, t.batch_size, t.seed), (5, 500, 3));
    }
}
