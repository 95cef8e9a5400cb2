//! Run configuration: one JSON file covering model, loss, training, and
//! synthesis settings, with CLI flags layered on top. The fully resolved
//! config is echoed to `<out>/config.resolved.json` so any run can be
//! reproduced from that file alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::synth::SyntheticEventSpec;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::model::ModelConfig;
use crate::train::TrainSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    /// `default` (four morphology-distinct classes) or `motion-pair`
    /// (two classes separable only by motion).
    pub preset: String,
    /// Explicit event spec; overrides the preset when present.
    pub spec: Option<SyntheticEventSpec>,
    pub days: usize,
    pub seed: u64,
    pub drop_rate: Option<f64>,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings { preset: "default".into(), spec: None, days: 40, seed: 7, drop_rate: None }
    }
}

impl SynthSettings {
    pub fn resolve_spec(&self) -> Result<SyntheticEventSpec> {
        let mut spec = match &self.spec {
            Some(s) => s.clone(),
            None => match self.preset.as_str() {
                "default" => SyntheticEventSpec::default(),
                "motion-pair" => SyntheticEventSpec::motion_contrast(),
                other => {
                    return Err(Error::invalid(format!(
                        "unknown synth preset '{other}' (expected 'default' or 'motion-pair')"
                    )))
                }
            },
        };
        if let Some(rate) = self.drop_rate {
            spec.drop_rate = rate;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictSettings {
    pub day: usize,
    pub channel: usize,
    pub conf_floor: f64,
}

impl Default for PredictSettings {
    fn default() -> Self {
        PredictSettings { day: 0, channel: 0, conf_floor: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainSettings,
    pub synth: SynthSettings,
    pub predict: PredictSettings,
    /// Dataset directory for train/eval/predict/export-features.
    pub data: Option<String>,
    /// Held-out dataset for in-training evaluation.
    pub eval_data: Option<String>,
    /// Checkpoint path for eval/predict/export-features.
    pub checkpoint: Option<String>,
    pub export_days: usize,
    pub out: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            loss: LossWeights::default(),
            train: TrainSettings::default(),
            synth: SynthSettings::default(),
            predict: PredictSettings::default(),
            data: None,
            eval_data: None,
            checkpoint: None,
            export_days: 7,
            out: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: malformed config: {e}", path.display())))
    }

    /// Writes the resolved configuration next to a run's outputs.
    pub fn echo_resolved(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let file = std::fs::File::create(out_dir.join("config.resolved.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_json() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let back: RunConfig =
            serde_json::from_str(r#"{"train": {"epochs": 3, "mode": "supervised", "seed": 1, "optim": {"lr": 0.001, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "weight_decay": 0.0005}, "eval_every": 0}, "out": "runs/x"}"#)
                .unwrap();
        assert_eq!(back.train.epochs, 3);
        assert_eq!(back.out, "runs/x");
        assert_eq!(back.model, ModelConfig::desk());
    }

    #[test]
    fn presets_resolve() {
        let mut s = SynthSettings::default();
        assert_eq!(s.resolve_spec().unwrap().classes.len(), 4);
        s.preset = "motion-pair".into();
        assert_eq!(s.resolve_spec().unwrap().classes.len(), 2);
        s.preset = "bogus".into();
        assert!(s.resolve_spec().is_err());
        s.preset = "default".into();
        s.drop_rate = Some(0.2);
        assert_eq!(s.resolve_spec().unwrap().drop_rate, 0.2);
    }
}
