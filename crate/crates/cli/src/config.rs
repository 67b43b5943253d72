use std::path::Path;

use ispeech_core::synth::SynthParams;
use ispeech_core::{DeviceProfile, Error, ModelConfig, Result, TrainConfig};
use ispeech_service::SessionConfig;
use serde::{Deserialize, Serialize};

/// Settings file accepted by `--config`. Every section is optional.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    /// Architecture; derived from the device profile when absent.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub synth: SynthParams,
    pub session: SessionConfig,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = &self.model {
            m.validate()?;
        }
        self.train.validate()?;
        self.synth.validate()?;
        self.session.validate()
    }

    pub fn model_for(&self, profile: &DeviceProfile) -> Result<ModelConfig> {
        let cfg = self.model.clone().unwrap_or_else(|| ModelConfig::for_profile(profile));
        if cfg.n_channels != profile.n_channels() {
            return Err(Error::Config(format!(
                "model expects {} channels but the {} profile has {}",
                cfg.n_channels,
                profile.name,
                profile.n_channels()
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: AppConfig = serde_json::from_str(r#"{"train": {"epochs": 3}, "session": {"theta_id": 0.8}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.session.theta_id, 0.8);
        assert_eq!(cfg.session.live.theta_cmd, 0.5);
        assert!(cfg.model.is_none());
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(serde_json::from_str::<AppConfig>(r#"{"trian": {}}"#).is_err());
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let cfg = AppConfig {
            model: Some(ModelConfig::wired()),
            ..AppConfig::default()
        };
        assert!(matches!(cfg.model_for(&DeviceProfile::wireless()), Err(Error::Config(_))));
    }
}
