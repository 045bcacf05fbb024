//! Pipeline configuration: a TOML document with one section per stage.
//! Unknown keys are hard errors so typos cannot silently fall back to
//! defaults.

use std::path::Path;

use mammofusion::extractor::ExtractorConfig;
use mammofusion::gbdt::GbdtConfig;
use mammofusion::labels::LabelScheme;
use mammofusion::preprocess::PreprocessConfig;
use mammofusion::stratify::SplitRatios;
use mammofusion::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub scheme: LabelScheme,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub extractor: ExtractorConfig,
    pub stratify: SplitRatios,
    pub gbdt: GbdtConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scheme: LabelScheme::BiRads5,
            synth: SynthConfig::default(),
            preprocess: PreprocessConfig::default(),
            extractor: ExtractorConfig::default(),
            stratify: SplitRatios::default(),
            gbdt: GbdtConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::io(format!("reading config {}: {e}", path.display())))?;
        let mut config: PipelineConfig = toml::from_str(&text)
            .map_err(|e| CliError::config(format!("config {}: {e}", path.display())))?;
        // The generator inherits the top-level scheme.
        config.synth.scheme = config.scheme;
        Ok(config)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            Some(path) => Self::load(path),
            None => Ok(Self::default()),
        }
    }

    /// Apply command-line overrides that take precedence over the file.
    pub fn apply_overrides(&mut self, seed: Option<u64>, scheme: Option<LabelScheme>) {
        if let Some(seed) = seed {
            self.synth.seed = seed;
            self.extractor.seed = seed;
            self.gbdt.seed = seed;
        }
        if let Some(scheme) = scheme {
            self.scheme = scheme;
            self.synth.scheme = scheme;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synth.validate().map_err(CliError::from)?;
        self.preprocess.validate().map_err(CliError::from)?;
        self.extractor.validate().map_err(CliError::from)?;
        self.stratify.validate().map_err(CliError::from)?;
        self.gbdt.validate().map_err(CliError::from)?;
        if self.preprocess.target_height < self.extractor.grid_h
            || self.preprocess.target_width < self.extractor.grid_w
        {
            return Err(CliError::config(format!(
                "preprocess target {}x{} smaller than extractor grid {}x{}",
                self.preprocess.target_height,
                self.preprocess.target_width,
                self.extractor.grid_h,
                self.extractor.grid_w
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let config = PipelineConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let parsed: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(parsed.extractor, config.extractor);
        assert_eq!(parsed.gbdt, config.gbdt);
        assert_eq!(parsed.synth, config.synth);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = "[extractor]\nchannles = 64\n";
        assert!(toml::from_str::<PipelineConfig>(text).is_err());
        let text = "not_a_section = 1\n";
        assert!(toml::from_str::<PipelineConfig>(text).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let text = "scheme = \"pathology3\"\n[synth]\nn_train = 12\n";
        let mut config: PipelineConfig = toml::from_str(text).unwrap();
        config.synth.scheme = config.scheme;
        assert_eq!(config.scheme, LabelScheme::Pathology3);
        assert_eq!(config.synth.n_train, 12);
        assert_eq!(config.synth.n_val, SynthConfig::default().n_val);
        assert_eq!(config.gbdt.n_rounds, 100);
    }
}
