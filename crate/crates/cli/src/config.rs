//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tempodet_core::augment::AugmentConfig;
use tempodet_core::clipper::WindowSpec;
use tempodet_core::error::Result as CoreResult;
use tempodet_core::evalmap::EvalConfig;
use tempodet_core::net3d::model::{ArchConfig, InputDims, Preset};
use tempodet_core::postproc::PostprocConfig;
use tempodet_core::synthvid::DatasetSpec;
use tempodet_core::trainer::TrainConfig;

use crate::CliError;

/// Architecture overrides on top of a preset. The number of action classes
/// defaults to the dataset's.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSection {
    pub preset: Option<Preset>,
    pub input: Option<InputDims>,
    pub conv_channels: Option<Vec<usize>>,
    pub fc_widths: Option<[usize; 2]>,
    pub num_action_classes: Option<usize>,
}

impl ArchSection {
    pub fn resolve(&self, num_classes: usize) -> CoreResult<ArchConfig> {
        let mut arch = ArchConfig::for_preset(self.preset.unwrap_or(Preset::Desk), num_classes);
        if let Some(input) = self.input {
            arch.input = input;
        }
        if let Some(c) = &self.conv_channels {
            arch.conv_channels = c.clone();
        }
        if let Some(f) = self.fc_widths {
            arch.fc_widths = f;
        }
        if let Some(n) = self.num_action_classes {
            arch.num_action_classes = n;
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<DatasetSpec>,
    pub windows: WindowSpec,
    pub augment: AugmentConfig,
    pub arch: ArchSection,
    pub train: TrainConfig,
    pub postproc: PostprocConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let at = if path == "." { String::new() } else { format!(" at `{path}`") };
            CliError::Config(format!("{origin}{at}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// `None` yields the defaults.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(d) = &self.dataset {
            d.validate()?;
        }
        self.windows.validate()?;
        self.augment.validate()?;
        self.postproc.validate()?;
        self.eval.validate()?;
        Ok(())
    }
}
