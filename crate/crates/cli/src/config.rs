use std::fs;
use std::path::{Path, PathBuf};

use r23d::avatar::GenerateConfig;
use r23d::netarch::ModelConfig;
use r23d::register::THETA_SWEEP;
use r23d::trainloop::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const RESOLVED: &str = "config.resolved.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub thetas: Vec<f32>,
    /// Directory of gallery `.pcp` clouds; defaults to the dataset's `clouds/`.
    pub gallery: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thetas: THETA_SWEEP.to_vec(),
            gallery: None,
        }
    }
}

/// The single run description shared by every subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub generate: GenerateConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Parses a config document. Model image size and vertex count follow the
    /// `generate` section unless set explicitly.
    pub fn parse(text: &str, origin: &str) -> Result<Self, CliError> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CliError::input(format!("{origin}: {e}")))?;
        let mut cfg: RunConfig =
            serde_json::from_value(raw.clone()).map_err(|e| CliError::input(format!("{origin}: {e}")))?;
        let set = |key: &str| raw.get("model").and_then(|m| m.get(key)).is_some();
        if !set("height") {
            cfg.model.height = cfg.generate.height;
        }
        if !set("width") {
            cfg.model.width = cfg.generate.width;
        }
        if !set("vertices") {
            cfg.model.vertices = cfg.generate.vertices;
        }
        cfg.validate().map_err(|e| CliError::input(format!("{origin}: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Self::parse("{}", "default config"),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
                Self::parse(&text, &p.display().to_string())
            }
        }
    }

    fn validate(&self) -> Result<(), String> {
        self.generate.validate().map_err(|e| e.to_string())?;
        self.model.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())?;
        check_thetas(&self.eval.thetas)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::input(format!("{}: {e}", dir.display())))?;
        let path = dir.join(RESOLVED);
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

pub fn check_thetas(thetas: &[f32]) -> Result<(), String> {
    if thetas.is_empty() {
        return Err("eval.thetas is empty".into());
    }
    match thetas.iter().find(|t| !(0.0..1.0).contains(*t)) {
        Some(t) => Err(format!("threshold {t} outside [0, 1)")),
        None => Ok(()),
    }
}
