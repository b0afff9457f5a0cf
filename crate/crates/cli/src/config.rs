use std::path::{Path, PathBuf};

use ps3_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::args::CommonArgs;
use crate::error::{io_err, CliError};

pub const DEFAULT_FOLDS: usize = 5;

/// Everything a training run depends on. Written back as
/// `train/effective_config.json` with every default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub folds: usize,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            out: None,
            folds: DEFAULT_FOLDS,
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Strict parse: unknown keys are errors. Flattening disables serde's
    /// own check, so keys are compared against a serialized default.
    pub fn parse(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let known = serde_json::to_value(Self::default()).map_err(|e| e.to_string())?;
        let (Some(obj), Some(known)) = (value.as_object(), known.as_object()) else {
            return Err("expected a JSON object".into());
        };
        if let Some(k) = obj.keys().find(|k| !known.contains_key(*k)) {
            return Err(format!("unknown key `{k}`"));
        }
        serde_json::from_value(value).map_err(|e| e.to_string())
    }

    /// Config file (if any) overridden by flags, then validated.
    pub fn resolve(args: &CommonArgs) -> Result<Self, CliError> {
        let mut cfg = match &args.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(v) = &args.manifest {
            cfg.manifest = Some(v.clone());
        }
        if let Some(v) = &args.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = args.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = args.folds {
            cfg.folds = v;
        }
        if let Some(v) = args.fusion_mode {
            cfg.train.fusion_mode = v;
        }
        if let Some(v) = args.modalities {
            cfg.train.modalities = v;
        }
        if let Some(v) = args.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = args.lr {
            cfg.train.learning_rate = v;
        }
        if let Some(v) = args.batch_size {
            cfg.train.batch_size = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.folds < 2 {
            return Err(CliError::Usage(format!(
                "--folds must be at least 2, got {}",
                self.folds
            )));
        }
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Usage("--manifest is required".into()))
    }

    pub fn out(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::Usage("--out is required".into()))
    }
}
