//! Experiment config file. Example:
//!
//! ```toml
//! seed = 7
//! n_runs = 10
//!
//! [data]
//! dir = "data/target"     # or omit and fill [synth]
//! height = 32
//! width = 32
//!
//! [model.standard]
//! padding = 2
//!
//! [train]
//! learning_rate = 0.001
//!
//! [augment]
//! enabled = true
//!
//! [output]
//! dir = "runs/scratch"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CliError, CliResult, RunArgs, Variant};
use crate::data::AugmentationPolicy;
use crate::error::Error;
use crate::model::StandardCnnConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mandatory; there is no clock-derived fallback.
    pub seed: Option<u64>,
    pub n_runs: Option<usize>,
    pub data: DataSection,
    pub synth: Option<SynthSection>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub augment: AugmentSection,
    pub transfer: TransferSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub height: usize,
    pub width: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dir: None,
            height: 32,
            width: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub n: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

fn default_variant() -> Variant {
    Variant::Target
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub spec: Option<PathBuf>,
    pub standard: StandardCnnConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub policy: AugmentationPolicy,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            enabled: true,
            policy: AugmentationPolicy::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub archive: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid experiment config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.dir,
            &mut cfg.model.spec,
            &mut cfg.transfer.archive,
            &mut cfg.output.dir,
        ] {
            if let Some(rel) = p.as_mut().filter(|p| p.is_relative()) {
                *rel = base.join(&*rel);
            }
        }
        Ok(cfg)
    }

    /// Config file (if any) with command-line overrides applied.
    pub fn resolve(args: &RunArgs) -> CliResult<Self> {
        let mut cfg = match &args.config {
            Some(path) => Self::read(path)?,
            None => Self::default(),
        };
        if let Some(d) = &args.data {
            cfg.data.dir = Some(d.clone());
        }
        if let Some(s) = &args.model_spec {
            cfg.model.spec = Some(s.clone());
        }
        if let Some(o) = &args.out {
            cfg.output.dir = Some(o.clone());
        }
        if let Some(s) = args.seed {
            cfg.seed = Some(s);
        }
        if let Some(n) = args.n_runs {
            cfg.n_runs = Some(n);
        }
        if let Some(a) = &args.from_archive {
            cfg.transfer.archive = Some(a.clone());
        }
        if let Some(lr) = args.learning_rate {
            cfg.train.learning_rate = lr;
        }
        if let Some(e) = args.max_epochs {
            cfg.train.max_epochs = e;
        }
        if let Some(b) = args.batch_size {
            cfg.train.batch_size = b;
        }
        if args.no_augment {
            cfg.augment.enabled = false;
        }
        Ok(cfg)
    }

    /// Checks that a seed is set and every referenced path exists.
    pub fn validate(&self) -> CliResult<u64> {
        let seed = self
            .seed
            .ok_or_else(|| CliError::Usage("a seed is required (--seed or `seed` in the config)".into()))?;
        if self.data.dir.is_none() && self.synth.is_none() {
            return Err(CliError::Usage("no data source: pass --data or add a [synth] section".into()));
        }
        for p in [&self.data.dir, &self.model.spec, &self.transfer.archive].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Usage(format!("{} does not exist", p.display())));
            }
        }
        if self.output.dir.is_none() {
            return Err(CliError::Usage("no output directory: pass --out or set [output] dir".into()));
        }
        self.train.validate()?;
        if self.augment.enabled {
            self.augment.policy.validate()?;
        }
        Ok(seed)
    }
}
