//! Random hyperparameter search over linear, log2 and log10 scales.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentationPolicy, SplitSamples};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, StandardCnnConfig};
use crate::training::{fit, validation_metrics, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Linear,
    Log2,
    Log10,
}

impl Scale {
    fn forward(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log2 => v.log2(),
            Scale::Log10 => v.log10(),
        }
    }

    fn inverse(self, u: f64) -> f64 {
        match self {
            Scale::Linear => u,
            Scale::Log2 => u.exp2(),
            Scale::Log10 => 10f64.powf(u),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dimension {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub scale: Scale,
    pub integer: bool,
}

impl Dimension {
    pub fn new(name: &str, lower: f64, upper: f64, scale: Scale, integer: bool) -> Self {
        Dimension {
            name: name.to_string(),
            lower,
            upper,
            scale,
            integer,
        }
    }

    /// Maps a unit draw onto the dimension: uniform in the scale's domain,
    /// then rounded for integers. Integer log2 dimensions round in the log
    /// domain, which snaps them to powers of two.
    pub fn from_unit(&self, u: f64) -> f64 {
        let (lo, hi) = (self.scale.forward(self.lower), self.scale.forward(self.upper));
        let t = lo + u * (hi - lo);
        let v = match (self.integer, self.scale) {
            (true, Scale::Log2) => t.round().exp2(),
            (true, _) => self.scale.inverse(t).round(),
            (false, _) => self.scale.inverse(t),
        };
        v.clamp(self.lower, self.upper)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub entries: Vec<Dimension>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            entries: vec![
                Dimension::new("dropout", 0.0, 0.5, Scale::Linear, false),
                Dimension::new("batch_size", 4.0, 512.0, Scale::Log2, true),
                Dimension::new("kernel_size", 2.0, 5.0, Scale::Linear, true),
                Dimension::new("learning_rate", 0.001, 0.01, Scale::Log10, false),
                Dimension::new("num_conv_layers", 5.0, 10.0, Scale::Linear, true),
                Dimension::new("pool_size", 3.0, 4.0, Scale::Linear, true),
                Dimension::new("filters_per_layer", 6.0, 12.0, Scale::Linear, true),
            ],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for d in &self.entries {
            if !seen.insert(&d.name) {
                return Err(Error::Config(format!("search dimension `{}` declared twice", d.name)));
            }
            if !(d.lower.is_finite() && d.upper.is_finite() && d.lower < d.upper) {
                return Err(Error::Config(format!(
                    "search dimension `{}` needs lower < upper, got [{}, {}]",
                    d.name, d.lower, d.upper
                )));
            }
            if d.scale != Scale::Linear && d.lower <= 0.0 {
                return Err(Error::Config(format!(
                    "search dimension `{}` is log-scaled but its lower bound {} is not positive",
                    d.name, d.lower
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Dimension> {
        self.entries.iter().find(|d| d.name == name)
    }
}

pub type Configuration = BTreeMap<String, f64>;

/// Draws trial `trial_index`. Each trial reads its own ChaCha stream, so a
/// trial does not depend on how many others were drawn before it.
pub fn sample(space: &SearchSpace, seed: u64, trial_index: u64) -> Result<Configuration> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial_index);
    Ok(space
        .entries
        .iter()
        .map(|d| (d.name.clone(), d.from_unit(rng.random::<f64>())))
        .collect())
}

/// Applies the known names of a configuration onto base configs; unknown
/// names are ignored.
pub fn apply(config: &Configuration, cnn: &StandardCnnConfig, train: &TrainConfig) -> (StandardCnnConfig, TrainConfig) {
    let (mut cnn, mut train) = (cnn.clone(), train.clone());
    for (name, &v) in config {
        match name.as_str() {
            "dropout" => cnn.dropout = v,
            "batch_size" => train.batch_size = v as usize,
            "kernel_size" => cnn.kernel_size = v as usize,
            "learning_rate" => train.learning_rate = v,
            "num_conv_layers" => cnn.num_conv_layers = v as usize,
            "pool_size" => cnn.pool_size = v as usize,
            "filters_per_layer" => cnn.filters_per_layer = v as usize,
            _ => {}
        }
    }
    (cnn, train)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum TrialStatus {
    Ok,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: u64,
    pub config: Configuration,
    pub objective: Option<f64>,
    #[serde(flatten)]
    pub status: TrialStatus,
}

/// Runs `budget` independent trials and returns them ranked: successful
/// trials by descending objective (ties by index), then failures by index.
/// A failing or non-finite objective is recorded and the search goes on.
pub fn search<F>(space: &SearchSpace, budget: usize, seed: u64, objective: F) -> Result<Vec<Trial>>
where
    F: Fn(&Configuration) -> Result<f64> + Sync,
{
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    space.validate()?;
    let mut trials = (0..budget as u64)
        .into_par_iter()
        .map(|index| {
            let config = sample(space, seed, index)?;
            let (objective, status) = match objective(&config) {
                Ok(v) if v.is_finite() => (Some(v), TrialStatus::Ok),
                Ok(v) => (None, TrialStatus::Failed(format!("objective returned {v}"))),
                Err(e) => (None, TrialStatus::Failed(e.to_string())),
            };
            Ok(Trial {
                index,
                config,
                objective,
                status,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rank(&mut trials);
    Ok(trials)
}

pub fn rank(trials: &mut [Trial]) {
    trials.sort_by(|a, b| match (a.objective, b.objective) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.index.cmp(&b.index)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });
}

/// One JSON record per trial, in trial-index order.
pub fn write_trial_log(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut ordered: Vec<&Trial> = trials.iter().collect();
    ordered.sort_by_key(|t| t.index);
    let mut out = Vec::new();
    for t in ordered {
        serde_json::to_writer(&mut out, t).map_err(|e| Error::Contract(e.to_string()))?;
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

/// Trial objective that trains the standard CNN built from the sampled
/// configuration and reports validation AUROC at the best epoch.
pub fn training_objective<'a>(
    data: &'a SplitSamples,
    base_cnn: &'a StandardCnnConfig,
    base_train: &'a TrainConfig,
    augmentation: Option<&'a AugmentationPolicy>,
) -> impl Fn(&Configuration) -> Result<f64> + Sync + 'a {
    move |config| {
        let (cnn, train) = apply(config, base_cnn, base_train);
        let first = data
            .train
            .first()
            .ok_or_else(|| Error::Data("hyperparameter search needs training samples".into()))?;
        let spec = ModelSpec::standard(&cnn, first.height(), first.width())?;
        let mut model = Model::build(spec, train.seed)?;
        fit(&mut model, &data.train, &data.valid, &train, augmentation)?;
        validation_metrics(&model, &data.valid).map(|(_, auroc)| auroc)
    }
}
