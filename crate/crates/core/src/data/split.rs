use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

const MIN_PER_CLASS: usize = 5;

/// Disjoint train/valid/test id lists.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

/// Samples materialized per partition.
#[derive(Clone, Debug)]
pub struct SplitSamples {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Stratified 60/20/20 split: each class is shuffled independently and cut at
/// `round(0.6 n)` and `round(0.6 n) + round(0.2 n)`.
pub fn split(samples: &[Sample], seed: u64) -> Result<DatasetSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DatasetSplit {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for label in [0u8, 1] {
        let mut ids: Vec<&str> = samples
            .iter()
            .filter(|s| s.label == label)
            .map(|s| s.id.as_str())
            .collect();
        if ids.len() < MIN_PER_CLASS {
            return Err(Error::Stratification(format!(
                "class {label} has {} samples, need at least {MIN_PER_CLASS}",
                ids.len()
            )));
        }
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        let n_train = (0.6 * n).round() as usize;
        let n_valid = (0.2 * n).round() as usize;
        out.train.extend(ids[..n_train].iter().map(|s| s.to_string()));
        out.valid.extend(ids[n_train..n_train + n_valid].iter().map(|s| s.to_string()));
        out.test.extend(ids[n_train + n_valid..].iter().map(|s| s.to_string()));
    }
    Ok(out)
}

impl DatasetSplit {
    /// Samples for each partition, in partition order. Fails on unknown ids.
    pub fn materialize(&self, samples: &[Sample]) -> Result<SplitSamples> {
        let by_id: HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Sample>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|s| (*s).clone())
                        .ok_or_else(|| Error::Data(format!("split references unknown id `{id}`")))
                })
                .collect()
        };
        Ok(SplitSamples {
            train: pick(&self.train)?,
            valid: pick(&self.valid)?,
            test: pick(&self.test)?,
        })
    }
}
