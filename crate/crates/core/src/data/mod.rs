//! Samples, static-feature encoding, dataset I/O, splitting, augmentation
//! and the synthetic lesion generator.

mod augment;
mod ingest;
mod split;
mod synth;

pub use augment::{augment, AugmentationPolicy};
pub use ingest::{ingest, write_dataset, IngestOptions, METADATA_FILE, METADATA_HEADER};
pub use split::{split, DatasetSplit, SplitSamples};
pub use synth::{synth_generate, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anatomical site categories, in their fixed encoding order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Site {
    Torso,
    LowerExtremity,
    UpperExtremity,
    HeadNeck,
    PalmsSoles,
    OralGenital,
}

impl Site {
    pub const ALL: [Site; 6] = [
        Site::Torso,
        Site::LowerExtremity,
        Site::UpperExtremity,
        Site::HeadNeck,
        Site::PalmsSoles,
        Site::OralGenital,
    ];

    pub fn index(self) -> usize {
        Site::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Site::Torso => "torso",
            Site::LowerExtremity => "lower extremity",
            Site::UpperExtremity => "upper extremity",
            Site::HeadNeck => "head/neck",
            Site::PalmsSoles => "palms/soles",
            Site::OralGenital => "oral/genital",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t = text.trim().to_ascii_lowercase();
        Site::ALL
            .into_iter()
            .find(|s| s.as_str() == t)
            .ok_or_else(|| Error::Data(format!("unknown site `{text}`")))
    }

    pub fn code(self) -> f64 {
        self.index() as f64 / 5.0
    }

    pub fn from_code(code: f64) -> Result<Self> {
        let idx = (code * 5.0).round();
        if !(0.0..=5.0).contains(&idx) || (code * 5.0 - idx).abs() > 1e-9 {
            return Err(Error::Data(format!("site code {code} is not one of k/5")));
        }
        Ok(Site::ALL[idx as usize])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "female" => Ok(Sex::Female),
            "male" => Ok(Sex::Male),
            _ => Err(Error::Data(format!("unknown sex `{text}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    pub fn code(self) -> f64 {
        match self {
            Sex::Female => 0.0,
            Sex::Male => 1.0,
        }
    }

    pub fn from_code(code: f64) -> Result<Self> {
        if code == 0.0 {
            Ok(Sex::Female)
        } else if code == 1.0 {
            Ok(Sex::Male)
        } else {
            Err(Error::Data(format!("sex code {code} is not 0 or 1")))
        }
    }
}

/// Raw patient metadata before encoding.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatientInfo {
    pub age: f64,
    pub sex: Sex,
    pub site: Site,
}

impl PatientInfo {
    /// `(age/100 clamped to [0,1], sex code, site index / 5)`.
    pub fn encode(&self) -> [f64; 3] {
        [(self.age / 100.0).clamp(0.0, 1.0), self.sex.code(), self.site.code()]
    }

    /// Recovers the categorical fields; age is only known up to the clamp.
    pub fn decode(features: &[f64; 3]) -> Result<(f64, Sex, Site)> {
        Ok((features[0] * 100.0, Sex::from_code(features[1])?, Site::from_code(features[2])?))
    }
}

/// One patient record: a `[3,H,W]` image in `[0,1]`, three encoded static
/// features, and the label (1 = melanoma).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor,
    pub static_features: [f64; 3],
    pub label: u8,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor, static_features: [f64; 3], label: u8) -> Result<Self> {
        let id = id.into();
        if label > 1 {
            return Err(Error::Data(format!("sample `{id}` has label {label}")));
        }
        if image.shape().len() != 3 || image.shape()[0] != 3 {
            return Err(Error::Data(format!("sample `{id}` image shape {:?} is not [3,H,W]", image.shape())));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(format!("sample `{id}` has pixel values outside [0,1]")));
        }
        if static_features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("sample `{id}` has non-finite static features")));
        }
        Ok(Sample {
            id,
            image,
            static_features,
            label,
        })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// Labels of `samples` as 0/1.
pub fn labels(samples: &[Sample]) -> Vec<u8> {
    samples.iter().map(|s| s.label).collect()
}
