//! Synthetic dermatoscopy-like samples. Benign lesions are smooth ellipses;
//! melanomas have ragged, notched contours and asymmetric pigmentation.
//! Site priors follow the per-class ISIC 2020 site counts; malignant cases
//! skew older.

use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PatientInfo, Sample, Sex, Site};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-site sample counts (torso, lower extremity, upper extremity,
/// head/neck, palms/soles, oral/genital).
const BENIGN_SITE_COUNTS: [f64; 6] = [17106.0, 8293.0, 4872.0, 1781.0, 370.0, 120.0];
const MELANOMA_SITE_COUNTS: [f64; 6] = [257.0, 124.0, 111.0, 74.0, 5.0, 4.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub skin_tone: [f64; 3],
    pub lesion_tone: [f64; 3],
    /// Lesion radius range as a fraction of the image side.
    pub radius_range: [f64; 2],
    /// Relative amplitude of the high-frequency contour perturbation on
    /// malignant lesions.
    pub raggedness: f64,
    /// Darkening applied to one half of a malignant lesion.
    pub asymmetry: f64,
    pub pixel_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 32,
            skin_tone: [0.87, 0.68, 0.58],
            lesion_tone: [0.45, 0.29, 0.21],
            radius_range: [0.2, 0.3],
            raggedness: 0.22,
            asymmetry: 0.12,
            pixel_noise: 0.025,
        }
    }
}

impl SynthConfig {
    /// Related domain for pretraining: different skin and pigment palette and
    /// a wider size range, same malignancy cue.
    pub fn source_variant() -> Self {
        SynthConfig {
            skin_tone: [0.78, 0.62, 0.60],
            lesion_tone: [0.36, 0.24, 0.26],
            radius_range: [0.17, 0.33],
            ..SynthConfig::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let [lo, hi] = self.radius_range;
        if self.image_size < 8 || !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!("invalid synthetic config {self:?}")));
        }
        Ok(())
    }
}

struct Contour {
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    orientation: f64,
    harmonics: Vec<(f64, f64, f64)>,
}

impl Contour {
    fn radius_at(&self, theta: f64) -> f64 {
        let t = theta - self.orientation;
        let (a, b) = (self.radius, self.radius * self.aspect);
        let ellipse = a * b / ((b * t.cos()).powi(2) + (a * t.sin()).powi(2)).sqrt();
        let wobble: f64 = self.harmonics.iter().map(|(k, amp, ph)| amp * (k * theta + ph).cos()).sum();
        ellipse * (1.0 + wobble)
    }
}

fn draw_lesion(rng: &mut ChaCha8Rng, cfg: &SynthConfig, malignant: bool) -> Tensor {
    let n = cfg.image_size;
    let size = n as f64;
    let [r_lo, r_hi] = cfg.radius_range;
    let contour = {
        let harmonics = if malignant {
            let count = rng.random_range(3..=5);
            (0..count)
                .map(|_| {
                    let k = rng.random_range(5..=11) as f64;
                    let amp = cfg.raggedness * rng.random_range(0.5..1.0) / (count as f64).sqrt();
                    (k, amp, rng.random_range(0.0..TAU))
                })
                .collect()
        } else {
            (2..=3)
                .map(|k| (k as f64, rng.random_range(0.0..0.03), rng.random_range(0.0..TAU)))
                .collect()
        };
        Contour {
            cx: size / 2.0 + rng.random_range(-0.1..0.1) * size,
            cy: size / 2.0 + rng.random_range(-0.1..0.1) * size,
            radius: rng.random_range(r_lo..=r_hi) * size,
            aspect: rng.random_range(0.7..1.0),
            orientation: rng.random_range(0.0..TAU),
            harmonics,
        }
    };

    let skin_shift = rng.random_range(-0.06..0.06);
    let skin: Vec<f64> = cfg.skin_tone.iter().map(|c| c + skin_shift).collect();
    let depth = rng.random_range(0.85..1.15);
    let lesion: Vec<f64> = cfg.lesion_tone.iter().map(|c| c * depth).collect();
    let dark_dir = rng.random_range(0.0..TAU);
    let dark = if malignant { cfg.asymmetry } else { 0.0 };
    let noise = Normal::new(0.0, cfg.pixel_noise.max(1e-12)).expect("finite noise");

    let mut data = vec![0.0; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f64 + 0.5 - contour.cx;
            let dy = y as f64 + 0.5 - contour.cy;
            let dist = dx.hypot(dy);
            let theta = dy.atan2(dx);
            let edge = contour.radius_at(theta);
            // one-pixel anti-aliased boundary
            let inside = (edge - dist + 0.5).clamp(0.0, 1.0);
            let half = if ((theta - dark_dir).cos()) > 0.0 { dark } else { 0.0 };
            for c in 0..3 {
                let pigment = lesion[c] * (1.0 - half);
                let v = skin[c] * (1.0 - inside) + pigment * inside + noise.sample(rng);
                data[(c * n + y) * n + x] = ((v.clamp(0.0, 1.0)) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(vec![3, n, n], data).expect("square RGB image")
}

fn draw_patient(rng: &mut ChaCha8Rng, malignant: bool) -> PatientInfo {
    let counts = if malignant { &MELANOMA_SITE_COUNTS } else { &BENIGN_SITE_COUNTS };
    let site = Site::ALL[WeightedIndex::new(counts).expect("positive counts").sample(rng)];
    let mean_age: f64 = if malignant { 60.0 } else { 48.0 };
    let age: f64 = Normal::new(mean_age, 14.0).expect("finite").sample(rng);
    let age = age.round().clamp(5.0, 95.0);
    let sex = if rng.random::<f64>() < if malignant { 0.58 } else { 0.5 } {
        Sex::Male
    } else {
        Sex::Female
    };
    PatientInfo { age, sex, site }
}

/// `n` samples with exactly `round(n · positive_fraction)` melanomas, in
/// shuffled order, with ids `synth_00000`, `synth_00001`, ....
pub fn synth_generate(n: usize, positive_fraction: f64, seed: u64, config: &SynthConfig) -> Result<Vec<Sample>> {
    if n < 10 {
        return Err(Error::Config(format!("synthetic dataset needs n >= 10, got {n}")));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::Config(format!("positive fraction {positive_fraction} outside (0, 1)")));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positives = (n as f64 * positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut rng);
    let width = n.saturating_sub(1).to_string().len().max(5);
    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let malignant = label == 1;
            let info = draw_patient(&mut rng, malignant);
            let image = draw_lesion(&mut rng, config, malignant);
            Sample::new(format!("synth_{i:0width$}"), image, info.encode(), label)
        })
        .collect()
}
