//! Integrated-gradients attribution over image pixels, and rendering of the
//! resulting maps to 8-bit grayscale.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Tape, Tensor};
use crate::transfer::WeightArchive;

pub const DEFAULT_STEPS: usize = 256;
/// Step count used when the default leaves a completeness gap above 1%.
pub const TIGHT_STEPS: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Black,
    Custom,
}

/// Quantity being attributed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    #[default]
    Logit,
    Probability,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub phi: Tensor,
    /// |Σφ − (ψ(x) − ψ(b))|
    pub completeness_gap: f64,
    pub steps_used: usize,
    pub baseline_kind: BaselineKind,
    /// ψ(x) − ψ(b), kept so the gap can be read relative to it.
    pub output_delta: f64,
}

impl AttributionMap {
    pub fn relative_gap(&self) -> f64 {
        if self.output_delta == 0.0 {
            self.completeness_gap
        } else {
            self.completeness_gap / self.output_delta.abs()
        }
    }

    pub fn phi_sum(&self) -> f64 {
        self.phi.data().iter().sum()
    }
}

/// Evaluates ψ and ∂ψ/∂image at one point, static features held fixed.
fn value_and_grad(model: &Model, image: &Tensor, static_features: &[f64], target: Target) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let x = tape.param(image.clone());
    let s = tape.constant(Tensor::from_vec(static_features.to_vec()));
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut out = model.forward_on(&mut tape, &bound, x, s, false, &mut unused)?;
    if target == Target::Probability {
        out = tape.sigmoid(out)?;
    }
    let value = tape.value(out).data()[0];
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(x)))
}

fn output(model: &Model, image: &Tensor, static_features: &[f64], target: Target) -> Result<f64> {
    let z = model.logit(image, static_features)?;
    Ok(match target {
        Target::Logit => z,
        Target::Probability => crate::tensor::kernels::sigmoid(z),
    })
}

/// Integrated gradients with the midpoint rule:
/// φ_i = (x_i − b_i) · mean_k ∂ψ/∂x_i at b + ((k − ½)/steps)(x − b).
///
/// `baseline` defaults to the all-zero (black) image.
pub fn integrated_gradients(
    model: &Model,
    sample: &Sample,
    steps: usize,
    baseline: Option<&Tensor>,
    target: Target,
) -> Result<AttributionMap> {
    if steps < 2 {
        return Err(Error::Config(format!("integrated gradients needs at least 2 steps, got {steps}")));
    }
    let x = &sample.image;
    let (b, baseline_kind) = match baseline {
        Some(b) if b.shape() != x.shape() => {
            return Err(Error::dim(
                "integrated_gradients",
                format!("baseline shape {:?} differs from image shape {:?}", b.shape(), x.shape()),
            ))
        }
        Some(b) => (b.clone(), BaselineKind::Custom),
        None => (Tensor::zeros(x.shape()), BaselineKind::Black),
    };
    let diff: Vec<f64> = x.data().iter().zip(b.data()).map(|(xi, bi)| xi - bi).collect();

    // Each step is independent; summing afterwards in index order keeps the
    // result identical however the steps were scheduled.
    let step_grads = (0..steps)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f64 + 0.5) / steps as f64;
            let data = b.data().iter().zip(&diff).map(|(bi, d)| bi + alpha * d).collect();
            let point = Tensor::new(x.shape().to_vec(), data)?;
            value_and_grad(model, &point, &sample.static_features, target).map(|(_, g)| g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = vec![0.0; diff.len()];
    for g in &step_grads {
        for (t, gi) in total.iter_mut().zip(g) {
            *t += gi;
        }
    }
    let phi: Vec<f64> = total.iter().zip(&diff).map(|(t, d)| d * t / steps as f64).collect();

    let output_delta = output(model, x, &sample.static_features, target)? - output(model, &b, &sample.static_features, target)?;
    let completeness_gap = (phi.iter().sum::<f64>() - output_delta).abs();
    Ok(AttributionMap {
        phi: Tensor::new(x.shape().to_vec(), phi)?,
        completeness_gap,
        steps_used: steps,
        baseline_kind,
        output_delta,
    })
}

/// Runs at `DEFAULT_STEPS`, retrying at `TIGHT_STEPS` when the relative
/// completeness gap exceeds 1%.
pub fn integrated_gradients_auto(model: &Model, sample: &Sample, baseline: Option<&Tensor>, target: Target) -> Result<AttributionMap> {
    let map = integrated_gradients(model, sample, DEFAULT_STEPS, baseline, target)?;
    if map.relative_gap() <= 0.01 {
        return Ok(map);
    }
    integrated_gradients(model, sample, TIGHT_STEPS, baseline, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Σ_c |φ| min-max normalized; brighter means more attribution.
    Absolute,
    /// Σ_c φ scaled symmetrically so that zero maps to mid-gray.
    Signed,
}

/// Row-major 8-bit grayscale raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayMap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayMap {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

const MID_GRAY: u8 = 128;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn render_map(map: &AttributionMap, mode: RenderMode) -> Result<GrayMap> {
    let shape = map.phi.shape();
    if shape.len() != 3 {
        return Err(Error::dim("render_map", format!("phi must be C×H×W, got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let phi = map.phi.data();
    let per_pixel: Vec<f64> = (0..h * w)
        .map(|i| {
            (0..c)
                .map(|ch| {
                    let v = phi[ch * h * w + i];
                    match mode {
                        RenderMode::Absolute => v.abs(),
                        RenderMode::Signed => v,
                    }
                })
                .sum()
        })
        .collect();
    if per_pixel.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "render_map" });
    }
    let pixels = match mode {
        RenderMode::Absolute => {
            let lo = per_pixel.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = per_pixel.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                per_pixel.iter().map(|v| to_byte((v - lo) / (hi - lo))).collect()
            } else {
                vec![MID_GRAY; h * w]
            }
        }
        RenderMode::Signed => {
            let scale = per_pixel.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale > 0.0 {
                per_pixel.iter().map(|v| to_byte(0.5 + 0.5 * v / scale)).collect()
            } else {
                vec![MID_GRAY; h * w]
            }
        }
    };
    Ok(GrayMap { width: w, height: h, pixels })
}

/// Raw φ in the weight-archive container, for exact reprocessing.
pub fn phi_archive(map: &AttributionMap) -> Result<WeightArchive> {
    WeightArchive::from_tensors([("phi", &map.phi)])
}
