//! Training-time image augmentation. The random stream is a pure function of
//! `(policy.seed, sample.id, epoch_nonce)`, so an augmented image can be
//! regenerated in any process.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub rotation_max_deg: f64,
    pub horizontal_flip_p: f64,
    pub vertical_flip_p: f64,
    /// Side-length fraction of the random crop, resized back to full size.
    pub resize_scale_range: [f64; 2],
    pub brightness_delta_max: f64,
    pub saturation_delta_max: f64,
    pub seed: u64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            rotation_max_deg: 25.0,
            horizontal_flip_p: 0.5,
            vertical_flip_p: 0.5,
            resize_scale_range: [0.8, 1.0],
            brightness_delta_max: 0.1,
            saturation_delta_max: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentationPolicy {
            rotation_max_deg: 0.0,
            horizontal_flip_p: 0.0,
            vertical_flip_p: 0.0,
            resize_scale_range: [1.0, 1.0],
            brightness_delta_max: 0.0,
            saturation_delta_max: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p_ok = |p: f64| (0.0..=1.0).contains(&p);
        let [lo, hi] = self.resize_scale_range;
        if !p_ok(self.horizontal_flip_p) || !p_ok(self.vertical_flip_p) {
            return Err(Error::Config("flip probabilities must lie in [0, 1]".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("resize scale range [{lo}, {hi}] must satisfy 0 < lo <= hi <= 1")));
        }
        if !(0.0..=180.0).contains(&self.rotation_max_deg)
            || !(0.0..=1.0).contains(&self.brightness_delta_max)
            || !(0.0..1.0).contains(&self.saturation_delta_max)
        {
            return Err(Error::Config(format!("augmentation magnitudes out of range: {self:?}")));
        }
        Ok(())
    }

    fn rng_for(&self, id: &str, nonce: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update(nonce.to_le_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }
}

/// Draws from `[-max, max]`; always consumes one value so the stream layout
/// does not depend on the policy.
fn symmetric(rng: &mut ChaCha8Rng, max: f64) -> f64 {
    let u: f64 = rng.random();
    (2.0 * u - 1.0) * max
}

/// Augmented copy of `sample`: rotation, crop-and-resize, flips, brightness
/// shift and saturation scaling, in that order, then clamping to `[0,1]`.
/// Label, id and static features are carried over unchanged.
pub fn augment(sample: &Sample, policy: &AugmentationPolicy, epoch_nonce: u64) -> Result<Sample> {
    policy.validate()?;
    let mut rng = policy.rng_for(&sample.id, epoch_nonce);
    let angle = symmetric(&mut rng, policy.rotation_max_deg);
    let [lo, hi] = policy.resize_scale_range;
    let scale = lo + (hi - lo) * rng.random::<f64>();
    let crop_u: f64 = rng.random();
    let crop_v: f64 = rng.random();
    let hflip = rng.random::<f64>() < policy.horizontal_flip_p;
    let vflip = rng.random::<f64>() < policy.vertical_flip_p;
    let brightness = symmetric(&mut rng, policy.brightness_delta_max);
    let saturation = 1.0 + symmetric(&mut rng, policy.saturation_delta_max);

    let mut img = Planes::from_tensor(&sample.image);
    if angle != 0.0 {
        img = img.rotate(angle);
    }
    if scale < 1.0 {
        img = img.crop_resize(scale, crop_u, crop_v);
    }
    if hflip {
        img.flip_horizontal();
    }
    if vflip {
        img.flip_vertical();
    }
    if brightness != 0.0 {
        img.data.iter_mut().for_each(|v| *v += brightness);
    }
    if saturation != 1.0 {
        img.scale_saturation(saturation);
    }
    img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    Ok(Sample {
        id: sample.id.clone(),
        image: Tensor::new(vec![3, img.h, img.w], img.data)?,
        static_features: sample.static_features,
        label: sample.label,
    })
}

/// Reflects an index into `0..n` (mirror without repeating the edge).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

#[derive(Clone, Debug)]
pub(crate) struct Planes {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Planes {
    pub fn from_tensor(t: &Tensor) -> Self {
        Planes {
            h: t.shape()[1],
            w: t.shape()[2],
            data: t.data().to_vec(),
        }
    }

    fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// Bilinear sample with reflect padding.
    fn sample(&self, c: usize, y: f64, x: f64) -> f64 {
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let ya = reflect(y0, self.h);
        let yb = reflect(y0 + 1, self.h);
        let xa = reflect(x0, self.w);
        let xb = reflect(x0 + 1, self.w);
        let top = self.get(c, ya, xa) * (1.0 - fx) + self.get(c, ya, xb) * fx;
        let bottom = self.get(c, yb, xa) * (1.0 - fx) + self.get(c, yb, xb) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn rotate(&self, degrees: f64) -> Planes {
        let (sin, cos) = degrees.to_radians().sin_cos();
        let cy = (self.h as f64 - 1.0) / 2.0;
        let cx = (self.w as f64 - 1.0) / 2.0;
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let sx = cos * dx + sin * dy + cx;
                    let sy = -sin * dx + cos * dy + cy;
                    data[(c * self.h + y) * self.w + x] = self.sample(c, sy, sx);
                }
            }
        }
        Planes { h: self.h, w: self.w, data }
    }

    /// Crops a `scale`-sized window at relative position `(u, v)` and resizes
    /// it back to the full size bilinearly.
    fn crop_resize(&self, scale: f64, u: f64, v: f64) -> Planes {
        let ch = scale * self.h as f64;
        let cw = scale * self.w as f64;
        let top = v * (self.h as f64 - ch);
        let left = u * (self.w as f64 - cw);
        let mut data = vec![0.0; self.data.len()];
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    let sy = top + (y as f64 + 0.5) * ch / self.h as f64 - 0.5;
                    let sx = left + (x as f64 + 0.5) * cw / self.w as f64 - 0.5;
                    data[(c * self.h + y) * self.w + x] = self.sample(c, sy, sx);
                }
            }
        }
        Planes { h: self.h, w: self.w, data }
    }

    pub fn flip_horizontal(&mut self) {
        let w = self.w;
        for row in self.data.chunks_exact_mut(w) {
            row.reverse();
        }
    }

    pub fn flip_vertical(&mut self) {
        let (h, w) = (self.h, self.w);
        for plane in self.data.chunks_exact_mut(h * w) {
            for y in 0..h / 2 {
                let (a, b) = plane.split_at_mut((h - 1 - y) * w);
                a[y * w..(y + 1) * w].swap_with_slice(&mut b[..w]);
            }
        }
    }

    /// Scales HSV saturation by `factor` with hue and value fixed. In RGB this
    /// moves each channel toward or away from the pixel maximum; saturation
    /// is capped at 1.
    fn scale_saturation(&mut self, factor: f64) {
        let n = self.h * self.w;
        for i in 0..n {
            let (r, g, b) = (self.data[i], self.data[n + i], self.data[2 * n + i]);
            let v = r.max(g).max(b);
            let min = r.min(g).min(b);
            if v <= 0.0 || v == min {
                continue;
            }
            let s = (v - min) / v;
            let k = factor.min(1.0 / s);
            for c in 0..3 {
                let x = self.data[c * n + i];
                self.data[c * n + i] = v - k * (v - x);
            }
        }
    }
}
