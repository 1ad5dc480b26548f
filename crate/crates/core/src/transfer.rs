//! Weight archives and the transfer-learning protocol: load every pretrained
//! tensor except the classification head, which is replaced by a fresh
//! Kaiming-initialized binary head.
//!
//! # Archive layout (`LSNBW001`)
//!
//! All integers little-endian.
//!
//! | field | encoding |
//! |---|---|
//! | magic | 8 bytes, ASCII `LSNBW001` |
//! | entry count | u32 |
//! | per entry: name length | u32 |
//! | per entry: name | UTF-8 bytes |
//! | per entry: rank | u32 |
//! | per entry: dims | rank × u64 |
//! | per entry: byte offset | u64, relative to the payload start |
//! | payload length | u64, bytes |
//! | payload | row-major IEEE-754 binary32 values |
//!
//! Entries are written in ascending offset order with no gaps. Readers accept
//! any manifest order as long as the regions tile the payload exactly.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"LSNBW001";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// In-memory form of an archive file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightArchive {
    manifest: Vec<ManifestEntry>,
    payload: Vec<f32>,
}

impl WeightArchive {
    /// Packs named tensors in the given order, rounding to nearest binary32.
    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Self> {
        let mut manifest = Vec::new();
        let mut payload = Vec::new();
        let mut names = HashSet::new();
        for (name, t) in tensors {
            if !names.insert(name.to_string()) {
                return Err(Error::Format(format!("duplicate tensor name `{name}`")));
            }
            manifest.push(ManifestEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                byte_offset: (payload.len() * 4) as u64,
            });
            payload.extend(t.data().iter().map(|&v| v as f32));
        }
        Ok(WeightArchive { manifest, payload })
    }

    pub fn from_model(model: &Model) -> Result<Self> {
        Self::from_tensors(model.ordered_params().map(|(p, t)| (p.name.as_str(), t)))
    }

    pub fn manifest(&self) -> &[ManifestEntry] {
        &self.manifest
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&ManifestEntry> {
        self.manifest.iter().find(|e| e.name == name)
    }

    /// Stored values of one tensor.
    pub fn values(&self, name: &str) -> Option<&[f32]> {
        let e = self.entry(name)?;
        let start = e.byte_offset as usize / 4;
        Some(&self.payload[start..start + e.numel()])
    }

    /// A tensor widened back to 64-bit.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let e = self.entry(name)?;
        let data = self.values(name)?.iter().map(|&v| f64::from(v)).collect();
        Some(Tensor::new(e.shape.clone(), data).expect("manifest shape matches payload"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.manifest.len() as u32).to_le_bytes());
        for e in &self.manifest {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&e.byte_offset.to_le_bytes());
        }
        out.extend_from_slice(&((self.payload.len() * 4) as u64).to_le_bytes());
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses and fully validates an archive. Nothing is returned unless the
    /// whole file is well formed.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic (expected LSNBW001)".into()));
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?
                .to_string();
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate layer name `{name}`")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                let d = r.u64()?;
                if d == 0 {
                    return Err(Error::Format(format!("`{name}` has a zero dimension")));
                }
                shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let byte_offset = r.u64()?;
            manifest.push(ManifestEntry { name, shape, byte_offset });
        }
        let payload_len = r.u64()? as usize;
        if !payload_len.is_multiple_of(4) {
            return Err(Error::Format(format!("payload length {payload_len} is not a multiple of 4")));
        }
        let raw = r.take(payload_len)?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
        }

        let mut regions: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.len());
        for e in &manifest {
            let size = e
                .shape
                .iter()
                .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| Error::Format(format!("`{}` is too large", e.name)))?;
            if e.byte_offset % 4 != 0 {
                return Err(Error::Format(format!("`{}` offset {} is not 4-byte aligned", e.name, e.byte_offset)));
            }
            regions.push((e.byte_offset, size, &e.name));
        }
        regions.sort();
        let mut cursor = 0u64;
        for (offset, size, name) in regions {
            if offset != cursor {
                return Err(Error::Format(format!(
                    "`{name}` starts at byte {offset}, expected {cursor} (gap or overlap)"
                )));
            }
            cursor = offset + size;
        }
        if cursor != payload_len as u64 {
            return Err(Error::Format(format!(
                "manifest covers {cursor} bytes but payload holds {payload_len}"
            )));
        }

        let payload = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(WeightArchive { manifest, payload })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Model with every parameter taken from the archive, head included.
    pub fn to_model(&self, spec: ModelSpec) -> Result<Model> {
        let layout = spec.layout()?;
        let mut params = BTreeMap::new();
        let mut missing = Vec::new();
        for p in &layout.params {
            match self.tensor(&p.name) {
                Some(t) => {
                    check_shape(&p.name, t.shape(), &p.shape)?;
                    params.insert(p.name.clone(), t);
                }
                None => missing.push(p.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingLayers(missing));
        }
        Model::from_params(spec, params)
    }
}

fn check_shape(name: &str, archive: &[usize], expected: &[usize]) -> Result<()> {
    if archive == expected {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            name: name.to_string(),
            archive: archive.to_vec(),
            expected: expected.to_vec(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated archive: needed {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save(model: &Model, path: &Path) -> Result<WeightArchive> {
    let archive = WeightArchive::from_model(model)?;
    archive.write(path)?;
    Ok(archive)
}

/// Transfer-learning load: every non-head parameter comes from the archive
/// unchanged; the head gets fresh Kaiming weights from `seed` and a zero bias.
/// Archive entries the spec does not use (including a pretrained head of any
/// width) are ignored.
pub fn load_with_new_head(archive: &WeightArchive, spec: ModelSpec, seed: u64) -> Result<Model> {
    let layout = spec.layout()?;
    let head = spec.head.name.clone();
    let mut params = BTreeMap::new();
    let mut missing = Vec::new();
    for p in &layout.params {
        if p.layer == head {
            let t = if p.name.ends_with(".weight") {
                kaiming_init(&p.shape, param_seed(seed, &p.name))?
            } else {
                Tensor::zeros(&p.shape)
            };
            params.insert(p.name.clone(), t);
            continue;
        }
        match archive.tensor(&p.name) {
            Some(t) => {
                check_shape(&p.name, t.shape(), &p.shape)?;
                params.insert(p.name.clone(), t);
            }
            None => missing.push(p.name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingLayers(missing));
    }
    Model::from_params(spec, params)
}

/// Fan-in of a linear `[out, in]` or conv `[out, in, k, k]` weight.
pub fn fan_in(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}

/// He-normal weights: zero mean, standard deviation `sqrt(2 / fan_in)`.
pub fn kaiming_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    if shape.len() < 2 || shape.contains(&0) {
        return Err(Error::Config(format!("kaiming init needs a [out, in, ..] shape, got {shape:?}")));
    }
    let fan = fan_in(shape);
    let std = (2.0 / fan as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Stream seed for one named parameter: FNV-1a of the name mixed into the
/// model seed with a splitmix64 finalizer.
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiming_std_for_fan_in_two_is_one() {
        let t = kaiming_init(&[3, 2], 0).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!((2.0f64 / fan_in(&[3, 2]) as f64).sqrt(), 1.0);
    }

    #[test]
    fn kaiming_empirical_std() {
        let t = kaiming_init(&[1000, 100], 42).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((0.1344..=0.1485).contains(&std), "{std}");
        assert!(mean.abs() < 0.005, "{mean}");
    }

    #[test]
    fn kaiming_is_seeded() {
        assert_eq!(kaiming_init(&[4, 3, 2, 2], 9).unwrap(), kaiming_init(&[4, 3, 2, 2], 9).unwrap());
        assert_ne!(kaiming_init(&[4, 3, 2, 2], 9).unwrap(), kaiming_init(&[4, 3, 2, 2], 10).unwrap());
    }

    #[test]
    fn kaiming_rejects_zero_fan_in() {
        assert!(matches!(kaiming_init(&[4, 0], 1), Err(Error::Config(_))));
        assert!(matches!(kaiming_init(&[4], 1), Err(Error::Config(_))));
    }

    #[test]
    fn empty_archive_is_valid() {
        let a = WeightArchive::from_tensors(std::iter::empty()).unwrap();
        let bytes = a.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 + 8);
        assert_eq!(WeightArchive::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let bytes = WeightArchive::from_tensors([("a", &t)]).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(WeightArchive::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(WeightArchive::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(WeightArchive::from_bytes(&extra), Err(Error::Format(_))));
    }
}
