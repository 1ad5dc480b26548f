//! Reading and writing the on-disk dataset layout: a `metadata.csv` table
//! (`image_name,age,sex,site,target`) beside a directory of RGB images.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use super::{PatientInfo, Sample, Sex, Site};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METADATA_FILE: &str = "metadata.csv";
pub const METADATA_HEADER: [&str; 5] = ["image_name", "age", "sex", "site", "target"];
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Images are resized to this size when they differ.
    pub height: usize,
    pub width: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions { height: 32, width: 32 }
    }
}

fn find_image(dir: &Path, name: &str) -> Option<PathBuf> {
    let direct = dir.join(name);
    if direct.is_file() {
        return Some(direct);
    }
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
}

fn load_image(path: &Path, opts: &IngestOptions) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = if img.width() as usize != opts.width || img.height() as usize != opts.height {
        image::imageops::resize(&img, opts.width as u32, opts.height as u32, FilterType::Triangle)
    } else {
        img
    };
    let (h, w) = (opts.height, opts.width);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// One [`Sample`] per metadata row, in file order.
pub fn ingest(image_dir: &Path, metadata_file: &Path, opts: &IngestOptions) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(metadata_file)
        .map_err(|e| Error::Schema(format!("{}: {e}", metadata_file.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: {e}", metadata_file.display())))?
        .clone();
    let mut cols = [0usize; 5];
    for (slot, column) in cols.iter_mut().zip(METADATA_HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::Schema(format!("{}: missing column `{column}`", metadata_file.display())))?;
    }

    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(format!("row {}: {e}", row + 1)))?;
        let field = |i: usize| record.get(cols[i]).unwrap_or("");
        let id = field(0).to_string();
        let ctx = |msg: String| Error::Data(format!("row {} (`{id}`): {msg}", row + 1));
        let age: f64 = field(1)
            .parse()
            .map_err(|_| ctx(format!("age `{}` is not a number", field(1))))?;
        let sex = Sex::parse(field(2)).map_err(|e| ctx(e.to_string()))?;
        let site = Site::parse(field(3)).map_err(|e| ctx(e.to_string()))?;
        let label = match field(4) {
            "0" => 0,
            "1" => 1,
            other => return Err(ctx(format!("label error: target `{other}` is not 0 or 1"))),
        };
        let path = find_image(image_dir, &id).ok_or_else(|| ctx(format!("image not found in {}", image_dir.display())))?;
        let image = load_image(&path, opts)?;
        let info = PatientInfo { age, sex, site };
        samples.push(Sample::new(id.clone(), image, info.encode(), label)?);
    }
    Ok(samples)
}

fn format_age(age_norm: f64) -> String {
    let age = age_norm * 100.0;
    if (age - age.round()).abs() < 1e-9 {
        format!("{}", age.round())
    } else {
        format!("{age}")
    }
}

fn to_rgb(image: &Tensor) -> RgbImage {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (d[c * h * w + y as usize * w + x as usize] * 255.0).round().clamp(0.0, 255.0) as u8;
        Rgb([at(0), at(1), at(2)])
    })
}

/// Writes `samples` as `<dir>/metadata.csv` plus `<dir>/images/<id>.png`.
/// Images quantize to 8 bits per channel.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let meta_path = dir.join(METADATA_FILE);
    let mut w = csv::Writer::from_path(&meta_path).map_err(|e| Error::Schema(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Schema(format!("{}: {e}", meta_path.display()));
    w.write_record(METADATA_HEADER).map_err(csv_err)?;
    for s in samples {
        let (_, sex, site) = PatientInfo::decode(&s.static_features)?;
        w.write_record([
            s.id.as_str(),
            &format_age(s.static_features[0]),
            sex.as_str(),
            site.as_str(),
            if s.label == 1 { "1" } else { "0" },
        ])
        .map_err(csv_err)?;
        let path = images.join(format!("{}.png", s.id));
        to_rgb(&s.image).save(&path).map_err(|source| Error::Image { path, source })?;
    }
    w.flush().map_err(|e| Error::io(&meta_path, e))
}
