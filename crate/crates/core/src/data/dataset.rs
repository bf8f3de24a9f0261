//! On-disk grounded dataset:
//!
//! ```text
//! <dir>/images/<id>.png                          RGB, 8-bit
//! <dir>/masks/<id>/<tokenpos>_<category>.png     single channel, {0, 255}
//! <dir>/metadata.jsonl                           one record per sample
//! <dir>/manifest.json                            registry, seed, count, version
//! ```
//!
//! Category names in mask file names have spaces replaced by `-`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::registry::CategoryRegistry;
use super::scene::{render, tokenize, GroundedSample, Grounding, SceneSampler};
use crate::error::{Error, Result};
use crate::grounding::{downscale_binarize, BinaryMask};
use crate::nn::{derive_seed, seeded_rng};

pub const DATASET_FORMAT: &str = "grounded-ds-v1";
/// Sample count of the reference training set.
pub const REFERENCE_DATASET_SIZE: usize = 4526;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: String,
    pub seed: u64,
    pub count: usize,
    pub resolution: usize,
    pub registry: CategoryRegistry,
    pub sampler: SceneSampler,
    pub samples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub token_position: usize,
    pub category: String,
    pub mask_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataRecord {
    pub id: String,
    pub caption: String,
    pub groundings: Vec<GroundingRecord>,
}

pub fn sample_id(index: usize) -> String {
    format!("{index:06}")
}

/// Renders sample `index` of the dataset identified by `seed`. Each sample
/// has its own derived seed, so samples can be produced in any order.
pub fn render_sample(index: usize, registry: &CategoryRegistry, sampler: &SceneSampler, seed: u64) -> Result<GroundedSample> {
    let sample_seed = derive_seed(seed, &format!("sample-{index}"));
    let mut rng = seeded_rng(sample_seed, "scene");
    let spec = sampler.sample(registry, &mut rng)?;
    let mut s = render(&spec, registry, sample_seed)?;
    s.id = sample_id(index);
    Ok(s)
}

/// Renders `n` samples in memory.
pub fn render_samples(n: usize, registry: &CategoryRegistry, sampler: &SceneSampler, seed: u64) -> Result<Vec<GroundedSample>> {
    (0..n).map(|i| render_sample(i, registry, sampler, seed)).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn png_bytes<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + image::PixelWithColorType,
    C: std::ops::Deref<Target = [u8]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn mask_to_gray(mask: &BinaryMask) -> GrayImage {
    let (h, w) = mask.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }]))
}

/// Writes one sample's image and masks and returns its metadata record.
pub fn write_sample(dir: &Path, sample: &GroundedSample, registry: &CategoryRegistry) -> Result<MetadataRecord> {
    write_atomic(&dir.join("images").join(format!("{}.png", sample.id)), &png_bytes(&sample.image)?)?;
    let mask_dir = dir.join("masks").join(&sample.id);
    fs::create_dir_all(&mask_dir)?;
    let mut groundings = Vec::with_capacity(sample.groundings.len());
    for g in &sample.groundings {
        let slug = registry.get(&g.category).map(|c| c.slug()).unwrap_or_else(|| g.category.replace(' ', "-"));
        let rel = format!("masks/{}/{}_{slug}.png", sample.id, g.token_position);
        write_atomic(&dir.join(&rel), &png_bytes(&mask_to_gray(&g.mask))?)?;
        groundings.push(GroundingRecord { token_position: g.token_position, category: g.category.clone(), mask_file: rel });
    }
    Ok(MetadataRecord { id: sample.id.clone(), caption: sample.caption.clone(), groundings })
}

pub fn generate_dataset(
    n: usize,
    registry: &CategoryRegistry,
    sampler: &SceneSampler,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::Invalid("dataset must contain at least one sample".into()));
    }
    registry.validate()?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    let mut meta = Vec::new();
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let sample = render_sample(i, registry, sampler, seed)?;
        let record = write_sample(out_dir, &sample, registry)?;
        serde_json::to_writer(&mut meta, &record)?;
        meta.push(b'\n');
        ids.push(sample.id);
    }
    write_atomic(&out_dir.join("metadata.jsonl"), &meta)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT.to_string(),
        seed,
        count: n,
        resolution: sampler.resolution,
        registry: registry.clone(),
        sampler: sampler.clone(),
        samples: ids,
    };
    write_atomic(&out_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != DATASET_FORMAT {
        return Err(Error::Invalid(format!(
            "unsupported dataset format {:?} (expected {DATASET_FORMAT})",
            m.format_version
        )));
    }
    Ok(m)
}

/// Square center crop followed by a resize to `size x size`.
pub fn center_crop_resize_rgb(img: &RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    }
}

/// Square center crop of a mask, then bilinear resize and binarization.
pub fn center_crop_resize_mask(mask: &BinaryMask, size: usize) -> Result<BinaryMask> {
    let (h, w) = mask.shape();
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let cropped = BinaryMask::from_fn(side, side, |y, x| mask.get(y + oy, x + ox));
    if side >= size {
        downscale_binarize(&cropped, (size, size))
    } else {
        // Upscaling: nearest neighbour.
        Ok(BinaryMask::from_fn(size, size, |y, x| cropped.get(y * side / size, x * side / size)))
    }
}

/// Streams samples from a dataset directory, validating each record.
pub struct DatasetReader {
    dir: PathBuf,
    meta_path: PathBuf,
    lines: std::io::Lines<BufReader<File>>,
    line_no: usize,
    resolution: usize,
}

pub fn load_dataset(dir: &Path, resolution: usize) -> Result<DatasetReader> {
    let meta_path = dir.join("metadata.jsonl");
    let file = File::open(&meta_path)?;
    Ok(DatasetReader { dir: dir.to_path_buf(), meta_path, lines: BufReader::new(file).lines(), line_no: 0, resolution })
}

impl DatasetReader {
    fn malformed(&self, msg: impl Into<String>) -> Error {
        Error::Metadata { path: self.meta_path.clone(), line: self.line_no, msg: msg.into() }
    }

    fn parse(&self, line: &str) -> Result<GroundedSample> {
        let rec: MetadataRecord = serde_json::from_str(line).map_err(|e| self.malformed(e.to_string()))?;
        if rec.id.is_empty() {
            return Err(self.malformed("empty sample id"));
        }
        let tokens = tokenize(&rec.caption);
        let img_path = self.dir.join("images").join(format!("{}.png", rec.id));
        let image = image::open(&img_path)?.to_rgb8();
        let image = center_crop_resize_rgb(&image, self.resolution);
        let mut seen = std::collections::BTreeSet::new();
        let mut groundings = Vec::with_capacity(rec.groundings.len());
        for g in &rec.groundings {
            let noun = g.category.split_whitespace().last().unwrap_or("").to_lowercase();
            match tokens.get(g.token_position) {
                Some(t) if *t == noun => {}
                other => {
                    return Err(self.malformed(format!(
                        "token {} of caption {:?} is {:?}, expected the noun {noun:?} of {:?}",
                        g.token_position, rec.caption, other, g.category
                    )))
                }
            }
            if !seen.insert(g.token_position) {
                return Err(self.malformed(format!("token {} grounded twice", g.token_position)));
            }
            let mask_path = self.dir.join(&g.mask_file);
            if !mask_path.is_file() {
                return Err(Error::MissingMask {
                    sample: rec.id.clone(),
                    token: format!("{}:{}", g.token_position, tokens[g.token_position]),
                    path: mask_path,
                });
            }
            let gray = image::open(&mask_path)?.to_luma8();
            let (w, h) = gray.dimensions();
            let raw = BinaryMask::from_fn(h as usize, w as usize, |y, x| gray.get_pixel(x as u32, y as u32).0[0] >= 128);
            let mask = center_crop_resize_mask(&raw, self.resolution)?;
            if mask.is_empty() {
                return Err(self.malformed(format!("mask {} is empty", g.mask_file)));
            }
            groundings.push(Grounding { token_position: g.token_position, category: g.category.clone(), mask });
        }
        Ok(GroundedSample { id: rec.id, image, caption: rec.caption, groundings })
    }
}

impl Iterator for DatasetReader {
    type Item = Result<GroundedSample>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(self.parse(&line));
        }
    }
}

/// Appends a line to a JSON-lines file.
pub(crate) fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    f.write_all(&line)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_layout() {
        let dir = tempfile::tempdir().unwrap();
        let reg = CategoryRegistry::default();
        let m = generate_dataset(1, &reg, &SceneSampler::default(), 7, dir.path()).unwrap();
        assert_eq!(m.count, 1);
        assert!(dir.path().join("images/000000.png").is_file());
        let masks = fs::read_dir(dir.path().join("masks/000000")).unwrap().count();
        assert!(masks >= 1);
        let meta = fs::read_to_string(dir.path().join("metadata.jsonl")).unwrap();
        assert_eq!(meta.lines().count(), 1);
    }

    #[test]
    fn zero_samples_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(0, &CategoryRegistry::default(), &SceneSampler::default(), 1, dir.path()).is_err());
    }

    #[test]
    fn crop_resize_identity_at_native_size() {
        let m = BinaryMask::from_fn(8, 8, |y, x| (x + y) % 3 == 0);
        assert_eq!(center_crop_resize_mask(&m, 8).unwrap(), m);
        let wide = BinaryMask::from_fn(4, 8, |_, x| x >= 4);
        let sq = center_crop_resize_mask(&wide, 4).unwrap();
        assert_eq!(sq.data(), &[0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1]);
    }
}
