//! Agreement between cross-attention maps and ground-truth object masks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grounding::BinaryMask;
use crate::model::unet::{record_pass, DEC_32};
use crate::model::ToyLdm;
use crate::nn::{randn, seeded_rng};
use crate::train::PreparedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouConfig {
    /// Diffusion timestep of the probe; `None` means `T / 2`.
    pub timestep: Option<usize>,
    /// A position belongs to the predicted region when its value is at least
    /// this fraction of the column maximum.
    pub threshold_ratio: f64,
    pub layer: String,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for MiouConfig {
    fn default() -> Self {
        Self { timestep: None, threshold_ratio: 0.4, layer: DEC_32.to_string(), seed: 0, batch_size: 16 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub tokens: usize,
    /// Samples without grounded tokens.
    pub skipped: usize,
}

/// Bilinear resize of a row-major `(h, w)` grid, sampling at pixel centers.
pub fn upsample_bilinear(values: &[f64], (h, w): (usize, usize), (th, tw): (usize, usize)) -> Result<Vec<f64>> {
    if values.len() != h * w || h == 0 || w == 0 {
        return Err(Error::Shape(format!("{} values for a {h}x{w} grid", values.len())));
    }
    let coord = |src: usize, dst: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        (lo, (lo + 1).min(src - 1), pos - lo as f64)
    };
    let mut out = Vec::with_capacity(th * tw);
    for y in 0..th {
        let (y0, y1, fy) = coord(h, th, y);
        for x in 0..tw {
            let (x0, x1, fx) = coord(w, tw, x);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bottom = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// IoU between the thresholded attention column and `mask`. The column is
/// upsampled to the mask resolution first.
pub fn token_iou(column: &[f64], shape: (usize, usize), mask: &BinaryMask, threshold_ratio: f64) -> Result<f64> {
    let up = upsample_bilinear(column, shape, mask.shape())?;
    let max = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold_ratio * max;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in up.iter().zip(mask.data()) {
        let pred = v >= cut;
        let truth = m != 0;
        inter += (pred && truth) as usize;
        union += (pred || truth) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Mean token IoU over every grounded token of `samples`, probing one layer
/// at a fixed timestep with per-sample noise derived from the seed.
pub fn attention_miou(model: &ToyLdm, samples: &[PreparedSample], cfg: &MiouConfig) -> Result<MiouResult> {
    let t = cfg.timestep.unwrap_or(model.schedule.num_steps() / 2);
    if t == 0 || t > model.schedule.num_steps() {
        return Err(Error::Config(format!("probe timestep {t} outside [1, {}]", model.schedule.num_steps())));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let (mut sum, mut tokens, mut skipped) = (0.0, 0usize, 0usize);
    let indexed: Vec<(usize, &PreparedSample)> = samples.iter().enumerate().collect();
    for chunk in indexed.chunks(cfg.batch_size) {
        let graded: Vec<&(usize, &PreparedSample)> = chunk.iter().filter(|(_, s)| !s.grounding.is_empty()).collect();
        skipped += chunk.len() - graded.len();
        if graded.is_empty() {
            continue;
        }
        let images: Vec<&Tensor> = graded.iter().map(|(_, s)| &s.image).collect();
        let z0 = Tensor::cat(&images, 0)?;
        let noise = graded
            .iter()
            .map(|(i, s)| randn(&mut seeded_rng(cfg.seed, &format!("miou-{i}")), s.image.dims(), s.image.dtype()))
            .collect::<Result<Vec<_>>>()?;
        let noise = Tensor::cat(&noise, 0)?;
        let ts = vec![t; graded.len()];
        let zt = model.schedule.add_noise(&z0, &ts, &noise)?;
        let captions: Vec<&str> = graded.iter().map(|(_, s)| s.caption.as_str()).collect();
        let text = model.text.encode_batch(&captions)?;
        let (_, maps) = record_pass(&model.unet, &zt, &ts, &text, [cfg.layer.as_str()])?;
        let record = &maps[&cfg.layer];
        for (bi, (_, s)) in graded.iter().enumerate() {
            for e in s.grounding.entries() {
                let col = record.column(bi, e.token_position)?;
                sum += token_iou(&col, record.spatial_shape, &e.mask, cfg.threshold_ratio)?;
                tokens += 1;
            }
        }
    }
    if skipped > 0 {
        log::info!("attention mIoU: skipped {skipped} samples without grounded tokens");
    }
    let miou = if tokens == 0 { 0.0 } else { sum / tokens as f64 };
    Ok(MiouResult { miou, tokens, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(n: usize, x0: usize, x1: usize) -> BinaryMask {
        BinaryMask::from_fn(n, n, |y, x| (x0..x1).contains(&x) && (x0..x1).contains(&y))
    }

    #[test]
    fn proportional_attention_is_perfect() {
        let m = square(8, 2, 5);
        let col: Vec<f64> = m.data().iter().map(|&v| v as f64 * 0.37).collect();
        assert_eq!(token_iou(&col, (8, 8), &m, 0.4).unwrap(), 1.0);
    }

    #[test]
    fn uniform_attention_gives_mask_fraction() {
        let m = square(8, 0, 4);
        let col = vec![0.05; 64];
        assert!((token_iou(&col, (8, 8), &m, 0.4).unwrap() - 16.0 / 64.0).abs() < 1e-12);
    }

    #[test]
    fn invariant_to_positive_scaling_and_upsampled() {
        let m = square(16, 4, 12);
        let col: Vec<f64> = (0..64).map(|i| ((i % 8) as f64 - 3.5).abs().recip() + (i / 8) as f64 * 0.01).collect();
        let a = token_iou(&col, (8, 8), &m, 0.4).unwrap();
        let scaled: Vec<f64> = col.iter().map(|v| v * 17.0).collect();
        assert_eq!(a, token_iou(&scaled, (8, 8), &m, 0.4).unwrap());
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn bilinear_keeps_constants_and_identity() {
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        assert_eq!(upsample_bilinear(&v, (3, 4), (3, 4)).unwrap(), v);
        assert!(upsample_bilinear(&[2.0; 4], (2, 2), (5, 7)).unwrap().iter().all(|&x| (x - 2.0).abs() < 1e-12));
        assert!(upsample_bilinear(&v, (3, 3), (6, 6)).is_err());
    }
}
