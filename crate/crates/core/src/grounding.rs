//! Mask preparation and the grounding objectives on head-averaged attention:
//! the token-level mass-ratio loss, the pixel-level binary cross-entropy and
//! their weighted combination with the denoising loss.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::AttentionRecord;
use crate::error::{Error, Result};

/// Clamp applied to attention values before taking logs in the pixel loss.
pub const PIXEL_LOSS_CLAMP: f64 = 1e-7;

/// Weight of the token loss in the joint objective.
pub const DEFAULT_LAMBDA_TOKEN: f64 = 1e-3;
/// Weight of the pixel loss in the joint objective.
pub const DEFAULT_GAMMA_PIXEL: f64 = 5e-5;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Invalid(format!("mask dims must be >= 1, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} mask values for a {height}x{width} mask", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Invalid(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        Self { height, width, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = on as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a == 1 && **b == 1).count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a == 1 || **b == 1).count()
    }
}

/// Bilinear resampling with half-pixel centers followed by thresholding at
/// 0.5. Only downscaling (or identity) is allowed.
pub fn downscale_binarize(mask: &BinaryMask, target: (usize, usize)) -> Result<BinaryMask> {
    let (sh, sw) = mask.shape();
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::Invalid(format!("target mask dims must be >= 1, got {th}x{tw}")));
    }
    if th > sh || tw > sw {
        return Err(Error::Invalid(format!(
            "cannot upscale a {sh}x{sw} mask to {th}x{tw}"
        )));
    }
    if (th, tw) == (sh, sw) {
        return Ok(mask.clone());
    }
    let sample = |src: usize, dst: usize, i: usize| -> (usize, usize, f64) {
        let scale = src as f64 / dst as f64;
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let v = |y: usize, x: usize| mask.data[y * sw + x] as f64;
    Ok(BinaryMask::from_fn(th, tw, |y, x| {
        let (y0, y1, fy) = sample(sh, th, y);
        let (x0, x1, fx) = sample(sw, tw, x);
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bottom = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy >= 0.5
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingEntry {
    pub token_position: usize,
    pub mask: BinaryMask,
}

/// Grounded token positions of one caption with their binary masks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenGroundingSet {
    entries: Vec<GroundingEntry>,
}

impl TokenGroundingSet {
    pub fn new(entries: Vec<GroundingEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.token_position) {
                return Err(Error::Invalid(format!("token position {} grounded twice", e.token_position)));
            }
        }
        if let Some(first) = entries.first() {
            if entries.iter().any(|e| e.mask.shape() != first.mask.shape()) {
                return Err(Error::Shape("grounding masks must share one resolution".into()));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[GroundingEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.entries.first().map(|e| e.mask.shape())
    }

    /// Every mask passed through [`downscale_binarize`].
    pub fn resized(&self, target: (usize, usize)) -> Result<Self> {
        let entries = self
            .entries
            .iter()
            .map(|e| {
                Ok(GroundingEntry { token_position: e.token_position, mask: downscale_binarize(&e.mask, target)? })
            })
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_token: f64,
    pub gamma_pixel: f64,
    pub layer_ids: BTreeSet<String>,
}

impl LossWeights {
    pub fn new<S: Into<String>>(lambda_token: f64, gamma_pixel: f64, layer_ids: impl IntoIterator<Item = S>) -> Result<Self> {
        let w = Self { lambda_token, gamma_pixel, layer_ids: layer_ids.into_iter().map(Into::into).collect() };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_token", self.lambda_token), ("gamma_pixel", self.gamma_pixel)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.is_grounded() && self.layer_ids.is_empty() {
            return Err(Error::Config("grounding weights are nonzero but no layers were selected".into()));
        }
        Ok(())
    }

    pub fn is_grounded(&self) -> bool {
        self.lambda_token > 0.0 || self.gamma_pixel > 0.0
    }
}

/// Dense per-layer targets: masks `[B, N, L]`, token indicator `[B, L]` and
/// the per-sample normalizer `[B]` (zero for samples without groundings).
struct DenseTargets {
    masks: Tensor,
    indicator: Tensor,
    counts: Vec<usize>,
}

impl DenseTargets {
    fn build(record: &AttentionRecord, groundings: &[TokenGroundingSet]) -> Result<Self> {
        let b = record.batch_size();
        if groundings.len() != b {
            return Err(Error::Shape(format!(
                "{} grounding sets for an attention batch of {b}",
                groundings.len()
            )));
        }
        let n = record.num_positions();
        let l = record.num_tokens();
        let mut masks = vec![0f64; b * n * l];
        let mut indicator = vec![0f64; b * l];
        let mut counts = Vec::with_capacity(b);
        for (bi, set) in groundings.iter().enumerate() {
            for e in set.entries() {
                if e.mask.shape() != record.spatial_shape {
                    return Err(Error::Shape(format!(
                        "layer {}: mask {:?} does not match attention map {:?}",
                        record.layer_id,
                        e.mask.shape(),
                        record.spatial_shape
                    )));
                }
                if e.token_position >= l {
                    return Err(Error::Shape(format!(
                        "token position {} outside {l} attention columns",
                        e.token_position
                    )));
                }
                indicator[bi * l + e.token_position] = 1.0;
                for (u, &m) in e.mask.data().iter().enumerate() {
                    masks[(bi * n + u) * l + e.token_position] = m as f64;
                }
            }
            counts.push(set.len());
        }
        let dtype = record.map.dtype();
        Ok(Self {
            masks: Tensor::from_vec(masks, (b, n, l), &Device::Cpu)?.to_dtype(dtype)?,
            indicator: Tensor::from_vec(indicator, (b, l), &Device::Cpu)?.to_dtype(dtype)?,
            counts,
        })
    }

    fn grounded_samples(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    /// Per-sample weights `1 / (scale(N_b) * S)` for grounded samples, 0 otherwise.
    fn sample_weights(&self, scale: impl Fn(usize) -> f64, dtype: candle_core::DType) -> Result<Tensor> {
        let s = self.grounded_samples() as f64;
        let w: Vec<f64> = self
            .counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / (scale(c) * s) })
            .collect();
        let len = w.len();
        Ok(Tensor::from_vec(w, len, &Device::Cpu)?.to_dtype(dtype)?)
    }
}

fn zero_like(record: &AttentionRecord) -> Result<Tensor> {
    Ok(Tensor::zeros((), record.map.dtype(), &Device::Cpu)?)
}

/// Mean over grounded tokens of `(1 - inside-mask mass / total mass)²`,
/// where mass is the token's attention column summed over positions.
/// Averaged over the grounded samples of the batch.
pub fn token_loss(record: &AttentionRecord, groundings: &[TokenGroundingSet]) -> Result<Tensor> {
    let targets = DenseTargets::build(record, groundings)?;
    if targets.grounded_samples() == 0 {
        log::warn!("layer {}: no grounded tokens, token loss is 0", record.layer_id);
        return zero_like(record);
    }
    let a = &record.map;
    let inside = a.mul(&targets.masks)?.sum(1)?;
    let total = a.sum(1)?;
    let shortfall = (1.0 - inside.div(&total)?)?.sqr()?.mul(&targets.indicator)?;
    let weights = targets.sample_weights(|n| n as f64, a.dtype())?;
    Ok(shortfall.sum(1)?.mul(&weights)?.sum_all()?)
}

/// Binary cross-entropy between attention values and mask values over the
/// grounded tokens and all positions, with values clamped to
/// `[PIXEL_LOSS_CLAMP, 1 - PIXEL_LOSS_CLAMP]`.
pub fn pixel_loss(record: &AttentionRecord, groundings: &[TokenGroundingSet]) -> Result<Tensor> {
    let targets = DenseTargets::build(record, groundings)?;
    if targets.grounded_samples() == 0 {
        log::warn!("layer {}: no grounded tokens, pixel loss is 0", record.layer_id);
        return zero_like(record);
    }
    let a = record.map.clamp(PIXEL_LOSS_CLAMP, 1.0 - PIXEL_LOSS_CLAMP)?;
    let m = &targets.masks;
    let pos = m.mul(&a.log()?)?;
    let neg = (1.0 - m)?.mul(&(1.0 - &a)?.log()?)?;
    let bce = (pos + neg)?.neg()?.broadcast_mul(&targets.indicator.unsqueeze(1)?)?;
    let n = record.num_positions() as f64;
    let weights = targets.sample_weights(|c| c as f64 * n, a.dtype())?;
    Ok(bce.sum(2)?.sum(1)?.mul(&weights)?.sum_all()?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub denoise: f64,
    pub token_per_layer: BTreeMap<String, f64>,
    pub pixel_per_layer: BTreeMap<String, f64>,
    pub total: f64,
}

/// Denoising loss plus `λ L_token + γ L_pixel` summed over the weighted
/// layers. Groundings are given at image resolution and resized per layer.
/// Terms whose weight is zero are reported in the breakdown but do not enter
/// the returned total.
pub fn tokencompose_loss(
    denoise: &Tensor,
    per_layer_maps: &BTreeMap<String, AttentionRecord>,
    groundings: &[TokenGroundingSet],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    weights.validate()?;
    let mut total = denoise.clone();
    let mut breakdown = LossBreakdown { denoise: denoise.to_scalar_f64()?, ..Default::default() };
    let mut resized: HashMap<(usize, usize), Vec<TokenGroundingSet>> = HashMap::new();
    for layer in &weights.layer_ids {
        let record = per_layer_maps.get(layer).ok_or_else(|| {
            Error::Config(format!(
                "no attention map recorded for loss layer {layer}; recorded: {:?}",
                per_layer_maps.keys().collect::<Vec<_>>()
            ))
        })?;
        if !resized.contains_key(&record.spatial_shape) {
            let sets = groundings.iter().map(|g| g.resized(record.spatial_shape)).collect::<Result<Vec<_>>>()?;
            resized.insert(record.spatial_shape, sets);
        }
        let sets = &resized[&record.spatial_shape];
        let tok = token_loss(record, sets)?;
        let pix = pixel_loss(record, sets)?;
        breakdown.token_per_layer.insert(layer.clone(), tok.to_scalar_f64()?);
        breakdown.pixel_per_layer.insert(layer.clone(), pix.to_scalar_f64()?);
        if weights.lambda_token > 0.0 {
            total = (total + (tok * weights.lambda_token)?)?;
        }
        if weights.gamma_pixel > 0.0 {
            total = (total + (pix * weights.gamma_pixel)?)?;
        }
    }
    breakdown.total = total.to_scalar_f64()?;
    Ok((total, breakdown))
}

trait ScalarF64 {
    fn to_scalar_f64(&self) -> Result<f64>;
}

impl ScalarF64 for Tensor {
    fn to_scalar_f64(&self) -> Result<f64> {
        Ok(self.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }
}
