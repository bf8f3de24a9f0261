//! DDIM and ancestral samplers with classifier-free guidance.

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::schedule::NoiseSchedule;
use crate::model::unet::EpsilonModel;
use crate::nn::{randn, seeded_rng};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    /// Deterministic DDIM (η = 0).
    Ddim,
    /// Stochastic updates with the DDPM posterior variance (η = 1).
    Ancestral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub sampler: SamplerKind,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, guidance_scale: DEFAULT_GUIDANCE, sampler: SamplerKind::Ddim }
    }
}

/// Evenly spaced timesteps in `[1, T]`, descending, ending at 1.
pub fn timestep_sequence(num_train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > num_train_steps {
        return Err(Error::Config(format!("sampling steps must be in [1, {num_train_steps}], got {steps}")));
    }
    let mut ts: Vec<usize> = (0..steps)
        .map(|i| {
            if steps == 1 {
                num_train_steps
            } else {
                1 + ((num_train_steps - 1) as f64 * i as f64 / (steps - 1) as f64).round() as usize
            }
        })
        .collect();
    ts.dedup();
    ts.reverse();
    Ok(ts)
}

/// Text conditioning for a batch: conditional embeddings `[B, L, d]` and the
/// null embedding `[1, L, d]`.
pub struct Conditioning<'a> {
    pub cond: &'a Tensor,
    pub uncond: &'a Tensor,
    /// Whether the model was trained with condition dropout.
    pub null_trained: bool,
}

/// Draws `B` images, one per entry of `seeds`; element `i` depends only on
/// `seeds[i]` and its conditioning. Output is `[B, H, W, C]` in `[-1, 1]`.
pub fn sample<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    cond: &Conditioning,
    shape: (usize, usize, usize),
    cfg: &SampleConfig,
    seeds: &[u64],
) -> Result<Tensor> {
    let b = seeds.len();
    let (cb, _, _) = cond.cond.dims3()?;
    if cb != b {
        return Err(Error::Shape(format!("{cb} conditions for {b} seeds")));
    }
    let guided = cfg.guidance_scale != 1.0;
    if guided && !cond.null_trained {
        log::warn!("guidance requested but the model never saw the null condition; the unconditional branch is untrained");
    }
    let dtype = cond.cond.dtype();
    let (h, w, c) = shape;
    let mut rngs: Vec<_> = seeds.iter().map(|&s| seeded_rng(s, "sample")).collect();
    let draw = |rngs: &mut Vec<rand_chacha::ChaCha8Rng>| -> Result<Tensor> {
        let parts = rngs.iter_mut().map(|r| randn(r, &[1, h, w, c], dtype)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let mut x = draw(&mut rngs)?;
    let text = if guided {
        let (_, l, d) = cond.uncond.dims3()?;
        Tensor::cat(&[cond.cond, &cond.uncond.broadcast_as((b, l, d))?.contiguous()?], 0)?
    } else {
        cond.cond.clone()
    };
    let eta = match cfg.sampler {
        SamplerKind::Ddim => 0.0,
        SamplerKind::Ancestral => 1.0,
    };
    let ts = timestep_sequence(schedule.num_steps(), cfg.steps)?;
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = if guided {
            let both = model.predict(&Tensor::cat(&[&x, &x], 0)?, &vec![t; 2 * b], &text, None)?;
            let ec = both.narrow(0, 0, b)?;
            let eu = both.narrow(0, b, b)?;
            (&eu + ((ec - &eu)? * cfg.guidance_scale)?)?
        } else {
            model.predict(&x, &vec![t; b], &text, None)?
        };
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = schedule.alpha_bar(t_prev)?;
        let x0 = ((&x - (&eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-1f32, 1f32)?;
        let eps = ((&x - (&x0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        x = ((&x0 * ab_prev.sqrt())? + (&eps * dir)?)?;
        if sigma > 0.0 {
            x = (x + (draw(&mut rngs)? * sigma)?)?;
        }
    }
    Ok(x)
}

/// Converts `[B, H, W, 3]` in `[-1, 1]` to 8-bit RGB images.
pub fn to_images(x: &Tensor) -> Result<Vec<image::RgbImage>> {
    let (b, h, w, c) = x.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let flat = x.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let per = h * w * 3;
    Ok((0..b)
        .map(|i| {
            let bytes = flat[i * per..(i + 1) * per]
                .iter()
                .map(|v| (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8)
                .collect();
            image::RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions")
        })
        .collect())
}

/// Stacks RGB images into `[B, H, W, 3]` scaled to `[-1, 1]`.
pub fn from_images(images: &[&image::RgbImage], dtype: candle_core::DType) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Invalid("no images".into()))?;
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape("images in a batch must share one size".into()));
        }
        data.extend(img.as_raw().iter().map(|&v| v as f32 / 127.5 - 1.0));
    }
    Ok(Tensor::from_vec(data, (images.len(), h as usize, w as usize, 3), &Device::Cpu)?.to_dtype(dtype)?)
}
