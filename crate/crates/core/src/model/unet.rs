//! Three-stage residual U-Net with cross-attention at 16, 8 and 32 pixels.
//!
//! ```text
//! 32: conv_in -> res ........................................ cat -> res -> attn dec.32 -> out
//! 16:        down -> res -> attn enc.16 ........ cat -> res -> attn dec.16a -> res -> attn dec.16b
//!  8:                      down -> res -> attn mid.8 -> res -> up
//! ```

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, AttentionRecorder, CrossAttention, CrossAttentionConfig};
use crate::error::{Error, Result};
use crate::model::schedule::NoiseSchedule;
use crate::nn::{silu, timestep_embedding, upsample2x, Conv2d, GroupNorm, Init, Linear, ParamPath, ParamStore};

pub const ENC_16: &str = "enc.16";
pub const MID_8: &str = "mid.8";
pub const DEC_16A: &str = "dec.16a";
pub const DEC_16B: &str = "dec.16b";
pub const DEC_32: &str = "dec.32";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub in_channels: usize,
    /// Widths at full, half and quarter resolution.
    pub channels: [usize; 3],
    pub num_heads: usize,
    pub key_dim: usize,
    pub context_dim: usize,
    pub groups: usize,
    pub time_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            in_channels: 3,
            channels: [32, 48, 64],
            num_heads: 4,
            key_dim: 8,
            context_dim: 32,
            groups: 8,
            time_dim: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Cross-attention layer ids with their spatial sizes, in forward order.
    pub fn attention_layers(&self) -> Vec<(String, (usize, usize))> {
        let r = self.resolution;
        vec![
            (ENC_16.into(), (r / 2, r / 2)),
            (MID_8.into(), (r / 4, r / 4)),
            (DEC_16A.into(), (r / 2, r / 2)),
            (DEC_16B.into(), (r / 2, r / 2)),
            (DEC_32.into(), (r, r)),
        ]
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.attention_layers().into_iter().map(|(id, _)| id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!("resolution must be a positive multiple of 4, got {}", self.resolution)));
        }
        if self.in_channels == 0 || self.time_dim == 0 || self.context_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        for c in self.channels {
            if c == 0 || c % self.groups != 0 {
                return Err(Error::Config(format!("channel width {c} must be a positive multiple of {} groups", self.groups)));
            }
        }
        CrossAttentionConfig::new(self.num_heads, self.key_dim, "check")?;
        Ok(())
    }
}

/// Noise-prediction network interface used by losses and samplers.
pub trait EpsilonModel {
    /// `x`: `[B, H, W, C]`, `t`: one timestep per element, `text`: `[B, L, d]`.
    fn predict(&self, x: &Tensor, t: &[usize], text: &Tensor, recorder: Option<&mut AttentionRecorder>) -> Result<Tensor>;

    fn attention_layer_ids(&self) -> Vec<String>;
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, time_dim: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&p.pp("norm1"), groups, c_in)?,
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, 1)?,
            time: Linear::new(&p.pp("time"), time_dim, c_out, true)?,
            norm2: GroupNorm::new(&p.pp("norm2"), groups, c_out)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1)?,
            skip: if c_in == c_out { None } else { Some(Conv2d::new(&p.pp("skip"), c_in, c_out, 1, 1)?) },
        })
    }

    /// `temb` is the already activated time embedding `[B, time_dim]`.
    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let (b, _, _, c) = h.dims4()?;
        let h = h.broadcast_add(&self.time.forward(temb)?.reshape((b, 1, 1, c))?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
pub struct ToyUNet {
    config: ModelConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    res32: ResBlock,
    down16: Conv2d,
    res16: ResBlock,
    attn_enc16: CrossAttention,
    down8: Conv2d,
    mid1: ResBlock,
    attn_mid8: CrossAttention,
    mid2: ResBlock,
    up16: Conv2d,
    dec16a: ResBlock,
    attn_dec16a: CrossAttention,
    dec16b: ResBlock,
    attn_dec16b: CrossAttention,
    up32: Conv2d,
    dec32: ResBlock,
    attn_dec32: CrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl ToyUNet {
    /// Builds the network, registering its parameters in `store`.
    pub fn new(config: ModelConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let p = store.root();
        let [c1, c2, c3] = config.channels;
        let (td, g, cin) = (config.time_dim, config.groups, config.in_channels);
        let attn = |name: &str, c: usize| -> Result<CrossAttention> {
            let cfg = CrossAttentionConfig::new(config.num_heads, config.key_dim, name)?;
            CrossAttention::new(&p.pp(name), cfg, c, config.context_dim, g)
        };
        Ok(Self {
            time1: Linear::new(&p.pp("time.l1"), c1, td, true)?,
            time2: Linear::new(&p.pp("time.l2"), td, td, true)?,
            conv_in: Conv2d::new(&p.pp("conv_in"), cin, c1, 3, 1)?,
            res32: ResBlock::new(&p.pp("enc.res32"), c1, c1, td, g)?,
            down16: Conv2d::new(&p.pp("enc.down16"), c1, c1, 3, 2)?,
            res16: ResBlock::new(&p.pp("enc.res16"), c1, c2, td, g)?,
            attn_enc16: attn(ENC_16, c2)?,
            down8: Conv2d::new(&p.pp("enc.down8"), c2, c2, 3, 2)?,
            mid1: ResBlock::new(&p.pp("mid.res1"), c2, c3, td, g)?,
            attn_mid8: attn(MID_8, c3)?,
            mid2: ResBlock::new(&p.pp("mid.res2"), c3, c3, td, g)?,
            up16: Conv2d::new(&p.pp("dec.up16"), c3, c3, 3, 1)?,
            dec16a: ResBlock::new(&p.pp("dec.res16a"), c3 + c2, c2, td, g)?,
            attn_dec16a: attn(DEC_16A, c2)?,
            dec16b: ResBlock::new(&p.pp("dec.res16b"), c2, c2, td, g)?,
            attn_dec16b: attn(DEC_16B, c2)?,
            up32: Conv2d::new(&p.pp("dec.up32"), c2, c2, 3, 1)?,
            dec32: ResBlock::new(&p.pp("dec.res32"), c2 + c1, c1, td, g)?,
            attn_dec32: attn(DEC_32, c1)?,
            norm_out: GroupNorm::new(&p.pp("norm_out"), g, c1)?,
            conv_out: Conv2d::with_init(&p.pp("conv_out"), c1, cin, 3, 1, Init::Uniform(1e-3))?,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn time_embedding(&self, t: &[usize], dtype: DType) -> Result<Tensor> {
        let e = timestep_embedding(t, self.config.channels[0], dtype)?;
        let e = self.time2.forward(&silu(&self.time1.forward(&e)?)?)?;
        silu(&e)
    }
}

impl EpsilonModel for ToyUNet {
    fn predict(&self, x: &Tensor, t: &[usize], text: &Tensor, mut recorder: Option<&mut AttentionRecorder>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let r = self.config.resolution;
        if (h, w, c) != (r, r, self.config.in_channels) {
            return Err(Error::Shape(format!(
                "model expects [B, {r}, {r}, {}] input, got {:?}",
                self.config.in_channels,
                x.dims()
            )));
        }
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", t.len())));
        }
        let temb = self.time_embedding(t, x.dtype())?;
        let mut rec = |attn: &CrossAttention, x: &Tensor| attn.forward(x, text, recorder.as_deref_mut());

        let h32 = self.conv_in.forward(x)?;
        let s1 = self.res32.forward(&h32, &temb)?;
        let h = self.down16.forward(&s1)?;
        let h = self.res16.forward(&h, &temb)?;
        let s2 = rec(&self.attn_enc16, &h)?;
        let h = self.down8.forward(&s2)?;
        let h = self.mid1.forward(&h, &temb)?;
        let h = rec(&self.attn_mid8, &h)?;
        let h = self.mid2.forward(&h, &temb)?;
        let h = self.up16.forward(&upsample2x(&h)?)?;
        let h = self.dec16a.forward(&Tensor::cat(&[&h, &s2], 3)?, &temb)?;
        let h = rec(&self.attn_dec16a, &h)?;
        let h = self.dec16b.forward(&h, &temb)?;
        let h = rec(&self.attn_dec16b, &h)?;
        let h = self.up32.forward(&upsample2x(&h)?)?;
        let h = self.dec32.forward(&Tensor::cat(&[&h, &s1], 3)?, &temb)?;
        let h = rec(&self.attn_dec32, &h)?;
        self.conv_out.forward(&silu(&self.norm_out.forward(&h)?)?)
    }

    fn attention_layer_ids(&self) -> Vec<String> {
        self.config.layer_ids()
    }
}

/// Runs one forward pass recording the requested layers.
pub fn record_pass<M: EpsilonModel + ?Sized, S: AsRef<str>>(
    model: &M,
    x: &Tensor,
    t: &[usize],
    text: &Tensor,
    layer_ids: impl IntoIterator<Item = S>,
) -> Result<(Tensor, BTreeMap<String, AttentionRecord>)> {
    let mut recorder = AttentionRecorder::new(layer_ids, &model.attention_layer_ids())?;
    let eps = model.predict(x, t, text, Some(&mut recorder))?;
    Ok((eps, recorder.into_records()))
}

/// Mean squared error between the drawn noise and the model's prediction at
/// `z_t`, plus the recorded attention maps of `layer_ids`.
pub fn denoise_loss<M: EpsilonModel + ?Sized, S: AsRef<str>>(
    model: &M,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    text: &Tensor,
    t: &[usize],
    noise: &Tensor,
    layer_ids: impl IntoIterator<Item = S>,
) -> Result<(Tensor, BTreeMap<String, AttentionRecord>)> {
    let zt = schedule.add_noise(z0, t, noise)?;
    let (eps, maps) = record_pass(model, &zt, t, text, layer_ids)?;
    let loss = (eps - noise)?.sqr()?.mean_all()?;
    Ok((loss, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, seeded_rng};

    fn tiny() -> ModelConfig {
        ModelConfig { channels: [8, 8, 16], time_dim: 16, context_dim: 8, num_heads: 2, key_dim: 4, groups: 4, ..Default::default() }
    }

    #[test]
    fn output_shape_and_records() {
        let store = ParamStore::new(1, DType::F32);
        let net = ToyUNet::new(tiny(), &store).unwrap();
        let mut rng = seeded_rng(0, "in");
        let x = randn(&mut rng, &[2, 32, 32, 3], DType::F32).unwrap();
        let text = randn(&mut rng, &[2, 5, 8], DType::F32).unwrap();
        let (eps, maps) = record_pass(&net, &x, &[1, 500], &text, [MID_8, DEC_32]).unwrap();
        assert_eq!(eps.dims(), &[2, 32, 32, 3]);
        assert_eq!(maps.keys().collect::<Vec<_>>(), vec![DEC_32, MID_8]);
        assert_eq!(maps[MID_8].spatial_shape, (8, 8));
        assert_eq!(maps[DEC_32].map.dims(), &[2, 1024, 5]);
        let (_, none) = record_pass(&net, &x, &[1, 2], &text, Vec::<String>::new()).unwrap();
        assert!(none.is_empty());
        let err = record_pass(&net, &x, &[1, 2], &text, ["enc.99"]).unwrap_err().to_string();
        for id in tiny().layer_ids() {
            assert!(err.contains(&id), "{err}");
        }
    }

    #[test]
    fn parameter_count_is_stable() {
        let a = ParamStore::new(1, DType::F32);
        ToyUNet::new(tiny(), &a).unwrap();
        let b = ParamStore::new(2, DType::F32);
        ToyUNet::new(tiny(), &b).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        let names_a: Vec<String> = a.vars().into_iter().map(|(n, _)| n).collect();
        let names_b: Vec<String> = b.vars().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn rejects_wrong_input_size() {
        let store = ParamStore::new(1, DType::F32);
        let net = ToyUNet::new(tiny(), &store).unwrap();
        let x = Tensor::zeros((1, 16, 16, 3), DType::F32, &candle_core::Device::Cpu).unwrap();
        let text = Tensor::zeros((1, 5, 8), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(net.predict(&x, &[1], &text, None).is_err());
    }
}
