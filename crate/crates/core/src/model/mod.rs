//! Toy text-conditioned diffusion model operating directly on 32x32 RGB.

pub mod checkpoint;
pub mod sampler;
pub mod schedule;
pub mod text;
pub mod unet;

use std::collections::HashMap;

use candle_core::{DType, Tensor};

use crate::data::registry::CategoryRegistry;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use checkpoint::{Checkpoint, CheckpointMeta, TEXT_TABLE_KEY};
use schedule::NoiseSchedule;
use text::{TextEncoderConfig, ToyTextEncoder};
use unet::{ModelConfig, ToyUNet};

/// Network, parameters, frozen text encoder and schedule.
pub struct ToyLdm {
    pub store: ParamStore,
    pub unet: ToyUNet,
    pub text: ToyTextEncoder,
    pub schedule: NoiseSchedule,
}

impl ToyLdm {
    pub fn new(model: ModelConfig, text: TextEncoderConfig, schedule: NoiseSchedule, registry: &CategoryRegistry) -> Result<Self> {
        if text.d_model != model.context_dim {
            return Err(Error::Config(format!(
                "text width {} does not match the model context width {}",
                text.d_model, model.context_dim
            )));
        }
        let store = ParamStore::new(model.seed, DType::F32);
        let unet = ToyUNet::new(model, &store)?;
        let text = ToyTextEncoder::new(text, registry, DType::F32)?;
        Ok(Self { store, unet, text, schedule })
    }

    /// Restores the model; optimizer state stays in `ckpt.tensors`.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.meta;
        let store = ParamStore::new(m.model.seed, DType::F32);
        let unet = ToyUNet::new(m.model.clone(), &store)?;
        store.load(&ckpt.parameters())?;
        let table = ckpt
            .tensors
            .get(TEXT_TABLE_KEY)
            .ok_or_else(|| Error::Checkpoint("missing text table".into()))?
            .to_dtype(DType::F32)?;
        let text = ToyTextEncoder::with_table(m.text.clone(), m.vocab.clone(), table)?;
        Ok(Self { store, unet, text, schedule: m.schedule.clone() })
    }

    pub fn load(path: &std::path::Path) -> Result<(Self, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        Ok((Self::from_checkpoint(&ckpt)?, ckpt))
    }

    pub fn to_checkpoint(
        &self,
        step: usize,
        null_trained: bool,
        train_config: serde_json::Value,
        optimizer: Option<std::collections::BTreeMap<String, Tensor>>,
    ) -> Checkpoint {
        let mut tensors: HashMap<String, Tensor> = self.store.tensors().into_iter().collect();
        tensors.extend(optimizer.unwrap_or_default());
        tensors.insert(TEXT_TABLE_KEY.into(), self.text.table().clone());
        Checkpoint {
            meta: CheckpointMeta {
                model: self.unet.config().clone(),
                text: self.text.config().clone(),
                vocab: self.text.vocab().to_vec(),
                schedule: self.schedule.clone(),
                step,
                null_trained,
                train_config,
            },
            tensors,
        }
    }

    /// Null-condition embedding `[1, L, d]`.
    pub fn null_text(&self) -> Result<Tensor> {
        self.text.encode_batch(&[""])
    }
}
