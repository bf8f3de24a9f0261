//! Single-file checkpoint:
//!
//! ```text
//! "tokencompose-toy-v1\n" | u64 LE meta length | meta JSON | safetensors blob
//! ```
//!
//! The blob holds model parameters, `adamw.{m,v}.*` optimizer moments and
//! the frozen text table under `text.table`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::schedule::NoiseSchedule;
use crate::model::text::TextEncoderConfig;
use crate::model::unet::ModelConfig;

pub const CHECKPOINT_HEADER: &str = "tokencompose-toy-v1\n";
pub const TEXT_TABLE_KEY: &str = "text.table";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub text: TextEncoderConfig,
    pub vocab: Vec<String>,
    pub schedule: NoiseSchedule,
    pub step: usize,
    /// Whether training dropped the condition, so the null branch is trained.
    pub null_trained: bool,
    /// Free-form echo of the training configuration.
    pub train_config: serde_json::Value,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let sorted: BTreeMap<&String, &Tensor> = self.tensors.iter().collect();
        let blob = safetensors::serialize(sorted, None).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(CHECKPOINT_HEADER.len() + 8 + meta.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_HEADER.as_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&blob);
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &out)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let header = CHECKPOINT_HEADER.as_bytes();
        if !bytes.starts_with(header) {
            return Err(Error::Checkpoint(format!("{} is not a {} file", path.display(), CHECKPOINT_HEADER.trim())));
        }
        let rest = &bytes[header.len()..];
        if rest.len() < 8 {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let n = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < n {
            return Err(Error::Checkpoint("truncated checkpoint metadata".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(&rest[..n])?;
        let tensors = candle_core::safetensors::load_buffer(&rest[n..], &Device::Cpu)?;
        Ok(Self { meta, tensors })
    }

    /// Tensors whose names do not start with `adamw.` or `text.`.
    pub fn parameters(&self) -> HashMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adamw.") && !k.starts_with("text."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    #[test]
    fn round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut tensors = HashMap::new();
        tensors.insert("w".to_string(), Tensor::arange(0f32, 6.0, &Device::Cpu).unwrap().reshape((2, 3)).unwrap());
        tensors.insert("adamw.m.w".to_string(), Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap());
        let meta = CheckpointMeta {
            model: ModelConfig::default(),
            text: TextEncoderConfig::default(),
            vocab: vec!["<pad>".into()],
            schedule: NoiseSchedule::default(),
            step: 12,
            null_trained: true,
            train_config: serde_json::json!({"lr": 1e-4}),
        };
        Checkpoint { meta: meta.clone(), tensors }.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"tokencompose-toy-v1\n"));
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.meta, meta);
        assert_eq!(back.parameters().len(), 1);
        assert_eq!(back.tensors["w"].to_vec2::<f32>().unwrap(), vec![vec![0.0, 1.0, 2.0], vec![3.0, 4.0, 5.0]]);
        fs::write(&path, b"garbage").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}
