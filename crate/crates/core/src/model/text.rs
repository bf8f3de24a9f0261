//! Frozen toy text encoder: a fixed random embedding table plus sinusoidal
//! position codes.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::TokenEmbeddingSequence;
use crate::data::registry::CategoryRegistry;
use crate::data::scene::tokenize;
use crate::error::{Error, Result};
use crate::nn::{randn, seeded_rng};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
const TEMPLATE_WORDS: [&str; 5] = ["a", "an", "photo", "of", "and"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub d_model: usize,
    pub max_len: usize,
    /// Scale applied to the sinusoidal position code.
    pub position_scale: f64,
    pub seed: u64,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { d_model: 32, max_len: 20, position_scale: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    config: TextEncoderConfig,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    /// `[V, d_model]`, never trained.
    table: Tensor,
    positions: Tensor,
}

impl ToyTextEncoder {
    pub fn new(config: TextEncoderConfig, registry: &CategoryRegistry, dtype: DType) -> Result<Self> {
        let mut vocab: Vec<String> = vec![PAD.into(), UNK.into()];
        for w in TEMPLATE_WORDS.iter().map(|w| w.to_string()).chain(registry.words()) {
            if !vocab.contains(&w) {
                vocab.push(w);
            }
        }
        let mut rng = seeded_rng(config.seed, "text-embedding");
        let table = randn(&mut rng, &[vocab.len(), config.d_model], dtype)?;
        Self::with_table(config, vocab, table)
    }

    /// Rebuilds an encoder from a stored vocabulary and table.
    pub fn with_table(config: TextEncoderConfig, vocab: Vec<String>, table: Tensor) -> Result<Self> {
        if config.d_model == 0 || config.max_len == 0 {
            return Err(Error::Config("text encoder needs d_model >= 1 and max_len >= 1".into()));
        }
        if table.dims() != [vocab.len(), config.d_model] {
            return Err(Error::Checkpoint(format!(
                "text table shape {:?} does not match vocabulary {} x {}",
                table.dims(),
                vocab.len(),
                config.d_model
            )));
        }
        if vocab.first().map(String::as_str) != Some(PAD) || vocab.get(1).map(String::as_str) != Some(UNK) {
            return Err(Error::Config("vocabulary must start with <pad>, <unk>".into()));
        }
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let positions = position_codes(config.max_len, config.d_model, config.position_scale)?.to_dtype(table.dtype())?;
        Ok(Self { config, vocab, index, table, positions })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    /// Token ids padded to `max_len`. Unknown words map to `<unk>` with a
    /// warning; captions longer than `max_len` are rejected.
    pub fn token_ids(&self, caption: &str) -> Result<Vec<u32>> {
        let words = tokenize(caption);
        if words.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "caption has {} tokens, the encoder accepts at most {}",
                words.len(),
                self.config.max_len
            )));
        }
        let mut ids: Vec<u32> = words
            .iter()
            .map(|w| match self.index.get(w) {
                Some(&i) => i as u32,
                None => {
                    log::warn!("word {w:?} is not in the vocabulary, encoded as {UNK}");
                    1
                }
            })
            .collect();
        ids.resize(self.config.max_len, 0);
        Ok(ids)
    }

    /// `[B, max_len, d_model]` embeddings of a batch of captions. The empty
    /// caption is the null condition.
    pub fn encode_batch(&self, captions: &[&str]) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(captions.len() * self.config.max_len);
        for c in captions {
            ids.extend(self.token_ids(c)?);
        }
        let n = captions.len();
        let ids = Tensor::from_vec(ids, n * self.config.max_len, &Device::Cpu)?;
        let emb = self.table.index_select(&ids, 0)?.reshape((n, self.config.max_len, self.config.d_model))?;
        Ok(emb.broadcast_add(&self.positions)?)
    }

    pub fn encode(&self, caption: &str, grounded_positions: Vec<usize>) -> Result<TokenEmbeddingSequence> {
        let emb = self.encode_batch(&[caption])?.squeeze(0)?;
        let mut tokens = tokenize(caption);
        tokens.resize(self.config.max_len, PAD.to_string());
        TokenEmbeddingSequence::new(emb, tokens, grounded_positions)
    }
}

fn position_codes(len: usize, dim: usize, scale: f64) -> Result<Tensor> {
    let mut data = vec![0f64; len * dim];
    for p in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let v = p as f64 * freq;
            data[p * dim + i] = scale * if i % 2 == 0 { v.sin() } else { v.cos() };
        }
    }
    Ok(Tensor::from_vec(data, (len, dim), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> ToyTextEncoder {
        ToyTextEncoder::new(TextEncoderConfig::default(), &CategoryRegistry::default(), DType::F64).unwrap()
    }

    #[test]
    fn vocabulary_covers_template_and_registry() {
        let e = enc();
        assert_eq!(e.vocab().len(), 2 + 5 + 20);
        let ids = e.token_ids("A photo of a red circle, a blue square, and a green triangle.").unwrap();
        assert!(ids[..13].iter().all(|&i| i > 1));
        assert!(ids[13..].iter().all(|&i| i == 0));
    }

    #[test]
    fn deterministic_and_position_dependent() {
        let a = enc().encode_batch(&["a red circle and a red circle"]).unwrap();
        let b = enc().encode_batch(&["a red circle and a red circle"]).unwrap();
        assert_eq!(a.to_vec3::<f64>().unwrap(), b.to_vec3::<f64>().unwrap());
        let v = a.to_vec3::<f64>().unwrap();
        assert_ne!(v[0][2], v[0][6]);
    }

    #[test]
    fn unknown_and_overlong() {
        let e = enc();
        assert_eq!(e.token_ids("a teal circle").unwrap()[1], 1);
        let long = vec!["a"; 21].join(" ");
        assert!(e.token_ids(&long).is_err());
    }
}
