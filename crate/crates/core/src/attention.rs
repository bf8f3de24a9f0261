//! Text-conditioned multi-head cross-attention with a recording surface for
//! head-averaged attention maps.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{softmax_last_dim, GroupNorm, Linear, ParamPath};

/// Per-token text embeddings for one caption.
#[derive(Debug, Clone)]
pub struct TokenEmbeddingSequence {
    /// `[L_tokens, d_model]`
    pub embeddings: Tensor,
    pub token_strings: Vec<String>,
    pub grounded_positions: Vec<usize>,
}

impl TokenEmbeddingSequence {
    pub fn new(embeddings: Tensor, token_strings: Vec<String>, grounded_positions: Vec<usize>) -> Result<Self> {
        let (len, _) = embeddings.dims2()?;
        if len == 0 {
            return Err(Error::Invalid("token sequence must contain at least one token".into()));
        }
        if token_strings.len() != len {
            return Err(Error::Shape(format!(
                "{} token strings for {len} embeddings",
                token_strings.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for &p in &grounded_positions {
            if p >= len {
                return Err(Error::Invalid(format!("grounded position {p} outside sequence of length {len}")));
            }
            if !seen.insert(p) {
                return Err(Error::Invalid(format!("grounded position {p} listed twice")));
            }
        }
        Ok(Self { embeddings, token_strings, grounded_positions })
    }

    pub fn len(&self) -> usize {
        self.token_strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_strings.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CrossAttentionConfig {
    pub num_heads: usize,
    pub key_dim: usize,
    pub layer_id: String,
}

impl CrossAttentionConfig {
    pub fn new(num_heads: usize, key_dim: usize, layer_id: impl Into<String>) -> Result<Self> {
        if num_heads == 0 || key_dim == 0 {
            return Err(Error::Config(format!(
                "cross-attention needs at least one head and key dim >= 1 (got H={num_heads}, d_k={key_dim})"
            )));
        }
        Ok(Self { num_heads, key_dim, layer_id: layer_id.into() })
    }

    fn inner_dim(&self) -> usize {
        self.num_heads * self.key_dim
    }
}

/// Head-averaged attention of one layer.
///
/// `map` is `[B, h*w, L_tokens]`: for every latent position the distribution
/// over tokens, averaged over heads. Single-sample records have `B = 1`.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub layer_id: String,
    pub spatial_shape: (usize, usize),
    pub map: Tensor,
}

impl AttentionRecord {
    pub fn new(layer_id: impl Into<String>, spatial_shape: (usize, usize), map: Tensor) -> Result<Self> {
        let map = match map.rank() {
            2 => map.unsqueeze(0)?,
            3 => map,
            r => return Err(Error::Shape(format!("attention map must be rank 2 or 3, got {r}"))),
        };
        let (_, n, _) = map.dims3()?;
        if n != spatial_shape.0 * spatial_shape.1 {
            return Err(Error::Shape(format!(
                "attention map has {n} rows but spatial shape is {spatial_shape:?}"
            )));
        }
        Ok(Self { layer_id: layer_id.into(), spatial_shape, map })
    }

    pub fn batch_size(&self) -> usize {
        self.map.dims()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.map.dims()[2]
    }

    pub fn num_positions(&self) -> usize {
        self.spatial_shape.0 * self.spatial_shape.1
    }

    /// The record of one batch element (`B = 1`).
    pub fn sample(&self, index: usize) -> Result<AttentionRecord> {
        Ok(Self {
            layer_id: self.layer_id.clone(),
            spatial_shape: self.spatial_shape,
            map: self.map.narrow(0, index, 1)?,
        })
    }

    /// Attention column of `token` for batch element `index`, row-major over
    /// the spatial grid.
    pub fn column(&self, index: usize, token: usize) -> Result<Vec<f64>> {
        Ok(self
            .map
            .narrow(0, index, 1)?
            .narrow(2, token, 1)?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_sum_error(&self) -> Result<f64> {
        let sums = self.map.sum(D::Minus1)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        Ok(sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max))
    }
}

/// Projects flattened latent features to queries and text embeddings to keys.
///
/// `latent` is `[B, h, w, c]`, `text` is `[B, L, d_model]`. Returns
/// `Q: [B, H, h*w, d_k]` and `K: [B, H, L, d_k]`.
pub fn project_qk(
    latent: &Tensor,
    text: &Tensor,
    to_q: &Linear,
    to_k: &Linear,
    cfg: &CrossAttentionConfig,
) -> Result<(Tensor, Tensor)> {
    check_qk_inputs(latent, text, to_q, to_k, cfg)?;
    let (b, h, w, c) = latent.dims4()?;
    let (_, len, _) = text.dims3()?;
    let heads = cfg.num_heads;
    let dk = cfg.key_dim;
    let flat = latent.reshape((b, h * w, c))?;
    let q = to_q.forward(&flat)?.reshape((b, h * w, heads, dk))?.transpose(1, 2)?.contiguous()?;
    let k = to_k.forward(text)?.reshape((b, len, heads, dk))?.transpose(1, 2)?.contiguous()?;
    Ok((q, k))
}

fn check_qk_inputs(latent: &Tensor, text: &Tensor, to_q: &Linear, to_k: &Linear, cfg: &CrossAttentionConfig) -> Result<()> {
    let (b, _, _, c) = latent.dims4()?;
    if c != to_q.in_dim() {
        return Err(Error::Config(format!(
            "layer {}: latent width {c} does not match projection input width {}",
            cfg.layer_id,
            to_q.in_dim()
        )));
    }
    let (tb, _, d) = text.dims3()?;
    if tb != b {
        return Err(Error::Shape(format!("latent batch {b} vs text batch {tb}")));
    }
    if d != to_k.in_dim() {
        return Err(Error::Config(format!(
            "layer {}: text width {d} does not match key projection width {}",
            cfg.layer_id,
            to_k.in_dim()
        )));
    }
    Ok(())
}

/// Per-head softmax over tokens of `Q Kᵀ / √d_k`, shape `[B, H, N, L]`.
pub fn per_head_attention(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (qb, qh, _, qd) = q.dims4()?;
    let (kb, kh, _, kd) = k.dims4()?;
    if qh != kh || qd != kd || qb != kb {
        return Err(Error::Shape(format!(
            "internal: query heads/dims ({qb}, {qh}, {qd}) do not match key heads/dims ({kb}, {kh}, {kd})"
        )));
    }
    let logits = (q.matmul(&k.t()?)? / (qd as f64).sqrt())?;
    softmax_last_dim(&logits)
}

/// Mean over heads of the per-head token softmax.
pub fn head_averaged_attention(
    q: &Tensor,
    k: &Tensor,
    layer_id: &str,
    spatial_shape: (usize, usize),
) -> Result<AttentionRecord> {
    let probs = per_head_attention(q, k)?;
    AttentionRecord::new(layer_id, spatial_shape, kernels::head_mean(&probs)?)
}

/// Collects head-averaged maps of requested layers during a forward pass.
#[derive(Debug, Default)]
pub struct AttentionRecorder {
    requested: BTreeSet<String>,
    records: BTreeMap<String, AttentionRecord>,
}

impl AttentionRecorder {
    /// Fails if any requested id is not among `available`.
    pub fn new<S: AsRef<str>>(requested: impl IntoIterator<Item = S>, available: &[String]) -> Result<Self> {
        let requested: BTreeSet<String> = requested.into_iter().map(|s| s.as_ref().to_string()).collect();
        let unknown: Vec<&String> = requested.iter().filter(|id| !available.contains(id)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown attention layer(s) {unknown:?}; valid ids are {available:?}"
            )));
        }
        Ok(Self { requested, records: BTreeMap::new() })
    }

    pub fn wants(&self, layer_id: &str) -> bool {
        self.requested.contains(layer_id)
    }

    pub fn store(&mut self, record: AttentionRecord) {
        self.records.insert(record.layer_id.clone(), record);
    }

    pub fn into_records(self) -> BTreeMap<String, AttentionRecord> {
        self.records
    }
}

/// Cross-attention block: `x + out(attn(norm(x), text))`.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    cfg: CrossAttentionConfig,
    norm: Option<GroupNorm>,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
}

impl CrossAttention {
    pub fn new(p: &ParamPath, cfg: CrossAttentionConfig, channels: usize, context_dim: usize, groups: usize) -> Result<Self> {
        let inner = cfg.inner_dim();
        Ok(Self {
            norm: Some(GroupNorm::new(&p.pp("norm"), groups, channels)?),
            to_q: Linear::new(&p.pp("to_q"), channels, inner, false)?,
            to_k: Linear::new(&p.pp("to_k"), context_dim, inner, false)?,
            to_v: Linear::new(&p.pp("to_v"), context_dim, inner, false)?,
            to_out: Linear::new(&p.pp("to_out"), inner, channels, true)?,
            cfg,
        })
    }

    /// Block without input normalization, built from explicit projections.
    pub fn from_projections(cfg: CrossAttentionConfig, to_q: Linear, to_k: Linear, to_v: Linear, to_out: Linear) -> Result<Self> {
        let inner = cfg.inner_dim();
        if to_q.out_dim() != inner || to_k.out_dim() != inner || to_v.out_dim() != inner || to_out.in_dim() != inner {
            return Err(Error::Config(format!("projection widths must equal H*d_k = {inner}")));
        }
        Ok(Self { cfg, norm: None, to_q, to_k, to_v, to_out })
    }

    pub fn config(&self) -> &CrossAttentionConfig {
        &self.cfg
    }

    pub fn project_qk(&self, latent: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        project_qk(latent, text, &self.to_q, &self.to_k, &self.cfg)
    }

    pub fn forward(&self, x: &Tensor, text: &Tensor, recorder: Option<&mut AttentionRecorder>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let normed = match &self.norm {
            Some(n) => n.forward(x)?,
            None => x.clone(),
        };
        check_qk_inputs(&normed, text, &self.to_q, &self.to_k, &self.cfg)?;
        let heads = self.cfg.num_heads;
        let flat = normed.reshape((b, h * w, c))?;
        let q = self.to_q.forward(&flat)?;
        let k = self.to_k.forward(text)?;
        let probs = kernels::attention_probs(&q, &k, heads)?;
        if let Some(rec) = recorder {
            if rec.wants(&self.cfg.layer_id) {
                rec.store(AttentionRecord::new(self.cfg.layer_id.clone(), (h, w), kernels::head_mean(&probs)?)?);
            }
        }
        let attended = kernels::attention_apply(&probs, &self.to_v.forward(text)?, heads)?;
        let out = self.to_out.forward(&attended)?.reshape((b, h, w, c))?;
        Ok((x + out)?)
    }
}
