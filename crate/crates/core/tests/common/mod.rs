//! Reference checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use tokencompose::attention::{per_head_attention, project_qk, AttentionRecord, AttentionRecorder, CrossAttention, CrossAttentionConfig};
use tokencompose::eval::multigen::{mg_scores, MultiGenSuite};
use tokencompose::grounding::{pixel_loss, token_loss, tokencompose_loss, BinaryMask, GroundingEntry, LossWeights, TokenGroundingSet};
use tokencompose::nn::{randn, seeded_rng, Linear};

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

pub fn record(map: Tensor, shape: (usize, usize)) -> AttentionRecord {
    AttentionRecord::new("l", shape, map).unwrap()
}

pub fn grounding(entries: &[(usize, BinaryMask)]) -> TokenGroundingSet {
    TokenGroundingSet::new(entries.iter().map(|(p, m)| GroundingEntry { token_position: *p, mask: m.clone() }).collect()).unwrap()
}

/// The tagged loss examples as `(name, got, expected)`; the clamp case
/// reports its distance above the 1.1e-7 bound (0 when within it).
pub fn loss_examples() -> Vec<(&'static str, f64, f64)> {
    let dev = Device::Cpu;
    let col = |v: &[f64], shape| record(Tensor::from_vec(v.to_vec(), (v.len(), 1), &dev).unwrap(), shape);
    let mask = |h, w, d: &[u8]| BinaryMask::new(h, w, d.to_vec()).unwrap();
    let two = Tensor::new(&[[0.7f64, 0.2], [0.3, 0.8]], &dev).unwrap();
    let clamp = pixel_loss(&col(&[1.0, 0.0, 0.0, 1.0], (2, 2)), &[grounding(&[(0, mask(2, 2, &[1, 0, 0, 1]))])]).unwrap();
    vec![
        (
            "token uniform",
            scalar(&token_loss(&col(&[0.25; 4], (2, 2)), &[grounding(&[(0, mask(2, 2, &[1, 0, 0, 0]))])]).unwrap()),
            0.5625,
        ),
        (
            "token two columns",
            scalar(&token_loss(&record(two, (1, 2)), &[grounding(&[(0, mask(1, 2, &[1, 0])), (1, mask(1, 2, &[0, 1]))])]).unwrap()),
            0.065,
        ),
        (
            "pixel constant half",
            scalar(&pixel_loss(&col(&[0.5; 4], (2, 2)), &[grounding(&[(0, mask(2, 2, &[0, 1, 1, 0]))])]).unwrap()),
            std::f64::consts::LN_2,
        ),
        (
            "pixel two cells",
            scalar(&pixel_loss(&col(&[0.9, 0.1], (1, 2)), &[grounding(&[(0, mask(1, 2, &[1, 1]))])]).unwrap()),
            1.203973,
        ),
        ("pixel clamp", (scalar(&clamp) - 1.1e-7).max(0.0), 0.0),
    ]
}

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Token,
    Pixel,
    Joint,
}

fn softmax(logits: &Tensor) -> Tensor {
    let e = logits.exp().unwrap();
    e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap()
}

/// A loss of the attention map `softmax(logits)` over tokens.
pub fn objective(kind: Objective, logits: &Tensor, shape: (usize, usize), g: &TokenGroundingSet) -> Tensor {
    let rec = record(softmax(logits), shape);
    let groundings = std::slice::from_ref(g);
    match kind {
        Objective::Token => token_loss(&rec, groundings).unwrap(),
        Objective::Pixel => pixel_loss(&rec, groundings).unwrap(),
        Objective::Joint => {
            let maps = BTreeMap::from([("l".to_string(), rec)]);
            let denoise = Tensor::new(0.3f64, &Device::Cpu).unwrap();
            let w = LossWeights::new(0.7, 0.4, ["l"]).unwrap();
            tokencompose_loss(&denoise, &maps, groundings, &w).unwrap().0
        }
    }
}

/// Random logits over at most 8×8 positions and 4 tokens, with 1 to 3
/// grounded tokens carrying nonempty random masks.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, (usize, usize), TokenGroundingSet) {
    let h = rng.random_range(2..=8);
    let w = rng.random_range(2..=8);
    let l = 4;
    let logits: Vec<f64> = (0..h * w * l).map(|_| rng.random_range(-2.0..2.0)).collect();
    let grounded = rng.random_range(1..=3);
    let mut positions: Vec<usize> = (0..l).collect();
    let mut entries = Vec::new();
    for _ in 0..grounded {
        let p = positions.remove(rng.random_range(0..positions.len()));
        let bits: Vec<u8> = (0..h * w).map(|_| rng.random_bool(0.4) as u8).collect();
        let mut m = BinaryMask::new(h, w, bits).unwrap();
        if m.is_empty() {
            m.set(0, 0, true);
        }
        entries.push((p, m));
    }
    (logits, (h, w), grounding(&entries))
}

/// Relative error `|a - n| / max(|a|, |n|)` between the autograd gradient
/// and central differences with respect to the logits.
pub fn gradient_error(kind: Objective, logits: &[f64], shape: (usize, usize), g: &TokenGroundingSet) -> f64 {
    let n = shape.0 * shape.1;
    let eps = 1e-6;
    let var = Var::from_vec(logits.to_vec(), (n, 4), &Device::Cpu).unwrap();
    let grads = objective(kind, var.as_tensor(), shape, g).backward().unwrap();
    let analytic = values(grads.get(&var).unwrap());
    let numeric: Vec<f64> = (0..logits.len())
        .map(|i| {
            let eval = |d: f64| {
                let mut v = logits.to_vec();
                v[i] += d;
                scalar(&objective(kind, &Tensor::from_vec(v, (n, 4), &Device::Cpu).unwrap(), shape, g))
            };
            (eval(eps) - eval(-eps)) / (2.0 * eps)
        })
        .collect();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale > 0.0 {
        norm(&diff) / scale
    } else {
        norm(&diff)
    }
}

/// Random cross-attention configuration.
#[derive(Debug, Clone)]
pub struct AttnCase {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub tokens: usize,
    pub context: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub seed: u64,
}

impl AttnCase {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            batch: rng.random_range(1..=2),
            h: rng.random_range(1..=6),
            w: rng.random_range(1..=6),
            channels: rng.random_range(1..=6),
            tokens: rng.random_range(1..=7),
            context: rng.random_range(1..=5),
            heads: rng.random_range(1..=4),
            key_dim: rng.random_range(1..=4),
            seed: rng.random(),
        }
    }
}

pub struct AttnSetup {
    pub block: CrossAttention,
    to_q: Tensor,
    to_k: Tensor,
    cfg: CrossAttentionConfig,
    pub latent: Tensor,
    pub text: Tensor,
}

impl AttnSetup {
    pub fn new(c: &AttnCase) -> Self {
        let mut rng = seeded_rng(c.seed, "attention-props");
        let inner = c.heads * c.key_dim;
        let mut w = |shape: &[usize]| randn(&mut rng, shape, DType::F32).unwrap();
        let (wq, wk, wv, wo) = (w(&[c.channels, inner]), w(&[c.context, inner]), w(&[c.context, inner]), w(&[inner, c.channels]));
        let latent = w(&[c.batch, c.h, c.w, c.channels]);
        let text = w(&[c.batch, c.tokens, c.context]);
        let cfg = CrossAttentionConfig::new(c.heads, c.key_dim, "p").unwrap();
        let block = CrossAttention::from_projections(
            cfg.clone(),
            Linear::from_weights(wq.clone(), None),
            Linear::from_weights(wk.clone(), None),
            Linear::from_weights(wv, None),
            Linear::from_weights(wo, None),
        )
        .unwrap();
        Self { block, to_q: wq, to_k: wk, cfg, latent, text }
    }

    /// Head-averaged map recorded by the block's forward pass.
    pub fn recorded(&self, text: &Tensor) -> AttentionRecord {
        let mut rec = AttentionRecorder::new(["p"], &["p".to_string()]).unwrap();
        self.block.forward(&self.latent, text, Some(&mut rec)).unwrap();
        rec.into_records().remove("p").unwrap()
    }

    /// Largest deviation between the recorded map and the mean over heads of
    /// per-head softmaxes computed in f64.
    pub fn head_mean_error(&self) -> f64 {
        let f = |t: &Tensor| t.to_dtype(DType::F64).unwrap();
        let to_q = Linear::from_weights(f(&self.to_q), None);
        let to_k = Linear::from_weights(f(&self.to_k), None);
        let (q, k) = project_qk(&f(&self.latent), &f(&self.text), &to_q, &to_k, &self.cfg).unwrap();
        let heads = per_head_attention(&q, &k).unwrap();
        let h = self.cfg.num_heads;
        let mut mean = vec![0.0; heads.elem_count() / h];
        for hd in 0..h {
            for (m, v) in mean.iter_mut().zip(values(&heads.narrow(1, hd, 1).unwrap())) {
                *m += v / h as f64;
            }
        }
        max_abs_diff(&values(&self.recorded(&self.text).map), &mean)
    }

    /// Largest deviation between the columns of the map under a token
    /// permutation and the permuted columns of the original map.
    pub fn permutation_error(&self, perm: &[u32]) -> f64 {
        let idx = Tensor::new(perm, &Device::Cpu).unwrap();
        let base = self.recorded(&self.text).map.index_select(&idx, 2).unwrap();
        let moved = self.recorded(&self.text.index_select(&idx, 1).unwrap()).map;
        max_abs_diff(&values(&base), &values(&moved))
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Whether some k-subset of the prompted categories is fully detected.
pub fn has_k_subset(categories: &[String], found: &BTreeSet<String>, k: usize) -> bool {
    (0u32..1 << categories.len())
        .filter(|m| m.count_ones() as usize == k)
        .any(|m| (0..categories.len()).filter(|i| m & (1 << i) != 0).all(|i| found.contains(&categories[i])))
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
    (mean, var.sqrt())
}

/// Largest deviation of `mg_scores` from subset enumeration, and whether
/// every round and the means are non-increasing in k.
pub fn mg_brute_force_check(det: &[Vec<BTreeSet<String>>], suite: &MultiGenSuite) -> (f64, bool) {
    let r = mg_scores(det, suite).unwrap();
    let n = suite.prompts.len();
    let mut worst: f64 = 0.0;
    for k in 2..=5 {
        let per_round: Vec<f64> = det
            .iter()
            .map(|round| {
                let hits = suite.prompts.iter().zip(round).filter(|(p, f)| has_k_subset(&p.categories, f, k)).count();
                100.0 * hits as f64 / n as f64
            })
            .collect();
        let (mean, std) = mean_std(&per_round);
        worst = worst.max((r.mg(k).mean - mean).abs()).max((r.mg(k).std - std).abs());
    }
    let monotone = r.per_round.iter().all(|s| s.windows(2).all(|w| w[0] >= w[1]))
        && (2..5).all(|k| r.mg(k).mean >= r.mg(k + 1).mean);
    (worst, monotone)
}

/// Random detections: each prompted category found with probability 0.6,
/// plus occasional unprompted extras.
pub fn random_detections(suite: &MultiGenSuite, rng: &mut impl Rng) -> Vec<Vec<BTreeSet<String>>> {
    (0..suite.rounds)
        .map(|_| {
            suite
                .prompts
                .iter()
                .map(|p| {
                    let mut f: BTreeSet<String> = p.categories.iter().filter(|_| rng.random_bool(0.6)).cloned().collect();
                    if rng.random_bool(0.3) {
                        if let Some(extra) = suite.pool.iter().find(|c| !p.categories.contains(c)) {
                            f.insert(extra.clone());
                        }
                    }
                    f
                })
                .collect()
        })
        .collect()
}
