//! Training loop for the joint denoising + grounding objective.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::append_jsonl;
use crate::data::scene::GroundedSample;
use crate::error::{Error, Result};
use crate::grounding::{tokencompose_loss, LossBreakdown, LossWeights, TokenGroundingSet, DEFAULT_GAMMA_PIXEL, DEFAULT_LAMBDA_TOKEN};
use crate::model::sampler::from_images;
use crate::model::unet::{denoise_loss, DEC_16A, DEC_16B, DEC_32, MID_8};
use crate::model::ToyLdm;
use crate::nn::{randn, seeded_rng, AdamW, AdamWConfig, GradAccumulator};

/// Learning rate used at full scale on a pretrained model.
pub const REFERENCE_LEARNING_RATE: f64 = 5e-6;
pub const DEFAULT_LEARNING_RATE: f64 = 5e-5;
pub const DEFAULT_GRAD_ACCUM: usize = 4;

/// Mid-block and decoder cross-attention layers.
pub fn default_loss_layers() -> Vec<String> {
    [MID_8, DEC_16A, DEC_16B, DEC_32].iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tokencompose,
    LdmOnly,
    TokenOnly,
    PixelOnly,
}

impl Preset {
    pub fn weights(self, layers: Option<Vec<String>>) -> Result<LossWeights> {
        let layers = layers.unwrap_or_else(default_loss_layers);
        let (l, g) = match self {
            Preset::Tokencompose => (DEFAULT_LAMBDA_TOKEN, DEFAULT_GAMMA_PIXEL),
            Preset::LdmOnly => (0.0, 0.0),
            Preset::TokenOnly => (DEFAULT_LAMBDA_TOKEN, 0.0),
            Preset::PixelOnly => (0.0, DEFAULT_GAMMA_PIXEL),
        };
        LossWeights::new(l, g, layers)
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Tokencompose => "tokencompose",
            Preset::LdmOnly => "ldm-only",
            Preset::TokenOnly => "token-only",
            Preset::PixelOnly => "pixel-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Probability of replacing a caption with the null condition.
    pub cond_dropout: f64,
    pub weight_decay: f64,
    /// Checkpoint (and evaluation hook) cadence in optimizer steps; 0 means
    /// only at the end.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 1000,
            batch_size: 1,
            grad_accum: DEFAULT_GRAD_ACCUM,
            weights: Preset::Tokencompose.weights(None).expect("preset weights are valid"),
            seed: 0,
            cond_dropout: 0.1,
            weight_decay: 1e-2,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.grad_accum == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps, batch size and accumulation must all be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("condition dropout must be in [0, 1], got {}", self.cond_dropout)));
        }
        self.weights.validate()
    }
}

/// One line of the metrics log; losses are averaged over the micro-batches
/// of the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub denoise: f64,
    pub token_per_layer: BTreeMap<String, f64>,
    pub pixel_per_layer: BTreeMap<String, f64>,
    pub total: f64,
}

/// A training example with its image already converted to a tensor.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// `[1, H, W, 3]` in `[-1, 1]`.
    pub image: Tensor,
    pub caption: String,
    pub grounding: TokenGroundingSet,
}

pub fn prepare(samples: &[GroundedSample]) -> Result<Vec<PreparedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PreparedSample {
                image: from_images(&[&s.image], DType::F32)?,
                caption: s.caption.clone(),
                grounding: s.grounding_set()?,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    pub optimizer: AdamW,
}

/// Where and how often to write checkpoints and the metrics log.
pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    pub train_config_echo: serde_json::Value,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.ckpt"))
}

/// Shuffled-epoch sampler over sample indices.
struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng: seeded_rng(seed, "batches") };
        s.refill();
        s
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.refill();
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Trains `model` in place. With `output`, appends every step to the
/// metrics log and writes checkpoints every `eval_every` steps and at the
/// end; a non-finite loss aborts before the optimizer update, leaving the
/// last checkpoint untouched. `on_eval` runs at the same cadence.
pub fn train(
    model: &ToyLdm,
    data: &[PreparedSample],
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
    mut on_eval: Option<&mut dyn FnMut(usize, &ToyLdm) -> Result<()>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let params = model.store.vars();
    let mut opt = AdamW::new(
        params.clone(),
        AdamWConfig { lr: cfg.learning_rate, weight_decay: cfg.weight_decay, ..Default::default() },
    )?;
    if let Some(out) = output {
        fs::create_dir_all(out.dir)?;
        let log = out.dir.join(METRICS_FILE);
        if log.exists() {
            fs::remove_file(&log)?;
        }
    }
    let mut batches = BatchStream::new(data.len(), cfg.seed);
    let mut rng = seeded_rng(cfg.seed, "train-noise");
    let record_layers: Vec<String> = cfg.weights.layer_ids.iter().cloned().collect();
    let null_trained = cfg.cond_dropout > 0.0;
    let t_max = model.schedule.num_steps();
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let mut acc = GradAccumulator::default();
        let mut sum = LossBreakdown::default();
        for _ in 0..cfg.grad_accum {
            let mut images = Vec::with_capacity(cfg.batch_size);
            let mut captions = Vec::with_capacity(cfg.batch_size);
            let mut groundings = Vec::with_capacity(cfg.batch_size);
            let mut ts = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let s = &data[batches.next()];
                let dropped = rng.random::<f64>() < cfg.cond_dropout;
                images.push(s.image.clone());
                if dropped {
                    captions.push("");
                    groundings.push(TokenGroundingSet::default());
                } else {
                    captions.push(s.caption.as_str());
                    groundings.push(s.grounding.clone());
                }
                ts.push(rng.random_range(1..=t_max));
            }
            let z0 = Tensor::cat(&images, 0)?;
            let noise = randn(&mut rng, z0.dims(), z0.dtype())?;
            let text = model.text.encode_batch(&captions)?;
            let (den, maps) = denoise_loss(&model.unet, &model.schedule, &z0, &text, &ts, &noise, &record_layers)?;
            let (total, bd) = tokencompose_loss(&den, &maps, &groundings, &cfg.weights)?;
            if !bd.total.is_finite() {
                log::error!("non-finite loss at step {step}; keeping the last checkpoint");
                return Err(Error::NonFinite { step });
            }
            acc.add(&params, &total.backward()?)?;
            add_breakdown(&mut sum, &bd);
        }
        opt.step(&acc.take_mean()?)?;
        let record = mean_record(step, sum, cfg.grad_accum);
        if let Some(out) = output {
            append_jsonl(&out.dir.join(METRICS_FILE), &record)?;
        }
        log.push(record);
        let at_cadence = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if at_cadence || step == cfg.steps {
            if let Some(out) = output {
                let ckpt = model.to_checkpoint(step, null_trained, out.train_config_echo.clone(), Some(opt.state_tensors()));
                let path = if step == cfg.steps { out.dir.join(FINAL_CHECKPOINT) } else { checkpoint_path(out.dir, step) };
                ckpt.save(&path)?;
            }
            if let Some(f) = on_eval.as_deref_mut() {
                f(step, model)?;
            }
        }
    }
    Ok(TrainOutcome { log, optimizer: opt })
}

fn add_breakdown(sum: &mut LossBreakdown, bd: &LossBreakdown) {
    sum.denoise += bd.denoise;
    sum.total += bd.total;
    for (k, v) in &bd.token_per_layer {
        *sum.token_per_layer.entry(k.clone()).or_default() += v;
    }
    for (k, v) in &bd.pixel_per_layer {
        *sum.pixel_per_layer.entry(k.clone()).or_default() += v;
    }
}

fn mean_record(step: usize, sum: LossBreakdown, n: usize) -> StepRecord {
    let n = n as f64;
    StepRecord {
        step,
        denoise: sum.denoise / n,
        token_per_layer: sum.token_per_layer.into_iter().map(|(k, v)| (k, v / n)).collect(),
        pixel_per_layer: sum.pixel_per_layer.into_iter().map(|(k, v)| (k, v / n)).collect(),
        total: sum.total / n,
    }
}

/// Reads a metrics log back.
pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Metadata { path: path.to_path_buf(), line: i + 1, msg: e.to_string() })
        })
        .collect()
}
