//! Evaluation report and the MultiGen sampling harness.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::detect::{DetectorConfig, OracleDetector};
use crate::eval::miou::{MiouConfig, MiouResult};
use crate::eval::multigen::{mg_scores, MeanStd, MgScores, MultiGenSuite};
use crate::model::checkpoint::Checkpoint;
use crate::model::sampler::{sample, to_images, Conditioning, SampleConfig};
use crate::model::ToyLdm;
use crate::nn::derive_seed;

pub const REPORT_SCHEMA: &str = "eval-v1";

/// Prompts sampled together. Fixed so results do not depend on `jobs`.
pub const PROMPT_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub checkpoint_step: usize,
    pub suite_hash: String,
    pub sampling: SampleConfig,
    pub detector: DetectorConfig,
    pub miou: MiouConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    /// `"MG2"` to `"MG5"`, percentages.
    pub mg: BTreeMap<String, MeanStd>,
    pub mg_per_round: Vec<[f64; 4]>,
    pub object_accuracy: f64,
    pub attn_miou: f64,
    pub miou_tokens: usize,
    pub miou_skipped: usize,
    /// Detection rate per category over the prompts that name it.
    pub category_success: BTreeMap<String, f64>,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn new(scores: &MgScores, category_success: BTreeMap<String, f64>, miou: MiouResult, metadata: ReportMetadata) -> Self {
        let mg = (2..=5).map(|k| (format!("MG{k}"), scores.mg(k))).collect();
        Self {
            schema: REPORT_SCHEMA.to_string(),
            mg,
            mg_per_round: scores.per_round.clone(),
            object_accuracy: scores.object_accuracy,
            attn_miou: miou.miou,
            miou_tokens: miou.tokens,
            miou_skipped: miou.skipped,
            category_success,
            metadata,
        }
    }

    pub fn mg(&self, k: usize) -> MeanStd {
        self.mg[&format!("MG{k}")]
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report serializes")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if r.schema != REPORT_SCHEMA {
            return Err(Error::Invalid(format!("report schema {:?}, expected {REPORT_SCHEMA:?}", r.schema)));
        }
        Ok(r)
    }
}

/// Detected categories per round and prompt, plus the MG scores.
#[derive(Debug, Clone)]
pub struct MultiGenRun {
    pub detections: Vec<Vec<BTreeSet<String>>>,
    pub scores: MgScores,
}

impl MultiGenRun {
    pub fn category_success(&self, suite: &MultiGenSuite) -> BTreeMap<String, f64> {
        let mut hits: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for round in &self.detections {
            for (prompt, found) in suite.prompts.iter().zip(round) {
                for c in &prompt.categories {
                    let e = hits.entry(c.clone()).or_default();
                    e.0 += found.contains(c) as usize;
                    e.1 += 1;
                }
            }
        }
        hits.into_iter().map(|(c, (h, n))| (c, 100.0 * h as f64 / n as f64)).collect()
    }
}

/// Seed of the image for `prompt` in `round`.
pub fn image_seed(seed: u64, round: usize, prompt: usize) -> u64 {
    derive_seed(seed, &format!("multigen-r{round}-p{prompt}"))
}

/// Samples one image per prompt and round and runs the detector on each.
/// Work is split into fixed prompt chunks handed to `jobs` threads, each
/// with its own model instance restored from `ckpt`.
pub fn run_multigen(
    ckpt: &Checkpoint,
    suite: &MultiGenSuite,
    sampling: &SampleConfig,
    detector: &OracleDetector,
    seed: u64,
    jobs: usize,
) -> Result<MultiGenRun> {
    let n = suite.prompts.len();
    let tasks: Vec<(usize, usize)> =
        (0..suite.rounds).flat_map(|r| (0..n).step_by(PROMPT_CHUNK).map(move |p| (r, p))).collect();
    let results: Mutex<BTreeMap<(usize, usize), Vec<BTreeSet<String>>>> = Mutex::new(BTreeMap::new());
    let next = AtomicUsize::new(0);
    let worker = || -> Result<()> {
        let model = ToyLdm::from_checkpoint(ckpt)?;
        let uncond = model.null_text()?;
        let res = model.unet.config().resolution;
        let channels = model.unet.config().in_channels;
        loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(&(round, start)) = tasks.get(i) else { return Ok(()) };
            let end = (start + PROMPT_CHUNK).min(n);
            let prompts = &suite.prompts[start..end];
            let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
            let cond = model.text.encode_batch(&texts)?;
            let seeds: Vec<u64> = (start..end).map(|p| image_seed(seed, round, p)).collect();
            let c = Conditioning { cond: &cond, uncond: &uncond, null_trained: ckpt.meta.null_trained };
            let x: Tensor = sample(&model.unet, &model.schedule, &c, (res, res, channels), sampling, &seeds)?;
            let found = to_images(&x)?.iter().map(|img| detector.detect(img)).collect();
            results.lock().expect("no worker panicked").insert((round, start), found);
        }
    };
    let jobs = jobs.max(1).min(tasks.len().max(1));
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs).map(|_| s.spawn(worker)).collect();
        handles.into_iter().try_for_each(|h| h.join().expect("evaluation worker panicked"))
    })?;
    let mut detections = vec![Vec::with_capacity(n); suite.rounds];
    for ((round, _), found) in results.into_inner().expect("no worker panicked") {
        detections[round].extend(found);
    }
    let scores = mg_scores(&detections, suite)?;
    Ok(MultiGenRun { detections, scores })
}

/// Hex SHA-256 of a file.
pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
