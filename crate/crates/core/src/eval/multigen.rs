//! Multi-category prompt suite and MGk / object-accuracy scoring.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;

pub const CATEGORIES_PER_PROMPT: usize = 5;
pub const REFERENCE_PROMPTS: usize = 1000;
pub const DEFAULT_PROMPTS: usize = 100;
pub const DEFAULT_ROUNDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGenPrompt {
    pub text: String,
    /// Categories in sentence order.
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGenSuite {
    pub pool: Vec<String>,
    pub seed: u64,
    pub rounds: usize,
    pub images_per_prompt: usize,
    pub prompts: Vec<MultiGenPrompt>,
}

/// `"A photo of a, b, c, d, and e."`
pub fn multigen_prompt(categories: &[&str]) -> String {
    let names: Vec<String> = categories.iter().map(|c| c.to_lowercase()).collect();
    match names.len() {
        0 => "A photo of .".to_string(),
        1 => format!("A photo of {}.", names[0]),
        n => format!("A photo of {}, and {}.", names[..n - 1].join(", "), names[n - 1]),
    }
}

pub fn build_multigen(pool: &[String], n_prompts: usize, rounds: usize, seed: u64) -> Result<MultiGenSuite> {
    let distinct: BTreeSet<&String> = pool.iter().collect();
    if distinct.len() != pool.len() {
        return Err(Error::Config("category pool contains duplicates".into()));
    }
    if pool.len() < CATEGORIES_PER_PROMPT {
        return Err(Error::Config(format!(
            "category pool has {} entries, at least {CATEGORIES_PER_PROMPT} are needed",
            pool.len()
        )));
    }
    if rounds == 0 || n_prompts == 0 {
        return Err(Error::Config("suite needs at least one prompt and one round".into()));
    }
    let mut rng = seeded_rng(seed, "multigen");
    let prompts = (0..n_prompts)
        .map(|_| {
            let mut cats: Vec<&String> = pool.choose_multiple(&mut rng, CATEGORIES_PER_PROMPT).collect();
            cats.shuffle(&mut rng);
            let cats: Vec<String> = cats.into_iter().cloned().collect();
            let refs: Vec<&str> = cats.iter().map(String::as_str).collect();
            MultiGenPrompt { text: multigen_prompt(&refs), categories: cats }
        })
        .collect();
    Ok(MultiGenSuite { pool: pool.to_vec(), seed, rounds, images_per_prompt: 1, prompts })
}

impl MultiGenSuite {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("suite serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgScores {
    /// `mg[k - 2]` is MGk for k = 2..=5, in percent.
    pub mg: [MeanStd; 4],
    pub per_round: Vec<[f64; 4]>,
    /// Percentage of images with every prompted category detected.
    pub object_accuracy: f64,
}

impl MgScores {
    pub fn mg(&self, k: usize) -> MeanStd {
        self.mg[k - 2]
    }
}

/// `detections[round][prompt]` is the set of categories found in that image.
/// MGk per round is the percentage of images with at least k prompted
/// categories; rounds are summarized by mean and population std.
pub fn mg_scores(detections: &[Vec<BTreeSet<String>>], suite: &MultiGenSuite) -> Result<MgScores> {
    if detections.len() != suite.rounds {
        return Err(Error::Invalid(format!(
            "detections cover {} rounds, the suite has {}",
            detections.len(),
            suite.rounds
        )));
    }
    let n = suite.prompts.len();
    let mut per_round = Vec::with_capacity(detections.len());
    let mut all_hits = 0usize;
    for (r, round) in detections.iter().enumerate() {
        if round.len() != n {
            return Err(Error::Invalid(format!("round {r} has {} images for {n} prompts", round.len())));
        }
        let mut counts = [0usize; 4];
        for (prompt, found) in suite.prompts.iter().zip(round) {
            let hits = prompt.categories.iter().filter(|c| found.contains(*c)).count();
            for k in 2..=5 {
                if hits >= k {
                    counts[k - 2] += 1;
                }
            }
            if hits == prompt.categories.len() {
                all_hits += 1;
            }
        }
        per_round.push(counts.map(|c| 100.0 * c as f64 / n as f64));
    }
    let mg = std::array::from_fn(|i| {
        let vals: Vec<f64> = per_round.iter().map(|r| r[i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        MeanStd { mean, std: var.sqrt() }
    });
    let object_accuracy = 100.0 * all_hits as f64 / (n * detections.len()) as f64;
    Ok(MgScores { mg, per_round, object_accuracy })
}
