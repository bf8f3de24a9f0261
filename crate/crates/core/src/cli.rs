//! Command-line interface: data generation, training, sampling and
//! evaluation.
//!
//! Settings resolve as flags over the `--config` TOML file over built-in
//! defaults. The file has one optional table per subcommand (`[gen-data]`,
//! `[train]`, `[sample]`, `[eval]`) whose keys are the long flag names with
//! `-` replaced by `_`. Every invocation writes `run_manifest.json` to its
//! output directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::dataset::{generate_dataset, load_dataset, read_manifest, REFERENCE_DATASET_SIZE};
use crate::data::registry::CategoryRegistry;
use crate::data::scene::SceneSampler;
use crate::error::{Error, Result};
use crate::eval::detect::{DetectorConfig, OracleDetector};
use crate::eval::miou::{attention_miou, MiouConfig};
use crate::eval::multigen::{build_multigen, MultiGenSuite, DEFAULT_PROMPTS, DEFAULT_ROUNDS};
use crate::eval::report::{file_sha256, run_multigen, EvalReport, ReportMetadata};
use crate::model::sampler::{sample, to_images, Conditioning, SampleConfig, SamplerKind, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use crate::model::schedule::NoiseSchedule;
use crate::model::text::TextEncoderConfig;
use crate::model::unet::ModelConfig;
use crate::model::ToyLdm;
use crate::nn::derive_seed;
use crate::plot;
use crate::train::{prepare, read_metrics, train, Preset, TrainConfig, TrainOutput, DEFAULT_GRAD_ACCUM, METRICS_FILE};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const DETERMINISTIC_ENV: &str = "TC_DETERMINISTIC";
pub const VERSION: &str = concat!("v", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "tokencompose", version, about = "Grounded toy diffusion: data, training, sampling, evaluation")]
pub struct Cli {
    /// TOML file with `[gen-data]`, `[train]`, `[sample]` and `[eval]` tables.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a grounded synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset with one of the loss presets.
    Train(TrainArgs),
    /// Draw images for a prompt from a checkpoint.
    Sample(SampleArgs),
    /// Multi-category generation scores and attention mIoU of a checkpoint.
    Eval(EvalArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub min_objects: Option<usize>,
    #[arg(long)]
    pub max_objects: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub n: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub resolution: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        let s = SceneSampler::default();
        Self {
            n: REFERENCE_DATASET_SIZE,
            seed: 0,
            out: None,
            resolution: s.resolution,
            min_objects: s.min_objects,
            max_objects: s.max_objects,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// Comma-separated attention layers receiving the grounding losses.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long = "lr")]
    #[serde(rename = "learning_rate")]
    pub learning_rate: Option<f64>,
    /// Overrides the preset's token-loss weight.
    #[arg(long)]
    pub lambda_token: Option<f64>,
    /// Overrides the preset's pixel-loss weight.
    #[arg(long)]
    pub gamma_pixel: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub cond_dropout: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Channel widths of the three U-Net stages, e.g. `16,32,32`.
    #[arg(long, value_delimiter = ',')]
    pub channels: Option<Vec<usize>>,
    /// Use only the first N samples of the dataset.
    #[arg(long)]
    pub max_samples: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFileConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub preset: Preset,
    pub layers: Option<Vec<String>>,
    pub steps: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub learning_rate: f64,
    pub lambda_token: Option<f64>,
    pub gamma_pixel: Option<f64>,
    pub seed: u64,
    pub eval_every: usize,
    pub cond_dropout: f64,
    pub weight_decay: f64,
    pub channels: [usize; 3],
    pub max_samples: Option<usize>,
}

impl Default for TrainFileConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            out: None,
            preset: Preset::Tokencompose,
            layers: None,
            steps: t.steps,
            batch_size: t.batch_size,
            grad_accum: DEFAULT_GRAD_ACCUM,
            learning_rate: t.learning_rate,
            lambda_token: None,
            gamma_pixel: None,
            seed: t.seed,
            eval_every: t.eval_every,
            cond_dropout: t.cond_dropout,
            weight_decay: t.weight_decay,
            channels: ModelConfig::default().channels,
            max_samples: None,
        }
    }
}

impl TrainFileConfig {
    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut weights = self.preset.weights(self.layers.clone())?;
        if let Some(l) = self.lambda_token {
            weights.lambda_token = l;
        }
        if let Some(g) = self.gamma_pixel {
            weights.gamma_pixel = g;
        }
        let cfg = TrainConfig {
            learning_rate: self.learning_rate,
            steps: self.steps,
            batch_size: self.batch_size,
            grad_accum: self.grad_accum,
            weights,
            seed: self.seed,
            cond_dropout: self.cond_dropout,
            weight_decay: self.weight_decay,
            eval_every: self.eval_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let cfg = ModelConfig { channels: self.channels, seed: self.seed, ..Default::default() };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of images.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleFileConfig {
    pub checkpoint: Option<PathBuf>,
    pub prompt: Option<String>,
    pub out: Option<PathBuf>,
    pub n: usize,
    pub steps: usize,
    pub guidance: f64,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl Default for SampleFileConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            prompt: None,
            out: None,
            n: 4,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            sampler: SamplerKind::Ddim,
            seed: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Held-out dataset for attention mIoU; its registry drives detection.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prompt suite file; written there when building.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Build the suite instead of reading it.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub build_suite: Option<bool>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for sampling.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub miou_samples: Option<usize>,
    #[arg(long)]
    pub miou_timestep: Option<usize>,
    #[arg(long)]
    pub miou_threshold: Option<f64>,
    /// Earlier reports to show next to this one in the charts.
    #[arg(long, value_delimiter = ',')]
    pub compare: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalFileConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub suite: Option<PathBuf>,
    pub build_suite: bool,
    pub prompts: usize,
    pub rounds: usize,
    pub steps: usize,
    pub guidance: f64,
    pub sampler: SamplerKind,
    pub seed: u64,
    pub jobs: usize,
    pub miou_samples: usize,
    pub miou_timestep: Option<usize>,
    pub miou_threshold: f64,
    pub compare: Vec<PathBuf>,
}

impl Default for EvalFileConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            out: None,
            suite: None,
            build_suite: false,
            prompts: DEFAULT_PROMPTS,
            rounds: DEFAULT_ROUNDS,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            sampler: SamplerKind::Ddim,
            seed: 0,
            jobs: 1,
            miou_samples: 200,
            miou_timestep: None,
            miou_threshold: MiouConfig::default().threshold_ratio,
            compare: Vec::new(),
        }
    }
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub version: String,
    pub deterministic: bool,
    /// SHA-256 over every other field except the duration.
    pub hash: String,
    pub duration_secs: f64,
}

impl RunManifest {
    fn content_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        if let Value::Object(m) = &mut v {
            m.remove("hash");
            m.remove("duration_secs");
        }
        hex::encode(Sha256::digest(v.to_string()))
    }

    fn finish(mut self, started: Instant, dir: &Path) -> Result<Self> {
        self.hash = self.content_hash();
        self.duration_secs = started.elapsed().as_secs_f64();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self)?)?;
        Ok(self)
    }
}

/// Whether `TC_DETERMINISTIC=1` is set.
pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect()),
        other => other,
    }
}

fn overlay(base: &mut Value, top: Value) {
    if let (Value::Object(b), Value::Object(t)) = (base, top) {
        for (k, v) in t {
            b.insert(k, v);
        }
    }
}

/// Defaults, then the file table for `section`, then the set flags.
pub fn resolve<C: Serialize + DeserializeOwned + Default>(
    section: &str,
    file: Option<&toml::Table>,
    flags: &impl Serialize,
) -> Result<C> {
    let mut merged = serde_json::to_value(C::default())?;
    if let Some(table) = file.and_then(|f| f.get(section)) {
        let v = serde_json::to_value(table)?;
        if !v.is_object() {
            return Err(Error::Config(format!("config section [{section}] must be a table")));
        }
        overlay(&mut merged, v);
    }
    overlay(&mut merged, strip_nulls(serde_json::to_value(flags)?));
    serde_json::from_value(merged).map_err(|e| Error::Config(format!("[{section}]: {e}")))
}

fn read_config_file(path: Option<&Path>) -> Result<Option<toml::Table>> {
    let Some(path) = path else { return Ok(None) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))?;
    let known = ["gen-data", "train", "sample", "eval"];
    if let Some(k) = table.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown config section [{k}]; expected one of {known:?}")));
    }
    Ok(Some(table))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn manifest(command: &str, config: &impl Serialize, deterministic: bool) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.to_string(),
        config: serde_json::to_value(config)?,
        seeds: BTreeMap::new(),
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        version: VERSION.to_string(),
        deterministic,
        hash: String::new(),
        duration_secs: 0.0,
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let deterministic = deterministic_mode();
    let file = read_config_file(cli.config.as_deref())?;
    let name = cli.command.name();
    let started = Instant::now();
    match &cli.command {
        Command::GenData(args) => {
            let cfg: GenDataConfig = resolve(name, file.as_ref(), args)?;
            gen_data(&cfg, deterministic, started)
        }
        Command::Train(args) => {
            let cfg: TrainFileConfig = resolve(name, file.as_ref(), args)?;
            train_cmd(&cfg, deterministic, started)
        }
        Command::Sample(args) => {
            let cfg: SampleFileConfig = resolve(name, file.as_ref(), args)?;
            sample_cmd(&cfg, deterministic, started)
        }
        Command::Eval(args) => {
            let cfg: EvalFileConfig = resolve(name, file.as_ref(), args)?;
            eval_cmd(&cfg, deterministic, started)
        }
    }
}

fn gen_data(cfg: &GenDataConfig, deterministic: bool, started: Instant) -> Result<RunManifest> {
    let out = absolute(required(&cfg.out, "out")?)?;
    if cfg.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let sampler = SceneSampler {
        resolution: cfg.resolution,
        min_objects: cfg.min_objects,
        max_objects: cfg.max_objects,
        ..SceneSampler::default()
    };
    let registry = CategoryRegistry::default();
    generate_dataset(cfg.n, &registry, &sampler, cfg.seed, &out)?;
    let mut m = manifest("gen-data", cfg, deterministic)?;
    m.seeds.insert("data".into(), cfg.seed);
    m.outputs.insert("dataset".into(), out.clone());
    log::info!("wrote {} samples to {}", cfg.n, out.display());
    m.finish(started, &out)
}

fn load_prepared(dir: &Path, resolution: usize, limit: Option<usize>) -> Result<Vec<crate::train::PreparedSample>> {
    let reader = load_dataset(dir, resolution)?;
    let samples = match limit {
        Some(n) => reader.take(n).collect::<Result<Vec<_>>>()?,
        None => reader.collect::<Result<Vec<_>>>()?,
    };
    prepare(&samples)
}

fn train_cmd(cfg: &TrainFileConfig, deterministic: bool, started: Instant) -> Result<RunManifest> {
    let data = absolute(required(&cfg.data, "data")?)?;
    let out = absolute(required(&cfg.out, "out")?)?;
    let train_cfg = cfg.train_config()?;
    let model_cfg = cfg.model_config()?;
    let registry = read_manifest(&data)?.registry;
    let samples = load_prepared(&data, model_cfg.resolution, cfg.max_samples)?;
    log::info!("training {} on {} samples for {} steps", cfg.preset.name(), samples.len(), cfg.steps);
    let model = ToyLdm::new(model_cfg, TextEncoderConfig::default(), NoiseSchedule::default(), &registry)?;
    let echo = serde_json::to_value(cfg)?;
    let output = TrainOutput { dir: &out, train_config_echo: echo };
    let outcome = train(&model, &samples, &train_cfg, Some(&output), None)?;
    plot::loss_curve(&outcome.log, &out.join("loss.svg"))?;
    let mut m = manifest("train", cfg, deterministic)?;
    m.seeds.insert("train".into(), cfg.seed);
    m.inputs.insert("data".into(), data);
    m.outputs.insert("dir".into(), out.clone());
    m.finish(started, &out)
}

fn sample_cmd(cfg: &SampleFileConfig, deterministic: bool, started: Instant) -> Result<RunManifest> {
    let ckpt_path = absolute(required(&cfg.checkpoint, "checkpoint")?)?;
    let out = absolute(required(&cfg.out, "out")?)?;
    let prompt = cfg.prompt.as_deref().ok_or_else(|| Error::Config("--prompt is required".into()))?;
    if cfg.n == 0 {
        return Err(Error::Config("--n must be at least 1".into()));
    }
    let (model, ckpt) = ToyLdm::load(&ckpt_path)?;
    let cond = model.text.encode_batch(&vec![prompt; cfg.n])?;
    let uncond = model.null_text()?;
    let c = Conditioning { cond: &cond, uncond: &uncond, null_trained: ckpt.meta.null_trained };
    let mc = model.unet.config();
    let sampling = SampleConfig { steps: cfg.steps, guidance_scale: cfg.guidance, sampler: cfg.sampler };
    let seeds: Vec<u64> = (0..cfg.n).map(|i| derive_seed(cfg.seed, &format!("sample-{i}"))).collect();
    let x = sample(&model.unet, &model.schedule, &c, (mc.resolution, mc.resolution, mc.in_channels), &sampling, &seeds)?;
    std::fs::create_dir_all(&out)?;
    let mut m = manifest("sample", cfg, deterministic)?;
    for (i, img) in to_images(&x)?.iter().enumerate() {
        let path = out.join(format!("sample_{i:03}.png"));
        img.save(&path)?;
        m.outputs.insert(format!("image_{i:03}"), path);
    }
    m.seeds.insert("sample".into(), cfg.seed);
    m.inputs.insert("checkpoint".into(), ckpt_path);
    m.finish(started, &out)
}

fn eval_cmd(cfg: &EvalFileConfig, deterministic: bool, started: Instant) -> Result<RunManifest> {
    let ckpt_path = absolute(required(&cfg.checkpoint, "checkpoint")?)?;
    let data = absolute(required(&cfg.data, "data")?)?;
    let out = absolute(required(&cfg.out, "out")?)?;
    std::fs::create_dir_all(&out)?;
    let suite_path = match &cfg.suite {
        Some(p) => absolute(p)?,
        None => out.join("suite.json"),
    };
    let registry = read_manifest(&data)?.registry;
    let suite = if cfg.build_suite {
        let s = build_multigen(&registry.names(), cfg.prompts, cfg.rounds, cfg.seed)?;
        s.save(&suite_path)?;
        s
    } else {
        if !suite_path.is_file() {
            return Err(Error::Invalid(format!(
                "suite {} does not exist; pass --build-suite to create it",
                suite_path.display()
            )));
        }
        MultiGenSuite::load(&suite_path)?
    };
    let (model, ckpt) = ToyLdm::load(&ckpt_path)?;
    let detector = OracleDetector::new(registry, DetectorConfig::default());
    let gate = detector.check_gate()?;
    log::info!("detector validation accuracy {:.2}%", 100.0 * gate);
    let sampling = SampleConfig { steps: cfg.steps, guidance_scale: cfg.guidance, sampler: cfg.sampler };
    let jobs = if deterministic { 1 } else { cfg.jobs };
    let mg = run_multigen(&ckpt, &suite, &sampling, &detector, cfg.seed, jobs)?;
    let miou_cfg = MiouConfig {
        timestep: cfg.miou_timestep,
        threshold_ratio: cfg.miou_threshold,
        seed: cfg.seed,
        ..MiouConfig::default()
    };
    let held_out = load_prepared(&data, model.unet.config().resolution, Some(cfg.miou_samples))?;
    let miou = attention_miou(&model, &held_out, &miou_cfg)?;
    let metadata = ReportMetadata {
        seed: cfg.seed,
        checkpoint_sha256: file_sha256(&ckpt_path)?,
        checkpoint_step: ckpt.meta.step,
        suite_hash: suite.hash(),
        sampling,
        detector: *detector.config(),
        miou: miou_cfg,
    };
    let report = EvalReport::new(&mg.scores, mg.category_success(&suite), miou, metadata);
    let report_path = out.join("report.json");
    report.save(&report_path)?;

    let label = |p: &Path| p.parent().and_then(|d| d.file_name()).map_or("run".to_string(), |s| s.to_string_lossy().into_owned());
    let mut runs = vec![(label(&ckpt_path), report.clone())];
    for p in &cfg.compare {
        let r = EvalReport::load(p)?;
        runs.push((label(p), r));
    }
    plot::mg_bars(&runs, &out.join("mg.svg"))?;
    let points: Vec<(String, f64)> = runs.iter().map(|(n, r)| (n.clone(), r.attn_miou)).collect();
    plot::miou_chart(&points, &out.join("miou.svg"))?;
    let metrics = ckpt_path.with_file_name(METRICS_FILE);
    if metrics.is_file() {
        plot::loss_curve(&read_metrics(&metrics)?, &out.join("loss.svg"))?;
    }

    log::info!(
        "MG2 {:.2} MG3 {:.2} MG4 {:.2} MG5 {:.2} OA {:.2} mIoU {:.4}",
        report.mg(2).mean,
        report.mg(3).mean,
        report.mg(4).mean,
        report.mg(5).mean,
        report.object_accuracy,
        report.attn_miou
    );
    let mut m = manifest("eval", cfg, deterministic)?;
    m.seeds.insert("eval".into(), cfg.seed);
    m.inputs.insert("checkpoint".into(), ckpt_path);
    m.inputs.insert("data".into(), data);
    m.inputs.insert("suite".into(), suite_path);
    m.outputs.insert("report".into(), report_path);
    m.finish(started, &out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_is_flags_then_file_then_defaults() {
        let file: toml::Table = "[train]\nsteps = 7\nbatch_size = 3\n".parse().unwrap();
        let cli = Cli::try_parse_from(["tokencompose", "train", "--steps", "11", "--layers", "dec.32,mid.8"]).unwrap();
        let Command::Train(args) = cli.command else { panic!("wrong subcommand") };
        let cfg: TrainFileConfig = resolve("train", Some(&file), &args).unwrap();
        assert_eq!(cfg.steps, 11);
        assert_eq!(cfg.batch_size, 3);
        assert_eq!(cfg.grad_accum, DEFAULT_GRAD_ACCUM);
        assert_eq!(cfg.layers, Some(vec!["dec.32".to_string(), "mid.8".to_string()]));
    }

    #[test]
    fn unknown_file_keys_are_config_errors() {
        let file: toml::Table = "[train]\nstepz = 7\n".parse().unwrap();
        let cli = Cli::try_parse_from(["tokencompose", "train"]).unwrap();
        let Command::Train(args) = cli.command else { panic!("wrong subcommand") };
        let err = resolve::<TrainFileConfig>("train", Some(&file), &args).unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn presets_map_to_weights() {
        let cfg = TrainFileConfig { preset: Preset::LdmOnly, ..Default::default() };
        let w = cfg.train_config().unwrap().weights;
        assert_eq!((w.lambda_token, w.gamma_pixel), (0.0, 0.0));
        let cfg = TrainFileConfig { layers: Some(vec!["dec.32".into()]), ..Default::default() };
        let w = cfg.train_config().unwrap().weights;
        assert_eq!((w.lambda_token, w.gamma_pixel), (1e-3, 5e-5));
        assert_eq!(w.layer_ids.len(), 1);
    }
}
