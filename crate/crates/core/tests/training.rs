use candle_core::{DType, Tensor};
use tokencompose::attention::AttentionRecorder;
use tokencompose::data::dataset::render_samples;
use tokencompose::data::registry::CategoryRegistry;
use tokencompose::data::scene::SceneSampler;
use tokencompose::model::schedule::NoiseSchedule;
use tokencompose::model::text::TextEncoderConfig;
use tokencompose::model::unet::{denoise_loss, EpsilonModel, ModelConfig};
use tokencompose::model::ToyLdm;
use tokencompose::nn::{randn, seeded_rng};
use tokencompose::train::{prepare, train, PreparedSample, Preset, TrainConfig, TrainOutput, FINAL_CHECKPOINT};
use tokencompose::{Error, Result};

struct Zero;

impl EpsilonModel for Zero {
    fn predict(&self, x: &Tensor, _: &[usize], _: &Tensor, _: Option<&mut AttentionRecorder>) -> Result<Tensor> {
        Ok(x.zeros_like()?)
    }

    fn attention_layer_ids(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Recovers the noise exactly from `z_t` and the known clean input.
struct Oracle<'a> {
    z0: &'a Tensor,
    schedule: &'a NoiseSchedule,
}

impl EpsilonModel for Oracle<'_> {
    fn predict(&self, x: &Tensor, t: &[usize], _: &Tensor, _: Option<&mut AttentionRecorder>) -> Result<Tensor> {
        let ab = self.schedule.alpha_bar(t[0])?;
        Ok(((x - (self.z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }

    fn attention_layer_ids(&self) -> Vec<String> {
        Vec::new()
    }
}

fn tiny_model() -> ToyLdm {
    let mc = ModelConfig { channels: [8, 8, 16], num_heads: 2, key_dim: 4, groups: 4, time_dim: 16, ..Default::default() };
    ToyLdm::new(mc, TextEncoderConfig::default(), NoiseSchedule::default(), &CategoryRegistry::default()).unwrap()
}

fn data(n: usize) -> Vec<PreparedSample> {
    prepare(&render_samples(n, &CategoryRegistry::default(), &SceneSampler::default(), 2).unwrap()).unwrap()
}

fn tiny_config(preset: Preset, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        grad_accum: 1,
        learning_rate: 1e-3,
        weights: preset.weights(None).unwrap(),
        seed: 5,
        ..Default::default()
    }
}

#[test]
fn zero_predictor_loss_is_about_one() {
    let schedule = NoiseSchedule::default();
    let mut rng = seeded_rng(1, "mc");
    let text = Tensor::zeros((1, 1, 1), DType::F32, &candle_core::Device::Cpu).unwrap();
    let mut total = 0.0;
    let draws = 1000;
    for i in 0..draws {
        let z0 = randn(&mut rng, &[1, 4, 4, 3], DType::F32).unwrap();
        let noise = randn(&mut rng, &[1, 4, 4, 3], DType::F32).unwrap();
        let t = 1 + i % 1000;
        let (l, _) = denoise_loss(&Zero, &schedule, &z0, &text, &[t], &noise, Vec::<String>::new()).unwrap();
        total += l.to_scalar::<f32>().unwrap() as f64;
    }
    let mean = total / draws as f64;
    assert!((mean - 1.0).abs() < 0.1, "{mean}");
}

#[test]
fn exact_noise_predictor_has_zero_loss() {
    let schedule = NoiseSchedule::default();
    let mut rng = seeded_rng(2, "oracle");
    let z0 = randn(&mut rng, &[1, 4, 4, 3], DType::F64).unwrap();
    let noise = randn(&mut rng, &[1, 4, 4, 3], DType::F64).unwrap();
    let text = Tensor::zeros((1, 1, 1), DType::F64, &candle_core::Device::Cpu).unwrap();
    let model = Oracle { z0: &z0, schedule: &schedule };
    let (l, _) = denoise_loss(&model, &schedule, &z0, &text, &[700], &noise, Vec::<String>::new()).unwrap();
    assert!(l.to_scalar::<f64>().unwrap() < 1e-12);
}

#[test]
fn one_step_moves_parameters() {
    let model = tiny_model();
    // Parameters are updated in place, so keep copies.
    let before: Vec<(String, Tensor)> = model.store.tensors().into_iter().map(|(k, v)| (k, v.copy().unwrap())).collect();
    train(&model, &data(4), &tiny_config(Preset::Tokencompose, 1), None, None).unwrap();
    let after = model.store.tensors();
    let moved = before.iter().filter(|(k, v)| {
        let d = (v - &after[k]).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        d > 0.0
    });
    assert!(moved.count() > 0);
}

#[test]
fn zero_weights_log_plain_denoising_loss() {
    let model = tiny_model();
    let out = train(&model, &data(4), &tiny_config(Preset::LdmOnly, 3), None, None).unwrap();
    for r in &out.log {
        assert_eq!(r.total, r.denoise);
    }
}

#[test]
fn repeated_runs_give_identical_curves() {
    let samples = data(8);
    let run = || {
        let model = tiny_model();
        train(&model, &samples, &tiny_config(Preset::Tokencompose, 100), None, None).unwrap().log
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 100);
    for (x, y) in a.iter().zip(&b) {
        assert!((x.total - y.total).abs() < 1e-6 && (x.denoise - y.denoise).abs() < 1e-6);
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let output = TrainOutput { dir: dir.path(), train_config_echo: serde_json::Value::Null };
    let model = tiny_model();
    train(&model, &data(4), &tiny_config(Preset::Tokencompose, 2), Some(&output), None).unwrap();
    let final_path = dir.path().join(FINAL_CHECKPOINT);
    let good = std::fs::read(&final_path).unwrap();

    let mut bad = data(2);
    for s in &mut bad {
        s.image = (&s.image * f64::NAN).unwrap();
    }
    let res = train(&model, &bad, &tiny_config(Preset::Tokencompose, 2), Some(&output), None);
    assert!(matches!(res, Err(Error::NonFinite { step: 1 })));
    assert_eq!(std::fs::read(&final_path).unwrap(), good);
}

#[test]
fn recorded_layers_follow_the_loss_layers() {
    let model = tiny_model();
    let samples = data(2);
    let cfg = TrainConfig { weights: Preset::Tokencompose.weights(Some(vec!["dec.32".into()])).unwrap(), ..tiny_config(Preset::Tokencompose, 1) };
    let out = train(&model, &samples, &cfg, None, None).unwrap();
    let layers: Vec<&String> = out.log[0].token_per_layer.keys().collect();
    assert_eq!(layers, vec!["dec.32"]);
    assert_eq!(out.log[0].pixel_per_layer.len(), 1);
}
