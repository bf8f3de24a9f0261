//! Small neural-network toolkit on top of candle tensors.
//!
//! Activations are kept channels-last (`[B, H, W, C]`) throughout the toy
//! model so that convolutions are a single im2col + matmul and attention can
//! read `[B, H*W, C]` without permutes.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{self, Conv2dOp, GroupNormOp};

/// Derives an independent 64-bit seed from a base seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest has 32 bytes"))
}

pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Standard-normal tensor drawn from a seeded generator.
pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0f64, 1f64).expect("unit normal");
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    Normal(f64),
}

/// Trainable parameters, created lazily by name and initialized from a
/// generator keyed on `(seed, name)` so that values do not depend on
/// construction order.
pub struct ParamStore {
    seed: u64,
    dtype: DType,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { seed, dtype, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath { store: self, prefix: String::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// All parameters, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.as_detached_tensor())).collect()
    }

    /// Overwrites every parameter with the tensor of the same name.
    pub fn load(&self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let src = tensors
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: expected shape {:?}, found {:?}",
                    var.dims(),
                    src.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    fn get(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.borrow().get(&name) {
            if v.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {name} requested with shape {shape:?} but exists as {:?}",
                    v.dims()
                )));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = seeded_rng(self.seed, &name);
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(bound) => {
                let u = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| u.sample(&mut rng)).collect()
            }
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name, var);
        Ok(out)
    }
}

pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: &str) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamPath { store: self.store, prefix }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(self.pp(name).prefix, shape, init)
    }
}

/// Fully connected layer; weight stored as `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(p: &ParamPath, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        Self::with_init(p, in_dim, out_dim, bias, Init::Uniform(1.0 / (in_dim as f64).sqrt()))
    }

    pub fn with_init(p: &ParamPath, in_dim: usize, out_dim: usize, bias: bool, init: Init) -> Result<Self> {
        let weight = p.get("weight", &[in_dim, out_dim], init)?;
        let bias = if bias { Some(p.get("bias", &[out_dim], Init::Zeros)?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn from_weights(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies the layer to the last axis of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let c = *dims.last().unwrap_or(&0);
        if c != self.in_dim() {
            return Err(Error::Shape(format!("linear layer expects width {}, got {c}", self.in_dim())));
        }
        let rows = x.elem_count() / c.max(1);
        let y = match &self.bias {
            Some(b) => kernels::conv2d(&x.reshape((1, rows, 1, c))?, &self.weight, b, Conv2dOp { k: 1, stride: 1 })?,
            None => x.reshape((rows, c))?.matmul(&self.weight)?,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Channels-last 2-D convolution, weight stored as `[k*k*c_in, c_out]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    op: Conv2dOp,
}

impl Conv2d {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let fan_in = k * k * c_in;
        Self::with_init(p, c_in, c_out, k, stride, Init::Uniform(1.0 / (fan_in as f64).sqrt()))
    }

    pub fn with_init(p: &ParamPath, c_in: usize, c_out: usize, k: usize, stride: usize, init: Init) -> Result<Self> {
        let weight = p.get("weight", &[k * k * c_in, c_out], init)?;
        let bias = p.get("bias", &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias, op: Conv2dOp { k, stride } })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, _, c) = x.dims4()?;
        let kkc = self.weight.dims()[0];
        if kkc != self.op.k * self.op.k * c {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                kkc / (self.op.k * self.op.k)
            )));
        }
        Ok(kernels::conv2d(x, &self.weight, &self.bias, self.op)?)
    }
}

/// Group normalization over the trailing channel axis.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(p: &ParamPath, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Config(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            groups,
            weight: p.get("weight", &[channels], Init::Ones)?,
            bias: p.get("bias", &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = *x.dims().last().unwrap_or(&0);
        if c != self.weight.elem_count() {
            return Err(Error::Shape(format!("group norm over {} channels got {c}", self.weight.elem_count())));
        }
        Ok(kernels::group_norm(x, &self.weight, &self.bias, GroupNormOp { groups: self.groups, eps: self.eps })?)
    }
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::softmax_last_dim(x)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(kernels::silu(x)?)
}

/// Nearest-neighbour 2x upsampling of a `[B, H, W, C]` tensor.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?
        .reshape((b, 2 * h, 2 * w, c))?;
    Ok(y)
}

/// Sinusoidal embedding of integer timesteps, shape `[B, dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step as f64 * freq).sin());
        }
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// AdamW with decoupled weight decay. Moment estimates are plain tensors so
/// they can be written into checkpoints.
pub struct AdamW {
    pub config: AdamWConfig,
    params: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: usize,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let first = params.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        let second = params.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { config, params, first, second, step: 0 })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Applies one update from averaged gradients keyed by parameter name.
    /// Parameters without a gradient only receive weight decay.
    pub fn step(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (name, var)) in self.params.iter().enumerate() {
            let theta = var.as_tensor();
            let decayed = (theta * (1.0 - c.lr * c.weight_decay))?;
            let Some(g) = grads.get(name) else {
                var.set(&decayed)?;
                continue;
            };
            let m = ((&self.first[i] * c.beta1)? + (g * (1.0 - c.beta1))?)?;
            let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(decayed - (update * c.lr)?)?)?;
            self.first[i] = m;
            self.second[i] = v;
        }
        Ok(())
    }

    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("adamw.m.{name}"), self.first[i].clone());
            out.insert(format!("adamw.v.{name}"), self.second[i].clone());
        }
        out
    }

    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (prefix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("adamw.{prefix}.{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer state {key}")))?;
                if t.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("optimizer state {key} has wrong shape")));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}

/// Running sum of gradients over micro-batches, keyed by parameter name.
#[derive(Default)]
pub struct GradAccumulator {
    sums: BTreeMap<String, Tensor>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<()> {
        for (name, var) in params {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.detach();
                let sum = match self.sums.remove(name) {
                    Some(prev) => (prev + g)?,
                    None => g,
                };
                self.sums.insert(name.clone(), sum);
            }
        }
        self.count += 1;
        Ok(())
    }

    /// Mean gradient per parameter, resetting the accumulator.
    pub fn take_mean(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let n = self.count.max(1) as f64;
        let out = std::mem::take(&mut self.sums)
            .into_iter()
            .map(|(k, v)| Ok((k, (v / n)?)))
            .collect::<Result<_>>()?;
        self.count = 0;
        Ok(out)
    }
}
