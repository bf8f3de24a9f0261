use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    pub num_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self { num_steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

/// Linear-beta diffusion schedule. Timesteps run over `1..=T`; `t = 0`
/// denotes the clean signal (`ᾱ_0 = 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleParams", into = "ScheduleParams")]
pub struct NoiseSchedule {
    params: ScheduleParams,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(ScheduleParams::default()).expect("default schedule is valid")
    }
}

impl TryFrom<ScheduleParams> for NoiseSchedule {
    type Error = Error;

    fn try_from(p: ScheduleParams) -> Result<Self> {
        Self::linear(p)
    }
}

impl From<NoiseSchedule> for ScheduleParams {
    fn from(s: NoiseSchedule) -> Self {
        s.params
    }
}

impl NoiseSchedule {
    pub fn linear(params: ScheduleParams) -> Result<Self> {
        let ScheduleParams { num_steps: t, beta_start, beta_end } = params;
        if t == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(beta_start) || !ok(beta_end) {
            return Err(Error::Config(format!("betas must lie in (0, 1), got {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| if t == 1 { beta_start } else { beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64 })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { params, betas, alpha_bars })
    }

    pub fn params(&self) -> ScheduleParams {
        self.params
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.betas[t - 1])
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::Invalid(format!("timestep {t} outside [1, {}]", self.num_steps())));
        }
        Ok(())
    }

    /// `√ᾱ_t · z0 + √(1-ᾱ_t) · noise` for a batch `[B, ...]` with one
    /// timestep per element.
    pub fn add_noise(&self, z0: &Tensor, t: &[usize], noise: &Tensor) -> Result<Tensor> {
        if z0.dims() != noise.dims() {
            return Err(Error::Shape(format!("z0 {:?} vs noise {:?}", z0.dims(), noise.dims())));
        }
        let b = z0.dims()[0];
        if t.len() != b {
            return Err(Error::Shape(format!("{} timesteps for a batch of {b}", t.len())));
        }
        let mut sa = Vec::with_capacity(b);
        let mut sn = Vec::with_capacity(b);
        for &ti in t {
            self.check(ti)?;
            let ab = self.alpha_bar(ti)?;
            sa.push(ab.sqrt());
            sn.push((1.0 - ab).sqrt());
        }
        let mut shape = vec![1usize; z0.rank()];
        shape[0] = b;
        let sa = Tensor::from_vec(sa, shape.as_slice(), &Device::Cpu)?.to_dtype(z0.dtype())?;
        let sn = Tensor::from_vec(sn, shape.as_slice(), &Device::Cpu)?.to_dtype(z0.dtype())?;
        Ok((z0.broadcast_mul(&sa)? + noise.broadcast_mul(&sn)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, seeded_rng};
    use candle_core::DType;

    #[test]
    fn alpha_bars_decrease() {
        let s = NoiseSchedule::default();
        let first = s.alpha_bar(1).unwrap();
        let last = s.alpha_bar(1000).unwrap();
        assert!(last < first && last > 0.0 && first < 1.0);
        for t in 1..1000 {
            assert!(s.alpha_bar(t + 1).unwrap() < s.alpha_bar(t).unwrap());
        }
        assert!((first - (1.0 - 1e-4)).abs() < 1e-15);
    }

    #[test]
    fn add_noise_round_trip() {
        let s = NoiseSchedule::default();
        let mut rng = seeded_rng(3, "x");
        let z0 = randn(&mut rng, &[2, 4, 4, 3], DType::F64).unwrap();
        let eps = randn(&mut rng, &[2, 4, 4, 3], DType::F64).unwrap();
        let zt = s.add_noise(&z0, &[10, 900], &eps).unwrap();
        let z0v = z0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ev = eps.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ztv = zt.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, ((z, e), x)) in z0v.iter().zip(&ev).zip(&ztv).enumerate() {
            let t = if i < 48 { 10 } else { 900 };
            let ab = s.alpha_bar(t).unwrap();
            let rec = (x - (1.0 - ab).sqrt() * e) / ab.sqrt();
            assert!((rec - z).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::ones((1, 2, 2, 1), DType::F64, &Device::Cpu).unwrap();
        let zt = s.add_noise(&z0, &[500], &z0.zeros_like().unwrap()).unwrap();
        let v = zt.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (x - s.alpha_bar(500).unwrap().sqrt()).abs() < 1e-12));
    }

    #[test]
    fn out_of_range_timestep() {
        let s = NoiseSchedule::default();
        let z = Tensor::zeros((1, 1), DType::F64, &Device::Cpu).unwrap();
        assert!(s.add_noise(&z, &[0], &z).is_err());
        assert!(s.add_noise(&z, &[1001], &z).is_err());
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
    }

    #[test]
    fn serde_keeps_params_only() {
        let s = NoiseSchedule::default();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.len() < 100);
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
