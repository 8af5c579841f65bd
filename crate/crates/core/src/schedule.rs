//! Noise schedules, forward noising, and the DDIM reverse step.
//!
//! Timesteps are 1-based: `alpha_bar(t)` for `t` in `1..=T`, with the
//! convention `alpha_bar(0) == 1` so that a final step to `t_prev = 0`
//! returns the predicted clean sample.

use std::fmt::Write as _;

use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{Tensor, TensorError};

/// Relative tolerance for the cumulative-product check at construction.
const PRODUCT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid schedule parameters: {0}")]
    InvalidParameters(String),
    #[error("schedule failed validation: {0}")]
    Corrupt(String),
    #[error("timestep {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },
    #[error("step ordering violated: need t_prev < t, got t={t}, t_prev={t_prev}")]
    StepOrder { t: usize, t_prev: usize },
    #[error("eta must lie in [0, 1], got {0}")]
    Eta(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear β ramp from `beta_start` to `beta_end` over `num_steps` steps.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(ScheduleError::InvalidParameters("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(ScheduleError::InvalidParameters(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (num_steps - 1) as f64;
            (0..num_steps).map(|i| beta_start + span * i as f64 / last).collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(ScheduleError::InvalidParameters("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(ScheduleError::InvalidParameters(format!("beta {b} outside (0, 1)")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sched = Self { betas, alpha_bar };
        sched.validate()?;
        Ok(sched)
    }

    /// Builds a schedule without validation. Exists so self-checks can feed a
    /// deliberately broken schedule through [`NoiseSchedule::validate`].
    #[doc(hidden)]
    pub fn from_parts_unchecked(betas: Vec<f64>, alpha_bar: Vec<f64>) -> Self {
        Self { betas, alpha_bar }
    }

    pub fn validate(&self) -> Result<()> {
        if self.betas.len() != self.alpha_bar.len() || self.betas.is_empty() {
            return Err(ScheduleError::Corrupt("beta/alpha_bar length mismatch".into()));
        }
        let mut prod = 1.0f64;
        let mut prev = 1.0f64;
        for (i, (&b, &ab)) in self.betas.iter().zip(&self.alpha_bar).enumerate() {
            let t = i + 1;
            if !(ab > 0.0 && ab < 1.0) {
                return Err(ScheduleError::Corrupt(format!("alpha_bar[{t}] = {ab} outside (0, 1)")));
            }
            if ab >= prev {
                return Err(ScheduleError::Corrupt(format!("alpha_bar not decreasing at t={t}")));
            }
            prod *= 1.0 - b;
            if ((ab - prod) / prod).abs() > PRODUCT_TOLERANCE {
                return Err(ScheduleError::Corrupt(format!(
                    "alpha_bar[{t}] = {ab} but product of (1 - beta) = {prod}"
                )));
            }
            prev = ab;
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Cumulative signal coefficient; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.alpha_bar.len() => Ok(self.alpha_bar[t - 1]),
            t => Err(ScheduleError::StepOutOfRange {
                t,
                max: self.alpha_bar.len(),
            }),
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.betas.len() {
            return Err(ScheduleError::StepOutOfRange {
                t,
                max: self.betas.len(),
            });
        }
        Ok(self.betas[t - 1])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta_t,alpha_bar_t\n");
        for (i, (b, ab)) in self.betas.iter().zip(&self.alpha_bar).enumerate() {
            let _ = writeln!(out, "{},{:e},{:e}", i + 1, b, ab);
        }
        out
    }

    fn check_step(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(ScheduleError::StepOutOfRange {
                t,
                max: self.num_steps(),
            });
        }
        self.alpha_bar(t)
    }
}

/// Inference timesteps: `S` of the `T` training steps, descending, each paired
/// with its predecessor (`0` for the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestepPlan {
    pairs: Vec<(usize, usize)>,
}

impl TimestepPlan {
    /// Uniform "leading" subsampling: `t_k = 1 + floor(k·T/S)`.
    pub fn uniform(train_steps: usize, inference_steps: usize) -> Result<Self> {
        if inference_steps == 0 || inference_steps > train_steps {
            return Err(ScheduleError::InvalidParameters(format!(
                "need 1 <= S <= T, got S={inference_steps}, T={train_steps}"
            )));
        }
        let mut ts: Vec<usize> = (0..inference_steps)
            .map(|k| 1 + k * train_steps / inference_steps)
            .collect();
        ts.reverse();
        let pairs = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(0)))
            .collect();
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// First timestep (the noisiest).
    pub fn first(&self) -> usize {
        self.pairs[0].0
    }
}

/// `sqrt(ᾱ)·x0 + sqrt(1 − ᾱ)·eps` for an explicit `ᾱ`.
pub fn noise_with_alpha_bar(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let a = alpha_bar.sqrt();
    let b = (1.0 - alpha_bar).sqrt();
    Ok(x0.zip_map(eps, "forward_diffuse", |x, e| (a * x as f64 + b * e as f64) as f32)?)
}

pub fn forward_diffuse(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.check_step(t)?;
    noise_with_alpha_bar(x0, eps, ab)
}

/// Predicted clean sample `(x_t − sqrt(1 − ᾱ)·eps_hat) / sqrt(ᾱ)`.
pub fn predict_x0_with_alpha_bar(x_t: &Tensor, eps_hat: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let sa = alpha_bar.sqrt();
    let sb = (1.0 - alpha_bar).sqrt();
    Ok(x_t.zip_map(eps_hat, "predict_x0", |x, e| ((x as f64 - sb * e as f64) / sa) as f32)?)
}

pub fn predict_x0(x_t: &Tensor, eps_hat: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.check_step(t)?;
    predict_x0_with_alpha_bar(x_t, eps_hat, ab)
}

/// DDIM noise scale `σ = eta·sqrt((1−ᾱ_prev)/(1−ᾱ_t))·sqrt(1 − ᾱ_t/ᾱ_prev)`.
pub fn ddim_sigma(alpha_bar_t: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    if eta == 0.0 {
        return 0.0;
    }
    let ratio = ((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)).max(0.0);
    eta * ratio.sqrt() * (1.0 - alpha_bar_t / alpha_bar_prev).max(0.0).sqrt()
}

/// One DDIM update from `t` to `t_prev`. Draws `c·h·w` normals from `rng`
/// only when `σ > 0`.
pub fn ddim_step(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(ScheduleError::StepOrder { t, t_prev });
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(ScheduleError::Eta(eta));
    }
    x_t.ensure_same_shape(eps_hat)?;
    let ab_t = sched.check_step(t)?;
    let ab_prev = sched.alpha_bar(t_prev)?;
    let sigma = ddim_sigma(ab_t, ab_prev, eta);
    let sa = ab_t.sqrt();
    let sb = (1.0 - ab_t).sqrt();
    let sa_prev = ab_prev.sqrt();
    let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();

    let mut noise = vec![0.0f32; if sigma > 0.0 { x_t.len() } else { 0 }];
    rng.fill_standard_normal(&mut noise);

    let data: Vec<f32> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .enumerate()
        .map(|(i, (&x, &e))| {
            let x0 = ((x as f64 - sb * e as f64) / sa) as f32 as f64;
            let mut out = sa_prev * x0;
            if dir != 0.0 {
                out += dir * e as f64;
            }
            if sigma > 0.0 {
                out += sigma * noise[i] as f64;
            }
            out as f32
        })
        .collect();
    Ok(Tensor::from_vec(x_t.shape(), data)?)
}
