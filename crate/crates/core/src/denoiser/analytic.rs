use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Condition, NoisePredictor, PredictOutput, PredictorError, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Shape, Tensor};

/// `ᾱ` at or above this is treated as noise-free: ε is returned as zero.
pub const SIGNAL_DOMINANT_LIMIT: f64 = 1.0 - 1e-12;

/// Prior mean, either explicit or generated for whatever latent shape is asked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanField {
    Constant(f32),
    /// Centred disk of radius `radius · min(h, w)`; same value on every channel.
    Disk {
        inside: f32,
        outside: f32,
        radius: f32,
    },
    #[serde(skip)]
    Tensor(Tensor),
}

impl MeanField {
    pub fn render(&self, shape: Shape) -> Result<Tensor> {
        match self {
            MeanField::Constant(v) => Ok(Tensor::full(shape, *v)?),
            MeanField::Tensor(t) => {
                if t.shape() != shape {
                    return Err(PredictorError::ShapeMismatch {
                        expected: shape,
                        got: t.shape(),
                    });
                }
                Ok(t.clone())
            }
            MeanField::Disk {
                inside,
                outside,
                radius,
            } => {
                let cy = (shape.height as f32 - 1.0) / 2.0;
                let cx = (shape.width as f32 - 1.0) / 2.0;
                let r = radius * shape.height.min(shape.width) as f32;
                let mut plane = Vec::with_capacity(shape.plane());
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        plane.push(if d2 <= r * r { *inside } else { *outside });
                    }
                }
                let data = (0..shape.channels).flat_map(|_| plane.iter().copied()).collect();
                Ok(Tensor::from_vec(shape, data)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrior {
    pub mu: MeanField,
    /// Isotropic standard deviation; `0` is a point mass at `mu`.
    pub sigma0: f64,
}

impl GaussianPrior {
    pub fn new(mu: MeanField, sigma0: f64) -> Result<Self> {
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(PredictorError::InvalidPrior(format!("sigma0 = {sigma0}")));
        }
        Ok(Self { mu, sigma0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mu: MeanField,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrior {
    components: Vec<GmmComponent>,
}

impl GmmPrior {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(PredictorError::InvalidPrior("mixture has no components".into()));
        }
        if let Some(c) = components.iter().find(|c| c.weight.is_nan() || c.weight <= 0.0) {
            return Err(PredictorError::InvalidPrior(format!(
                "weight {} not positive",
                c.weight
            )));
        }
        if let Some(c) = components.iter().find(|c| !(c.sigma >= 0.0 && c.sigma.is_finite())) {
            return Err(PredictorError::InvalidPrior(format!("sigma {} invalid", c.sigma)));
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(PredictorError::InvalidPrior(format!("weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Prior {
    Gaussian(GaussianPrior),
    Gmm(GmmPrior),
}

fn alpha_bar_for(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t == 0 {
        return Err(PredictorError::DivisionGuard { t });
    }
    Ok(sched.alpha_bar(t)?)
}

/// `E[x0 | x_t]` under a Gaussian prior at noise level `alpha_bar`.
pub fn gaussian_posterior_mean(x_t: &Tensor, alpha_bar: f64, prior: &GaussianPrior) -> Result<Tensor> {
    let mu = prior.mu.render(x_t.shape())?;
    let sa = alpha_bar.sqrt();
    let s2 = prior.sigma0 * prior.sigma0;
    let gain = sa * s2 / (alpha_bar * s2 + 1.0 - alpha_bar);
    Ok(x_t.zip_map(&mu, "gaussian_posterior_mean", |x, m| {
        let m = m as f64;
        (m + gain * (x as f64 - sa * m)) as f32
    })?)
}

fn eps_from_posterior_mean(x_t: &Tensor, mean: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    let sa = alpha_bar.sqrt();
    let sb = (1.0 - alpha_bar).sqrt();
    Ok(x_t.zip_map(mean, "eps_from_mean", |x, m| ((x as f64 - sa * m as f64) / sb) as f32)?)
}

/// Exact ε prediction under a Gaussian prior.
pub fn analytic_gaussian_eps(x_t: &Tensor, t: usize, prior: &GaussianPrior, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = alpha_bar_for(t, sched)?;
    gaussian_eps_at(x_t, ab, prior)
}

fn gaussian_eps_at(x_t: &Tensor, alpha_bar: f64, prior: &GaussianPrior) -> Result<Tensor> {
    if alpha_bar >= SIGNAL_DOMINANT_LIMIT {
        return Ok(Tensor::zeros(x_t.shape()));
    }
    let mean = gaussian_posterior_mean(x_t, alpha_bar, prior)?;
    eps_from_posterior_mean(x_t, &mean, alpha_bar)
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Exact ε prediction under a Gaussian mixture, with the component
/// responsibilities and a per-pixel responsibility heatmap for the dominant
/// component.
pub fn gmm_predict(x_t: &Tensor, alpha_bar: f64, prior: &GmmPrior) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let shape = x_t.shape();
    let heat_shape = Shape::new(1, shape.height, shape.width)?;
    let k = prior.components.len();
    if alpha_bar >= SIGNAL_DOMINANT_LIMIT {
        let w: Vec<f64> = prior.components.iter().map(|c| c.weight).collect();
        return Ok((Tensor::zeros(shape), w, Tensor::ones(heat_shape)));
    }
    let sa = alpha_bar.sqrt();
    let x = x_t.data();
    let dim = x.len() as f64;
    let means: Vec<Tensor> = prior
        .components
        .iter()
        .map(|c| c.mu.render(shape))
        .collect::<Result<_>>()?;
    let vars: Vec<f64> = prior
        .components
        .iter()
        .map(|c| alpha_bar * c.sigma * c.sigma + 1.0 - alpha_bar)
        .collect();

    // Squared residuals per component, kept per element for the heatmap.
    let resid: Vec<Vec<f64>> = means
        .iter()
        .map(|m| {
            x.iter()
                .zip(m.data())
                .map(|(&xv, &mv)| {
                    let d = xv as f64 - sa * mv as f64;
                    d * d
                })
                .collect()
        })
        .collect();

    let log_lik: Vec<f64> = (0..k)
        .map(|j| {
            let sq: f64 = resid[j].iter().sum();
            prior.components[j].weight.ln() - 0.5 * sq / vars[j] - 0.5 * dim * vars[j].ln()
        })
        .collect();
    let norm = log_sum_exp(&log_lik);
    let resp: Vec<f64> = log_lik.iter().map(|l| (l - norm).exp()).collect();

    let mut mean = vec![0.0f64; x.len()];
    for j in 0..k {
        let s2 = prior.components[j].sigma.powi(2);
        let gain = sa * s2 / vars[j];
        let mu = means[j].data();
        for (i, m) in mean.iter_mut().enumerate() {
            let mv = mu[i] as f64;
            *m += resp[j] * (mv + gain * (x[i] as f64 - sa * mv));
        }
    }
    let sb = (1.0 - alpha_bar).sqrt();
    let eps: Vec<f32> = x
        .iter()
        .zip(&mean)
        .map(|(&xv, &m)| ((xv as f64 - sa * m) / sb) as f32)
        .collect();

    let dominant = (0..k).max_by(|&a, &b| resp[a].total_cmp(&resp[b])).unwrap_or(0);
    let plane = shape.plane();
    let channels = shape.channels as f64;
    let mut heat = Vec::with_capacity(plane);
    let mut local = vec![0.0f64; k];
    for p in 0..plane {
        for (j, l) in local.iter_mut().enumerate() {
            let sq: f64 = (0..shape.channels).map(|c| resid[j][c * plane + p]).sum();
            *l = prior.components[j].weight.ln() - 0.5 * sq / vars[j] - 0.5 * channels * vars[j].ln();
        }
        let z = log_sum_exp(&local);
        heat.push((local[dominant] - z).exp() as f32);
    }

    Ok((Tensor::from_vec(shape, eps)?, resp, Tensor::from_vec(heat_shape, heat)?))
}

impl Prior {
    fn predict(&self, x_t: &Tensor, alpha_bar: f64) -> Result<PredictOutput> {
        match self {
            Prior::Gaussian(g) => {
                let eps = gaussian_eps_at(x_t, alpha_bar, g)?;
                let att = Tensor::ones(Shape::new(1, x_t.shape().height, x_t.shape().width)?);
                PredictOutput::new(eps, Some(att))
            }
            Prior::Gmm(g) => {
                let (eps, _, heat) = gmm_predict(x_t, alpha_bar, g)?;
                PredictOutput::new(eps, Some(heat))
            }
        }
    }
}

/// Closed-form predictor. The condition token selects which prior is used;
/// the unconditional prior answers `Condition::none()`.
#[derive(Debug, Clone)]
pub struct AnalyticPredictor {
    sched: Arc<NoiseSchedule>,
    unconditional: Prior,
    conditional: BTreeMap<String, Prior>,
}

impl AnalyticPredictor {
    pub fn new(sched: Arc<NoiseSchedule>, unconditional: Prior) -> Self {
        Self {
            sched,
            unconditional,
            conditional: BTreeMap::new(),
        }
    }

    pub fn with_condition(mut self, token: impl Into<String>, prior: Prior) -> Self {
        self.conditional.insert(token.into(), prior);
        self
    }

    pub fn prior_for(&self, cond: &Condition) -> Result<&Prior> {
        match cond.as_str() {
            None => Ok(&self.unconditional),
            Some(tok) => self
                .conditional
                .get(tok)
                .ok_or_else(|| PredictorError::UnknownCondition(tok.to_string())),
        }
    }
}

impl NoisePredictor for AnalyticPredictor {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Condition) -> Result<PredictOutput> {
        let ab = alpha_bar_for(t, &self.sched)?;
        self.prior_for(cond)?.predict(x_t, ab)
    }

    fn name(&self) -> String {
        match &self.unconditional {
            Prior::Gaussian(_) => "analytic-gaussian".into(),
            Prior::Gmm(_) => "analytic-gmm".into(),
        }
    }
}
