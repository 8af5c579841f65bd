//! Structure guidance between patches.
//!
//! Worker 0's prediction `eps0` steers every other patch's prediction:
//! `eps_i + w·M⊙(eps0 − eps_i)`, with `M` an optional per-pixel mask shared by
//! all channels. In asynchronous mode `eps0` (and `M`) come from the previous
//! iteration's [`GuidanceMessage`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("mask {mask} does not match latent {latent}")]
    MaskShape { mask: Shape, latent: Shape },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("guidance scale must be finite and >= 0, got {0}")]
    InvalidScale(f32),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GuidanceError>;

/// `1 × h × w` heatmap with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    values: Tensor,
}

impl AttentionMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().channels != 1 {
            return Err(GuidanceError::InvalidMask(format!(
                "mask must have one channel, got {}",
                values.shape()
            )));
        }
        if let Some(v) = values.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(GuidanceError::InvalidMask(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::new(Tensor::ones(Shape::new(1, height, width)?))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Tensor::read_asgt(path)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    fn check(&self, latent: Shape) -> Result<()> {
        let s = self.values.shape();
        if s.height != latent.height || s.width != latent.width {
            return Err(GuidanceError::MaskShape { mask: s, latent });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Plain structure guidance.
    Off,
    /// `M ≡ 1`.
    Constant,
    /// Normalized attention heatmap from worker 0's prediction.
    #[default]
    Attention,
    /// Fixed mask loaded from an ASGT file.
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub w: f32,
    pub mask: MaskMode,
    /// Also guide stage-2 tiles with tile 0's prediction.
    pub stage2: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            w: 2.0,
            mask: MaskMode::Attention,
            stage2: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(GuidanceError::InvalidScale(self.w));
        }
        Ok(())
    }
}

/// Worker 0's broadcast for one iteration.
#[derive(Debug, Clone)]
pub struct GuidanceMessage {
    pub iteration: usize,
    pub eps0: Tensor,
    /// `None` means unmasked.
    pub mask: Option<AttentionMask>,
}

pub fn structure_guidance(eps_i: &Tensor, eps0: &Tensor, w: f32) -> Result<Tensor> {
    Ok(eps_i.zip_map(eps0, "structure_guidance", |e, g| e + w * (g - e))?)
}

fn masked_term(eps_i: &Tensor, eps0: &Tensor, w: f32, mask: &AttentionMask) -> Result<Tensor> {
    eps_i.ensure_same_shape(eps0)?;
    mask.check(eps_i.shape())?;
    let m = mask.values.data();
    let plane = eps_i.shape().plane();
    let data = eps_i
        .data()
        .iter()
        .zip(eps0.data())
        .enumerate()
        .map(|(idx, (e, g))| (w * m[idx % plane]) * (g - e))
        .collect();
    Ok(Tensor::from_vec(eps_i.shape(), data)?)
}

/// `eps_i + (w·M)⊙(eps0 − eps_i)`. With `M ≡ 1` this is bitwise equal to
/// [`structure_guidance`].
pub fn masked_structure_guidance(eps_i: &Tensor, eps0: &Tensor, w: f32, mask: &AttentionMask) -> Result<Tensor> {
    let g = masked_term(eps_i, eps0, w, mask)?;
    Ok(eps_i.zip_map(&g, "masked_structure_guidance", |e, g| e + g)?)
}

/// Min-max normalization to `[0, 1]`; a flat heatmap becomes all ones.
pub fn normalize_attention(raw: &Tensor) -> Result<AttentionMask> {
    let d = raw.data();
    if d.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(GuidanceError::InvalidMask(
            "heatmap has negative or non-finite values".into(),
        ));
    }
    let (lo, hi) = d.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(*v), hi.max(*v))
    });
    if hi <= lo {
        return AttentionMask::new(Tensor::ones(raw.shape()));
    }
    let span = hi - lo;
    AttentionMask::new(raw.map("normalize_attention", |v| ((v - lo) / span).clamp(0.0, 1.0))?)
}

/// Guidance term `G = w·M⊙(msg.eps0 − eps_i)`; apply as `eps_i + G`.
pub fn build_async_term(msg: &GuidanceMessage, eps_i: &Tensor, w: f32) -> Result<Tensor> {
    match &msg.mask {
        Some(m) => masked_term(eps_i, &msg.eps0, w, m),
        None => Ok(eps_i.zip_map(&msg.eps0, "build_async_term", |e, g| w * (g - e))?),
    }
}

/// Applies a message to `eps_i`. Identical arithmetic in every mode, so
/// a fresh message reproduces masked guidance bit for bit.
pub fn apply_message(msg: &GuidanceMessage, eps_i: &Tensor, w: f32) -> Result<Tensor> {
    let g = build_async_term(msg, eps_i, w)?;
    Ok(eps_i.zip_map(&g, "apply_guidance", |e, g| e + g)?)
}
