//! Quantitative checks on sampled latents.
//!
//! Variances use the population (divide by `n`) convention throughout.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::denoiser::GaussianPrior;
use crate::patching::{spatial_layout, PatchError, PatchMode, PatchSet};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need at least {needed} inputs, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("metric {0} is not finite")]
    NonFinite(String),
    #[error("structure disagreement needs interleaved patches")]
    WrongMode,
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("prior mean: {0}")]
    Prior(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub baseline: Option<f64>,
    pub pass: Option<bool>,
}

impl MetricReport {
    pub fn new(name: impl Into<String>, value: f64) -> Result<Self> {
        let name = name.into();
        if !value.is_finite() {
            return Err(MetricError::NonFinite(name));
        }
        Ok(Self {
            name,
            value,
            baseline: None,
            pass: None,
        })
    }

    pub fn with_baseline(mut self, baseline: f64) -> Self {
        self.baseline = Some(baseline);
        self
    }

    /// Passes when `value <= tolerance`.
    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.pass = Some(self.value <= tolerance);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionCheck {
    /// Max over coordinates of `|mean − mu|`.
    pub mean_error: MetricReport,
    /// Max over coordinates of `|var − σ0²|`.
    pub var_error: MetricReport,
    pub mean_error_avg: f64,
    pub var_error_avg: f64,
    pub mean_var: f64,
}

impl DistributionCheck {
    pub fn passed(&self) -> bool {
        self.mean_error.pass == Some(true) && self.var_error.pass == Some(true)
    }
}

/// Per-coordinate empirical moments of `samples` against a Gaussian prior.
/// Default tolerances: `0.1·σ0` on the mean, `0.1·σ0²` on the variance.
pub fn distribution_check(samples: &[Tensor], target: &GaussianPrior) -> Result<DistributionCheck> {
    if samples.len() < 2 {
        return Err(MetricError::TooFew {
            needed: 2,
            got: samples.len(),
        });
    }
    let shape = samples[0].shape();
    for s in samples {
        s.ensure_same_shape(&samples[0])?;
    }
    let mu = target.mu.render(shape).map_err(|e| MetricError::Prior(e.to_string()))?;
    let n = samples.len() as f64;
    let var0 = target.sigma0 * target.sigma0;
    let (mut mean_max, mut var_max, mut mean_sum, mut var_sum, mut var_total) = (0.0f64, 0.0f64, 0.0, 0.0, 0.0);
    for (i, m) in mu.data().iter().enumerate() {
        let mean = samples.iter().map(|s| s.data()[i] as f64).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.data()[i] as f64 - mean).powi(2)).sum::<f64>() / n;
        let me = (mean - *m as f64).abs();
        let ve = (var - var0).abs();
        mean_max = mean_max.max(me);
        var_max = var_max.max(ve);
        mean_sum += me;
        var_sum += ve;
        var_total += var;
    }
    let d = mu.len() as f64;
    Ok(DistributionCheck {
        mean_error: MetricReport::new("mean_error", mean_max)?.with_tolerance(0.1 * target.sigma0),
        var_error: MetricReport::new("var_error", var_max)?.with_tolerance(0.1 * var0),
        mean_error_avg: mean_sum / d,
        var_error_avg: var_sum / d,
        mean_var: var_total / d,
    })
}

/// Mean over elements of the variance across patches.
pub fn structure_disagreement_values(patches: &[Tensor]) -> Result<f64> {
    let Some(first) = patches.first() else {
        return Err(MetricError::TooFew { needed: 1, got: 0 });
    };
    for p in patches {
        p.ensure_same_shape(first)?;
    }
    let n = patches.len() as f64;
    let mut total = 0.0f64;
    for i in 0..first.len() {
        let mean = patches.iter().map(|p| p.data()[i] as f64).sum::<f64>() / n;
        total += patches.iter().map(|p| (p.data()[i] as f64 - mean).powi(2)).sum::<f64>() / n;
    }
    Ok(total / first.len() as f64)
}

pub fn structure_disagreement(ps: &PatchSet) -> Result<f64> {
    if !matches!(ps.mode, PatchMode::Interleaved { .. }) {
        return Err(MetricError::WrongMode);
    }
    structure_disagreement_values(&ps.patches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGeometry {
    pub patch_h: usize,
    pub patch_w: usize,
    pub overlap: usize,
}

fn boundaries(offsets: impl Iterator<Item = usize>, patch: usize, size: usize) -> Vec<bool> {
    let mut b = vec![false; size];
    for o in offsets {
        for edge in [o, o + patch] {
            if edge > 0 && edge < size {
                b[edge] = true;
            }
        }
    }
    b
}

/// Ratio of the mean `|Δ|` across tile seams to what the same pairs would
/// show at the interior mean `|Δ|` of their orientation. Returns 1 when both
/// are zero or there is no seam, `+∞` when only the interior is flat.
pub fn seam_discontinuity(hr: &Tensor, geometry: &TileGeometry) -> Result<f64> {
    let shape = hr.shape();
    let (h, w) = (shape.height, shape.width);
    let offsets = spatial_layout(h, w, geometry.patch_h, geometry.patch_w, geometry.overlap)?;
    let col_b = boundaries(offsets.iter().map(|o| o.1), geometry.patch_w, w);
    let row_b = boundaries(offsets.iter().map(|o| o.0), geometry.patch_h, h);
    let d = hr.data();

    // [horizontal, vertical] sums and counts
    let mut seam = [0.0f64; 2];
    let mut seam_n = [0usize; 2];
    let mut inner = [0.0f64; 2];
    let mut inner_n = [0usize; 2];
    for c in 0..shape.channels {
        for y in 0..h {
            for x in 0..w {
                let v = d[hr.index(c, y, x)] as f64;
                if x + 1 < w {
                    let diff = (d[hr.index(c, y, x + 1)] as f64 - v).abs();
                    if col_b[x + 1] {
                        seam[0] += diff;
                        seam_n[0] += 1;
                    } else {
                        inner[0] += diff;
                        inner_n[0] += 1;
                    }
                }
                if y + 1 < h {
                    let diff = (d[hr.index(c, y + 1, x)] as f64 - v).abs();
                    if row_b[y + 1] {
                        seam[1] += diff;
                        seam_n[1] += 1;
                    } else {
                        inner[1] += diff;
                        inner_n[1] += 1;
                    }
                }
            }
        }
    }
    if seam_n[0] + seam_n[1] == 0 {
        return Ok(1.0);
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let observed = seam[0] + seam[1];
    let expected = seam_n[0] as f64 * mean(inner[0], inner_n[0]) + seam_n[1] as f64 * mean(inner[1], inner_n[1]);
    if expected == 0.0 {
        return Ok(if observed == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(observed / expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::MeanField;
    use crate::patching::interleave_split;
    use crate::rng::SeededRng;
    use crate::tensor::Shape;
    use proptest::prelude::*;

    fn prior(mu: f32, sigma0: f64) -> GaussianPrior {
        GaussianPrior::new(MeanField::Constant(mu), sigma0).unwrap()
    }

    #[test]
    fn exact_samples_have_zero_error() {
        let s = Tensor::full(Shape::new(1, 2, 2).unwrap(), 0.3).unwrap();
        let r = distribution_check(&[s.clone(), s], &prior(0.3, 0.0)).unwrap();
        assert_eq!(r.mean_error.value, 0.0);
        assert_eq!(r.var_error.value, 0.0);
        assert!(r.passed());
    }

    #[test]
    fn direct_prior_samples_pass() {
        let (mu, sigma0) = (1.5f32, 2.0f64);
        let mut rng = SeededRng::new(11);
        let samples: Vec<Tensor> = (0..1000)
            .map(|_| {
                Tensor::randn([1, 1, 4], &mut rng)
                    .unwrap()
                    .map("affine", |v| mu + sigma0 as f32 * v)
                    .unwrap()
            })
            .collect();
        let r = distribution_check(&samples, &prior(mu, sigma0)).unwrap();
        assert!(r.mean_error.value < 0.1 * sigma0, "{r:?}");
        assert!(r.var_error.value < 0.1 * sigma0 * sigma0, "{r:?}");
    }

    #[test]
    fn repeated_sample_fails_variance() {
        let s = Tensor::zeros(Shape::new(1, 1, 3).unwrap());
        let r = distribution_check(&vec![s; 10], &prior(0.0, 3.0)).unwrap();
        assert!((r.var_error.value - 9.0).abs() < 1e-12);
        assert_eq!(r.var_error.pass, Some(false));
        assert!(distribution_check(&[Tensor::zeros(Shape::new(1, 1, 1).unwrap())], &prior(0.0, 1.0)).is_err());
    }

    fn px(v: f32) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, 1).unwrap(), vec![v]).unwrap()
    }

    #[test]
    fn disagreement_examples() {
        assert_eq!(structure_disagreement_values(&[px(0.0), px(2.0)]).unwrap(), 1.0);
        assert_eq!(
            structure_disagreement_values(&[px(0.4), px(0.4), px(0.4)]).unwrap(),
            0.0
        );
        let x = Tensor::randn([2, 4, 4], &mut SeededRng::new(1)).unwrap();
        let ps = interleave_split(&x, 2).unwrap();
        let mut rev = ps.clone();
        rev.patches.reverse();
        let a = structure_disagreement(&ps).unwrap();
        assert!((a - structure_disagreement(&rev).unwrap()).abs() < 1e-12);
        let sp = crate::patching::spatial_split(&x, 2, 2, 0).unwrap();
        assert!(matches!(structure_disagreement(&sp), Err(MetricError::WrongMode)));
    }

    fn field(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        let data = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Tensor::from_vec(Shape::new(1, h, w).unwrap(), data).unwrap()
    }

    #[test]
    fn seam_examples() {
        let g = TileGeometry {
            patch_h: 4,
            patch_w: 4,
            overlap: 1,
        };
        let flat = Tensor::full(Shape::new(2, 10, 10).unwrap(), 3.0).unwrap();
        assert_eq!(seam_discontinuity(&flat, &g).unwrap(), 1.0);

        let ramp = field(10, 10, |y, x| 0.1 * x as f32 + 0.05 * y as f32);
        let r = seam_discontinuity(&ramp, &g).unwrap();
        assert!((r - 1.0).abs() < 1e-5, "{r}");

        let smooth = field(32, 32, |y, x| (0.3 * x as f32).sin() + (0.2 * y as f32).cos());
        let g8 = TileGeometry {
            patch_h: 8,
            patch_w: 8,
            overlap: 2,
        };
        let r = seam_discontinuity(&smooth, &g8).unwrap();
        assert!(r > 0.9 && r < 1.1, "{r}");

        let step = field(8, 8, |_, x| if x >= 4 { 1.0 } else { 0.0 });
        let g4 = TileGeometry {
            patch_h: 4,
            patch_w: 4,
            overlap: 0,
        };
        assert_eq!(seam_discontinuity(&step, &g4).unwrap(), f64::INFINITY);
        let noisy_step = field(8, 8, |y, x| {
            (if x >= 4 { 5.0 } else { 0.0 }) + 0.01 * ((x * 7 + y * 3) % 5) as f32
        });
        assert!(seam_discontinuity(&noisy_step, &g4).unwrap() > 10.0);

        let whole = TileGeometry {
            patch_h: 8,
            patch_w: 8,
            overlap: 0,
        };
        assert_eq!(seam_discontinuity(&noisy_step, &whole).unwrap(), 1.0);
        let too_big = TileGeometry {
            patch_h: 9,
            patch_w: 8,
            overlap: 0,
        };
        assert!(seam_discontinuity(&noisy_step, &too_big).is_err());
    }

    proptest! {
        #[test]
        fn disagreement_properties(seed in any::<u64>(), shift in -5.0f32..5.0) {
            let mut rng = SeededRng::new(seed);
            let patches: Vec<Tensor> = (0..4).map(|_| Tensor::randn([2, 3, 3], &mut rng).unwrap()).collect();
            let d = structure_disagreement_values(&patches).unwrap();
            prop_assert!(d > 0.0);
            let shifted: Vec<Tensor> = patches.iter().map(|p| p.map("shift", |v| v + shift).unwrap()).collect();
            let ds = structure_disagreement_values(&shifted).unwrap();
            prop_assert!((d - ds).abs() <= 1e-5 * d.max(1.0));
            let same = vec![patches[0].clone(); 3];
            prop_assert_eq!(structure_disagreement_values(&same).unwrap(), 0.0);
        }

        #[test]
        fn seam_scale_invariant(seed in any::<u64>(), k in 0.01f32..100.0) {
            let x = Tensor::randn([2, 12, 12], &mut SeededRng::new(seed)).unwrap();
            let g = TileGeometry { patch_h: 5, patch_w: 5, overlap: 1 };
            let a = seam_discontinuity(&x, &g).unwrap();
            let b = seam_discontinuity(&x.scale(k).unwrap(), &g).unwrap();
            prop_assert!((a - b).abs() <= 1e-4 * a);
        }
    }
}
