//! Decompositions of a high-resolution latent into base-resolution patches.
//!
//! Stage 1 uses interleaved sub-sampling: with stride `s`, patch `a·s + b`
//! holds every pixel `(a + i·s, b + j·s)`, so each patch is a full-view,
//! low-resolution copy of the canvas. Stage 2 uses overlapping spatial tiles
//! fused by per-pixel averaging.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum PatchError {
    #[error("{dim} = {size} is not divisible by stride {stride}")]
    Divisibility {
        dim: &'static str,
        size: usize,
        stride: usize,
    },
    #[error("tile geometry out of bounds: {0}")]
    Bounds(String),
    #[error("operation needs a {expected} patch set, got {got}")]
    WrongMode { expected: &'static str, got: &'static str },
    #[error("incomplete patch set: expected {expected} patches, got {got}")]
    Incomplete { expected: usize, got: usize },
    #[error("values do not align with the patch layout: {0}")]
    Alignment(String),
    #[error("resolution ratio {target}/{base} is not a positive integer shared by both axes")]
    UpscaleRatio { base: String, target: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PatchError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PatchMode {
    Interleaved {
        stride: usize,
    },
    Spatial {
        patch_h: usize,
        patch_w: usize,
        overlap: usize,
    },
}

impl PatchMode {
    fn name(&self) -> &'static str {
        match self {
            PatchMode::Interleaved { .. } => "interleaved",
            PatchMode::Spatial { .. } => "spatial",
        }
    }
}

/// Per-pixel weighting used when fusing overlapping tiles.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FuseWindow {
    #[default]
    Uniform,
    /// Gaussian bump centred on the tile, std = `sigma · tile side`.
    Gaussian { sigma: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub mode: PatchMode,
    pub patches: Vec<Tensor>,
    /// Interleaved: `(a, b)` phase of each patch. Spatial: top-left corner.
    pub offsets: Vec<(usize, usize)>,
    pub hr_shape: Shape,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Same layout, new patch contents.
    pub fn with_patches(&self, patches: Vec<Tensor>) -> Result<PatchSet> {
        if patches.len() != self.patches.len() {
            return Err(PatchError::Alignment(format!(
                "{} values for {} patches",
                patches.len(),
                self.patches.len()
            )));
        }
        for (new, old) in patches.iter().zip(&self.patches) {
            if new.shape() != old.shape() {
                return Err(PatchError::Alignment(format!(
                    "patch shape {} vs {}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        Ok(PatchSet {
            mode: self.mode,
            patches,
            offsets: self.offsets.clone(),
            hr_shape: self.hr_shape,
        })
    }

    /// Writes `patch_000.asgt`, ... and `manifest.json` into `dir`.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = Vec::with_capacity(self.patches.len());
        for (i, p) in self.patches.iter().enumerate() {
            let name = format!("patch_{i:03}.asgt");
            p.write_asgt(dir.join(&name))?;
            files.push(name);
        }
        let manifest = serde_json::json!({
            "layout": self.mode,
            "hr_shape": self.hr_shape.dims(),
            "offsets": self.offsets,
            "patches": files,
        });
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

/// Integer factor `s` with `target = s · base` on both axes.
pub fn upscale_factor(base_hw: (usize, usize), target_hw: (usize, usize)) -> Result<usize> {
    let err = || PatchError::UpscaleRatio {
        base: format!("{}x{}", base_hw.0, base_hw.1),
        target: format!("{}x{}", target_hw.0, target_hw.1),
    };
    if base_hw.0 == 0 || base_hw.1 == 0 {
        return Err(err());
    }
    if !target_hw.0.is_multiple_of(base_hw.0) || !target_hw.1.is_multiple_of(base_hw.1) {
        return Err(err());
    }
    let (sy, sx) = (target_hw.0 / base_hw.0, target_hw.1 / base_hw.1);
    if sy != sx || sy == 0 {
        return Err(err());
    }
    Ok(sy)
}

pub fn interleave_split(hr: &Tensor, s: usize) -> Result<PatchSet> {
    let shape = hr.shape();
    if s == 0 {
        return Err(PatchError::Divisibility {
            dim: "stride",
            size: 0,
            stride: 0,
        });
    }
    if !shape.height.is_multiple_of(s) {
        return Err(PatchError::Divisibility {
            dim: "height",
            size: shape.height,
            stride: s,
        });
    }
    if !shape.width.is_multiple_of(s) {
        return Err(PatchError::Divisibility {
            dim: "width",
            size: shape.width,
            stride: s,
        });
    }
    let (ph, pw) = (shape.height / s, shape.width / s);
    let pshape = shape.with_spatial(ph, pw)?;
    let src = hr.data();
    let mut patches = Vec::with_capacity(s * s);
    let mut offsets = Vec::with_capacity(s * s);
    for a in 0..s {
        for b in 0..s {
            let mut data = Vec::with_capacity(pshape.len());
            for c in 0..shape.channels {
                for i in 0..ph {
                    let row = hr.index(c, a + i * s, 0);
                    data.extend((0..pw).map(|j| src[row + b + j * s]));
                }
            }
            patches.push(Tensor::from_vec(pshape, data)?);
            offsets.push((a, b));
        }
    }
    Ok(PatchSet {
        mode: PatchMode::Interleaved { stride: s },
        patches,
        offsets,
        hr_shape: shape,
    })
}

pub fn interleave_merge(ps: &PatchSet) -> Result<Tensor> {
    let PatchMode::Interleaved { stride: s } = ps.mode else {
        return Err(PatchError::WrongMode {
            expected: "interleaved",
            got: ps.mode.name(),
        });
    };
    if ps.patches.len() != s * s || ps.offsets.len() != s * s {
        return Err(PatchError::Incomplete {
            expected: s * s,
            got: ps.patches.len(),
        });
    }
    let shape = ps.hr_shape;
    let pshape = shape.with_spatial(shape.height / s, shape.width / s)?;
    let mut out = vec![0.0f32; shape.len()];
    for (p, &(a, b)) in ps.patches.iter().zip(&ps.offsets) {
        if p.shape() != pshape {
            return Err(PatchError::Alignment(format!(
                "patch shape {} vs {}",
                p.shape(),
                pshape
            )));
        }
        let d = p.data();
        for c in 0..shape.channels {
            for i in 0..pshape.height {
                let dst_row = (c * shape.height + a + i * s) * shape.width;
                let src_row = (c * pshape.height + i) * pshape.width;
                for j in 0..pshape.width {
                    out[dst_row + b + j * s] = d[src_row + j];
                }
            }
        }
    }
    Ok(Tensor::from_vec(shape, out)?)
}

/// Tile start positions along one axis of length `size`.
pub fn tile_starts(size: usize, patch: usize, overlap: usize) -> Vec<usize> {
    let stride = patch - overlap;
    let mut starts = Vec::new();
    let mut pos = 0;
    loop {
        if pos + patch >= size {
            let last = size - patch;
            if starts.last() != Some(&last) {
                starts.push(last);
            }
            return starts;
        }
        starts.push(pos);
        pos += stride;
    }
}

/// Row-major tile offsets for an `hr_h × hr_w` canvas.
pub fn spatial_layout(hr_h: usize, hr_w: usize, ph: usize, pw: usize, overlap: usize) -> Result<Vec<(usize, usize)>> {
    if ph == 0 || pw == 0 || ph > hr_h || pw > hr_w {
        return Err(PatchError::Bounds(format!("tile {ph}x{pw} on canvas {hr_h}x{hr_w}")));
    }
    if overlap >= ph.min(pw) {
        return Err(PatchError::Bounds(format!(
            "overlap {overlap} >= tile side {}",
            ph.min(pw)
        )));
    }
    let ys = tile_starts(hr_h, ph, overlap);
    let xs = tile_starts(hr_w, pw, overlap);
    Ok(ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect())
}

pub fn spatial_split(hr: &Tensor, ph: usize, pw: usize, overlap: usize) -> Result<PatchSet> {
    let shape = hr.shape();
    let offsets = spatial_layout(shape.height, shape.width, ph, pw, overlap)?;
    let patches = offsets
        .iter()
        .map(|&(y, x)| hr.crop(y, x, ph, pw))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(PatchSet {
        mode: PatchMode::Spatial {
            patch_h: ph,
            patch_w: pw,
            overlap,
        },
        patches,
        offsets,
        hr_shape: shape,
    })
}

fn window_weights(ph: usize, pw: usize, window: FuseWindow) -> Vec<f32> {
    match window {
        FuseWindow::Uniform => vec![1.0; ph * pw],
        FuseWindow::Gaussian { sigma } => {
            let cy = (ph as f32 - 1.0) / 2.0;
            let cx = (pw as f32 - 1.0) / 2.0;
            let sy = (sigma * ph as f32).max(f32::EPSILON);
            let sx = (sigma * pw as f32).max(f32::EPSILON);
            let mut w = Vec::with_capacity(ph * pw);
            for y in 0..ph {
                for x in 0..pw {
                    let d = ((y as f32 - cy) / sy).powi(2) + ((x as f32 - cx) / sx).powi(2);
                    w.push((-0.5 * d).exp().max(1e-6));
                }
            }
            w
        }
    }
}

/// Uniformly weighted per-pixel average of all tiles covering each pixel.
pub fn spatial_fuse(ps: &PatchSet, values: &[Tensor]) -> Result<Tensor> {
    spatial_fuse_weighted(ps, values, FuseWindow::Uniform)
}

pub fn spatial_fuse_weighted(ps: &PatchSet, values: &[Tensor], window: FuseWindow) -> Result<Tensor> {
    let PatchMode::Spatial { patch_h, patch_w, .. } = ps.mode else {
        return Err(PatchError::WrongMode {
            expected: "spatial",
            got: ps.mode.name(),
        });
    };
    if values.len() != ps.offsets.len() {
        return Err(PatchError::Alignment(format!(
            "{} values for {} tiles",
            values.len(),
            ps.offsets.len()
        )));
    }
    let shape = ps.hr_shape;
    let tshape = shape.with_spatial(patch_h, patch_w)?;
    let weights = window_weights(patch_h, patch_w, window);
    // -0.0 is the additive identity that also preserves signed zeros, so a
    // pixel covered once reproduces its tile value bit for bit.
    let mut acc = vec![-0.0f32; shape.len()];
    let mut wsum = vec![0.0f32; shape.plane()];
    for (v, &(oy, ox)) in values.iter().zip(&ps.offsets) {
        if v.shape() != tshape {
            return Err(PatchError::Alignment(format!("tile shape {} vs {}", v.shape(), tshape)));
        }
        let d = v.data();
        for y in 0..patch_h {
            for x in 0..patch_w {
                let wgt = weights[y * patch_w + x];
                wsum[(oy + y) * shape.width + ox + x] += wgt;
                for c in 0..shape.channels {
                    let src = (c * patch_h + y) * patch_w + x;
                    let dst = (c * shape.height + oy + y) * shape.width + ox + x;
                    acc[dst] += if wgt == 1.0 { d[src] } else { wgt * d[src] };
                }
            }
        }
    }
    let plane = shape.plane();
    for (i, v) in acc.iter_mut().enumerate() {
        let w = wsum[i % plane];
        if w == 0.0 {
            return Err(PatchError::Bounds("canvas pixel not covered by any tile".into()));
        }
        if w != 1.0 {
            *v /= w;
        }
    }
    Ok(Tensor::from_vec(shape, acc)?)
}

/// Randomly permutes, per low-resolution pixel location, which patch holds
/// which of the co-located pixels. All channels of a pixel move together.
pub fn pixel_interaction(ps: &PatchSet, rng: &mut SeededRng) -> Result<PatchSet> {
    if !matches!(ps.mode, PatchMode::Interleaved { .. }) {
        return Err(PatchError::WrongMode {
            expected: "interleaved",
            got: ps.mode.name(),
        });
    }
    let n = ps.patches.len();
    if n <= 1 {
        return Ok(ps.clone());
    }
    let shape = ps.patches[0].shape();
    let plane = shape.plane();
    let mut out: Vec<Vec<f32>> = ps.patches.iter().map(|p| p.data().to_vec()).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    for loc in 0..plane {
        for (i, p) in perm.iter_mut().enumerate() {
            *p = i;
        }
        rng.shuffle(&mut perm);
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..shape.channels {
                out[dst][c * plane + loc] = ps.patches[src].data()[c * plane + loc];
            }
        }
    }
    let patches = out
        .into_iter()
        .map(|d| Tensor::from_vec(shape, d))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    ps.with_patches(patches)
}
