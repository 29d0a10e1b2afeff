//! Image perturbation generators for building input hulls. All operate on
//! 8-bit images stored as f32 tensors and saturate at [0, 255].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("region ({row},{col}) size {size} exceeds image {h}x{w}")]
    OutOfBounds {
        row: usize,
        col: usize,
        size: usize,
        h: usize,
        w: usize,
    },
    #[error("patch shape {got:?} incompatible with image {image:?}")]
    PatchShape { got: Vec<usize>, image: Vec<usize> },
    #[error("expected a [C, H, W] image, got {0:?}")]
    NotAnImage(Vec<usize>),
}

/// Semantic perturbation kinds, per-pixel or regional.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `I' = clip(I + b)`.
    Brightness { b: i32 },
    /// `I' = clip(I * (1 + c))`.
    Contrast { c: f64 },
    /// Overwrites a `size x size` square (all channels) with a constant.
    Block {
        row: usize,
        col: usize,
        size: usize,
        value: f32,
    },
    /// Overwrites a region with another image (same channel count).
    Patch {
        row: usize,
        col: usize,
        #[serde(skip)]
        image: Option<Tensor>,
    },
}

fn clip(v: f32) -> f32 {
    v.clamp(0.0, 255.0)
}

fn image_dims(t: &Tensor) -> Result<(usize, usize, usize), PerturbError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(PerturbError::NotAnImage(other.to_vec())),
    }
}

/// Applies one perturbation, saturating pixel values at [0, 255].
pub fn perturb(image: &Tensor, cfg: &Perturbation) -> Result<Tensor, PerturbError> {
    match cfg {
        Perturbation::Brightness { b } => Ok(image.map(|v| clip(v + *b as f32))),
        Perturbation::Contrast { c } => Ok(image.map(|v| clip((v as f64 * (1.0 + c)) as f32))),
        Perturbation::Block {
            row,
            col,
            size,
            value,
        } => {
            let (channels, h, w) = image_dims(image)?;
            if row + size > h || col + size > w {
                return Err(PerturbError::OutOfBounds {
                    row: *row,
                    col: *col,
                    size: *size,
                    h,
                    w,
                });
            }
            let mut out = image.clone();
            for ch in 0..channels {
                for i in *row..row + size {
                    for j in *col..col + size {
                        out.data_mut()[(ch * h + i) * w + j] = clip(*value);
                    }
                }
            }
            Ok(out)
        }
        Perturbation::Patch { row, col, image: patch } => {
            let patch = patch.as_ref().ok_or_else(|| PerturbError::PatchShape {
                got: vec![],
                image: image.shape().to_vec(),
            })?;
            let (channels, h, w) = image_dims(image)?;
            let (pc, ph, pw) = image_dims(patch)?;
            if pc != channels {
                return Err(PerturbError::PatchShape {
                    got: patch.shape().to_vec(),
                    image: image.shape().to_vec(),
                });
            }
            if row + ph > h || col + pw > w {
                return Err(PerturbError::OutOfBounds {
                    row: *row,
                    col: *col,
                    size: ph.max(pw),
                    h,
                    w,
                });
            }
            let mut out = image.clone();
            for ch in 0..channels {
                for i in 0..ph {
                    for j in 0..pw {
                        out.data_mut()[(ch * h + row + i) * w + col + j] =
                            clip(patch.data()[(ch * ph + i) * pw + j]);
                    }
                }
            }
            Ok(out)
        }
    }
}
