//! Keypoint decoding heads and pooling parameters.
//!
//! Three heads are supported: softmax + DSNT (expected coordinate), softmax +
//! argmax, and the verification-friendly average-pool + argmax head. Pixel
//! coordinates are 1-based throughout the pooling and padding math.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::avg_pool_tensor;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("heatmap is not normalized (sum {sum}, min {min})")]
    Unnormalized { sum: f64, min: f32 },
    #[error("empty heatmap")]
    Empty,
    #[error("invalid pooling parameters: {0}")]
    BadPooling(String),
}

/// Per-axis average pooling parameters. Kernel always equals stride, which
/// keeps pooling patches disjoint so each pixel belongs to exactly one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxisParams {
    pub stride: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl AxisParams {
    pub fn new(stride: usize, padding: usize) -> Result<Self, HeadError> {
        if stride == 0 || stride % 2 == 0 {
            return Err(HeadError::BadPooling(format!("stride {stride} must be odd and >= 1")));
        }
        if padding >= stride {
            return Err(HeadError::BadPooling(format!(
                "padding {padding} must be smaller than kernel {stride}"
            )));
        }
        Ok(Self {
            stride,
            kernel: stride,
            padding,
        })
    }

    /// 1-based center pixel of the 1-based patch index `j`.
    pub fn patch_center(&self, j: usize) -> isize {
        (j as isize - 1) * self.kernel as isize + (self.kernel as isize + 1) / 2
            - self.padding as isize
    }

    /// 1-based patch index containing the 1-based pixel `v`.
    pub fn patch_of(&self, v: usize) -> usize {
        (v + self.padding + self.kernel - 1) / self.kernel
    }

    /// Number of patches over an axis of `dim` pixels.
    pub fn patches(&self, dim: usize) -> usize {
        (dim + self.padding) / self.kernel
    }
}

/// Pooling parameters for one keypoint channel: `h` is the horizontal
/// (column) axis, `v` the vertical (row) axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolingParams {
    pub h: AxisParams,
    pub v: AxisParams,
}

impl PoolingParams {
    pub fn identity() -> Self {
        let ax = AxisParams::new(1, 0).unwrap();
        Self { h: ax, v: ax }
    }
}

/// Single-channel heatmap. `normalized` means entries are non-negative and
/// sum to 1 within 1e-5.
#[derive(Debug, Clone)]
pub struct Heatmap {
    values: Tensor,
    normalized: bool,
}

impl Heatmap {
    /// Wraps an unnormalized `[H, W]` tensor.
    pub fn unnormalized(values: Tensor) -> Result<Self, HeadError> {
        if values.is_empty() || values.shape().len() != 2 {
            return Err(HeadError::Empty);
        }
        Ok(Self {
            values,
            normalized: false,
        })
    }

    /// Wraps a tensor that must already be a probability distribution.
    pub fn normalized(values: Tensor) -> Result<Self, HeadError> {
        if values.is_empty() || values.shape().len() != 2 {
            return Err(HeadError::Empty);
        }
        let sum: f64 = values.data().iter().map(|&v| v as f64).sum();
        let min = values.data().iter().cloned().fold(f32::INFINITY, f32::min);
        if (sum - 1.0).abs() > 1e-5 || min < 0.0 {
            return Err(HeadError::Unnormalized { sum, min });
        }
        Ok(Self {
            values,
            normalized: true,
        })
    }

    /// Sum-normalizes into a probability distribution.
    pub fn normalize(&self) -> Result<Heatmap, HeadError> {
        let sum: f64 = self.values.data().iter().map(|&v| v as f64).sum();
        if sum <= 0.0 {
            return Err(HeadError::Unnormalized {
                sum,
                min: f32::NAN,
            });
        }
        Ok(Heatmap {
            values: self.values.map(|v| (v as f64 / sum) as f32),
            normalized: true,
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// DSNT decode of a normalized heatmap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DsntDecode {
    /// (row, col) in the normalized (-1, 1) frame.
    pub norm: (f64, f64),
    /// Equivalent (row, col) pixel coordinate, 1-based, real-valued.
    pub pixel: (f64, f64),
}

/// Expected-coordinate decode over the fixed coordinate matrices
/// `C_ij = (2j - (n+1)) / n` (columns) and its row analogue.
pub fn dsnt_decode(heatmap: &Heatmap) -> Result<DsntDecode, HeadError> {
    if !heatmap.is_normalized() {
        let sum = heatmap.values.data().iter().map(|&v| v as f64).sum();
        return Err(HeadError::Unnormalized { sum, min: 0.0 });
    }
    let (m, n) = (heatmap.rows(), heatmap.cols());
    let mut row_acc = 0.0f64;
    let mut col_acc = 0.0f64;
    for i in 1..=m {
        let ci = (2.0 * i as f64 - (m as f64 + 1.0)) / m as f64;
        for j in 1..=n {
            let cj = (2.0 * j as f64 - (n as f64 + 1.0)) / n as f64;
            let hv = heatmap.values.data()[(i - 1) * n + (j - 1)] as f64;
            row_acc += hv * ci;
            col_acc += hv * cj;
        }
    }
    // Invert x = (2j - (n+1)) / n to recover the pixel coordinate.
    let pixel_row = (row_acc * m as f64 + m as f64 + 1.0) / 2.0;
    let pixel_col = (col_acc * n as f64 + n as f64 + 1.0) / 2.0;
    Ok(DsntDecode {
        norm: (row_acc, col_acc),
        pixel: (pixel_row, pixel_col),
    })
}

/// DSNT decode of a normalized `rows x cols` distribution held in f64.
/// Identical math to [`dsnt_decode`] without the f32 storage round-off;
/// used where sub-1e-7 coordinate accuracy matters.
pub fn dsnt_decode_f64(values: &[f64], rows: usize, cols: usize) -> DsntDecode {
    assert_eq!(values.len(), rows * cols);
    let (m, n) = (rows, cols);
    let mut row_acc = 0.0f64;
    let mut col_acc = 0.0f64;
    for i in 1..=m {
        let ci = (2.0 * i as f64 - (m as f64 + 1.0)) / m as f64;
        for j in 1..=n {
            let cj = (2.0 * j as f64 - (n as f64 + 1.0)) / n as f64;
            let hv = values[(i - 1) * n + (j - 1)];
            row_acc += hv * ci;
            col_acc += hv * cj;
        }
    }
    DsntDecode {
        norm: (row_acc, col_acc),
        pixel: (
            (row_acc * m as f64 + m as f64 + 1.0) / 2.0,
            (col_acc * n as f64 + n as f64 + 1.0) / 2.0,
        ),
    }
}

/// Coordinate of the maximal entry, 1-based (row, col). Ties break to the
/// lowest row-major flat index.
pub fn argmax_decode(heatmap: &Heatmap) -> Result<(usize, usize), HeadError> {
    let data = heatmap.values.data();
    if data.is_empty() {
        return Err(HeadError::Empty);
    }
    let mut best = 0usize;
    for (i, &v) in data.iter().enumerate() {
        if v > data[best] {
            best = i;
        }
    }
    let n = heatmap.cols();
    Ok((best / n + 1, best % n + 1))
}

/// Average-pools a single heatmap channel with per-keypoint parameters.
pub fn avg_pool(channel: &Heatmap, params: &PoolingParams) -> Result<Heatmap, HeadError> {
    let (m, n) = (channel.rows(), channel.cols());
    if m + params.v.padding < params.v.kernel || n + params.h.padding < params.h.kernel {
        return Err(HeadError::BadPooling(
            "kernel larger than padded input".into(),
        ));
    }
    let pooled = avg_pool_tensor(
        channel.values(),
        [params.v.kernel, params.h.kernel],
        [params.v.stride, params.h.stride],
        [params.v.padding, params.h.padding],
    );
    Heatmap::unnormalized(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Compact, axis-symmetric triangular bump centered at a 1-based pixel.
    /// Support stays inside the map so DSNT symmetry is exact.
    pub fn triangle_bump(m: usize, n: usize, center: (usize, usize), radius: usize) -> Heatmap {
        let mut t = Tensor::zeros(vec![m, n]);
        for i in 1..=m {
            for j in 1..=n {
                let di = (i as isize - center.0 as isize).unsigned_abs();
                let dj = (j as isize - center.1 as isize).unsigned_abs();
                if di <= radius && dj <= radius {
                    let v = (radius + 1 - di) as f32 * (radius + 1 - dj) as f32;
                    t.data_mut()[(i - 1) * n + (j - 1)] = v;
                }
            }
        }
        Heatmap::unnormalized(t).unwrap().normalize().unwrap()
    }

    #[test]
    fn centered_bump_decodes_to_origin() {
        // 9x9 with center (5,5) = ((m+1)/2, (n+1)/2)
        let h = triangle_bump(9, 9, (5, 5), 2);
        let d = dsnt_decode(&h).unwrap();
        assert!(d.norm.0.abs() < 1e-9 && d.norm.1.abs() < 1e-9);
        assert!((d.pixel.0 - 5.0).abs() < 1e-9 && (d.pixel.1 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn shifted_bump_follows_two_c_over_n() {
        // Shift right by c=2 columns on n=9: column coordinate 2c/n = 4/9.
        let h = triangle_bump(9, 9, (5, 7), 2);
        let d = dsnt_decode(&h).unwrap();
        // f32 storage of the normalized bump limits accuracy to ~1e-7.
        assert!((d.norm.1 - 4.0 / 9.0).abs() < 1e-6);
        assert!(d.norm.0.abs() < 1e-6);
    }

    #[test]
    fn uniform_heatmap_decodes_to_origin() {
        let t = Tensor::filled(vec![6, 8], 1.0 / 48.0);
        let h = Heatmap::normalized(t).unwrap();
        let d = dsnt_decode(&h).unwrap();
        assert!(d.norm.0.abs() < 1e-9 && d.norm.1.abs() < 1e-9);
    }

    #[test]
    fn dsnt_rejects_unnormalized() {
        let t = Tensor::filled(vec![3, 3], 1.0);
        let h = Heatmap::unnormalized(t).unwrap();
        assert!(matches!(dsnt_decode(&h), Err(HeadError::Unnormalized { .. })));
    }

    #[test]
    fn argmax_single_peak() {
        let mut t = Tensor::zeros(vec![6, 8]);
        // 1-based (3,5) -> 0-based (2,4)
        t.data_mut()[2 * 8 + 4] = 1.0;
        let h = Heatmap::unnormalized(t).unwrap();
        assert_eq!(argmax_decode(&h).unwrap(), (3, 5));
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_flat_index() {
        let mut t = Tensor::zeros(vec![2, 5]);
        t.data_mut()[4] = 7.0;
        t.data_mut()[9] = 7.0;
        let h = Heatmap::unnormalized(t).unwrap();
        assert_eq!(argmax_decode(&h).unwrap(), (1, 5));
    }

    #[test]
    fn argmax_matches_exhaustive_scan_on_gaussian() {
        let m = 15;
        let mut t = Tensor::zeros(vec![m, m]);
        for i in 1..=m {
            for j in 1..=m {
                let d2 = ((i as f64 - 7.0).powi(2) + (j as f64 - 7.0).powi(2)) / 8.0;
                t.data_mut()[(i - 1) * m + (j - 1)] = (-d2).exp() as f32;
            }
        }
        let h = Heatmap::unnormalized(t).unwrap();
        // Exhaustive-scan oracle.
        let mut best = (0usize, 0usize, f32::NEG_INFINITY);
        for i in 1..=m {
            for j in 1..=m {
                let v = h.values().data()[(i - 1) * m + (j - 1)];
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        assert_eq!(argmax_decode(&h).unwrap(), (best.0, best.1));
        assert_eq!(argmax_decode(&h).unwrap(), (7, 7));
    }

    #[test]
    fn axis_params_reject_even_stride() {
        assert!(AxisParams::new(4, 0).is_err());
        assert!(AxisParams::new(3, 3).is_err());
        assert!(AxisParams::new(3, 2).is_ok());
    }

    #[test]
    fn pooling_is_affine() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let params = PoolingParams {
            h: AxisParams::new(3, 1).unwrap(),
            v: AxisParams::new(5, 2).unwrap(),
        };
        for _ in 0..20 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let data: Vec<f32> = (0..12 * 10).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Heatmap::unnormalized(Tensor::new(vec![12, 10], data).unwrap()).unwrap()
            };
            let (x, y) = (mk(&mut rng), mk(&mut rng));
            let (a, b): (f32, f32) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let combo_data: Vec<f32> = x
                .values()
                .data()
                .iter()
                .zip(y.values().data())
                .map(|(&xv, &yv)| a * xv + b * yv)
                .collect();
            let combo =
                Heatmap::unnormalized(Tensor::new(vec![12, 10], combo_data).unwrap()).unwrap();
            let lhs = avg_pool(&combo, &params).unwrap();
            let px = avg_pool(&x, &params).unwrap();
            let py = avg_pool(&y, &params).unwrap();
            for ((l, xv), yv) in lhs
                .values()
                .data()
                .iter()
                .zip(px.values().data())
                .zip(py.values().data())
            {
                assert!((l - (a * xv + b * yv)).abs() < 1e-5);
            }
        }
    }
}
