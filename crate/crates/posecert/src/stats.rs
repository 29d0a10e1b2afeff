//! Symmetry statistics for checking heatmaps against the unimodal,
//! axis-symmetric shape assumption. Statistics are computed on the row and
//! column marginals of the normalized heatmap, each treated as a discrete
//! distribution over 1-based pixel indices.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heads::Heatmap;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("degenerate heatmap: marginal mass is zero")]
    Degenerate,
    #[error("heatmap must be normalized")]
    NotNormalized,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AxisStats {
    pub skewness: f64,
    pub mean_minus_median: f64,
    /// Mode read as the argmax index (lowest index on ties).
    pub mean_minus_mode: f64,
    pub iqr: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SymmetryStats {
    pub rows: AxisStats,
    pub cols: AxisStats,
}

/// Smallest index whose CDF reaches `q`.
fn quantile(p: &[f64], q: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if acc >= q - 1e-12 {
            return (i + 1) as f64;
        }
    }
    p.len() as f64
}

fn axis_stats(p: &[f64]) -> Result<AxisStats, StatsError> {
    let mass: f64 = p.iter().sum();
    if mass <= 0.0 {
        return Err(StatsError::Degenerate);
    }
    let p: Vec<f64> = p.iter().map(|v| v / mass).collect();
    let mean: f64 = p.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v).sum();
    let var: f64 = p
        .iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 - mean).powi(2) * v)
        .sum();
    let m3: f64 = p
        .iter()
        .enumerate()
        .map(|(i, v)| ((i + 1) as f64 - mean).powi(3) * v)
        .sum();
    let skewness = if var > 1e-24 { m3 / var.powf(1.5) } else { 0.0 };
    let mode = p
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| (i + 1) as f64)
        .unwrap();
    Ok(AxisStats {
        skewness,
        mean_minus_median: mean - quantile(&p, 0.5),
        mean_minus_mode: mean - mode,
        iqr: quantile(&p, 0.75) - quantile(&p, 0.25),
    })
}

/// Per-axis symmetry statistics of a normalized heatmap's marginals.
pub fn heatmap_symmetry_stats(heatmap: &Heatmap) -> Result<SymmetryStats, StatsError> {
    if !heatmap.is_normalized() {
        return Err(StatsError::NotNormalized);
    }
    let (m, n) = (heatmap.rows(), heatmap.cols());
    let data = heatmap.values().data();
    let mut rows = vec![0.0f64; m];
    let mut cols = vec![0.0f64; n];
    for i in 0..m {
        for j in 0..n {
            let v = data[i * n + j] as f64;
            rows[i] += v;
            cols[j] += v;
        }
    }
    Ok(SymmetryStats {
        rows: axis_stats(&rows)?,
        cols: axis_stats(&cols)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::triangle_bump;

    #[test]
    fn symmetric_triangle_has_zero_asymmetry() {
        let h = triangle_bump(11, 11, (6, 6), 3);
        let s = heatmap_symmetry_stats(&h).unwrap();
        for ax in [s.rows, s.cols] {
            assert!(ax.skewness.abs() < 1e-6);
            assert!(ax.mean_minus_median.abs() < 1e-6);
            assert!(ax.mean_minus_mode.abs() < 1e-6);
        }
    }

    #[test]
    fn two_point_distribution_skews_positive() {
        // 0.7 at index 1, 0.3 at index 10. Direct moment oracle:
        // mean = 0.7*1 + 0.3*10 = 3.7; m3 > 0 since the long tail is right.
        let p = {
            let mut v = vec![0.0f64; 10];
            v[0] = 0.7;
            v[9] = 0.3;
            v
        };
        let s = axis_stats(&p).unwrap();
        let mean = 3.7;
        let var = 0.7 * (1.0 - mean).powi(2) + 0.3 * (10.0 - mean).powi(2);
        let m3 = 0.7 * (1.0 - mean).powi(3) + 0.3 * (10.0 - mean).powi(3);
        assert!((s.skewness - m3 / var.powf(1.5)).abs() < 1e-12);
        assert!(s.skewness > 0.0);
        // median index 1, mode index 1
        assert!((s.mean_minus_median - 2.7).abs() < 1e-12);
        assert!((s.mean_minus_mode - 2.7).abs() < 1e-12);
    }

    #[test]
    fn uniform_iqr_is_half_the_support() {
        let n = 8;
        let p = vec![1.0 / n as f64; n];
        let s = axis_stats(&p).unwrap();
        assert!((s.iqr - n as f64 / 2.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_heatmap_rejected() {
        assert!(matches!(axis_stats(&[0.0, 0.0]), Err(StatsError::Degenerate)));
    }

    #[test]
    fn unnormalized_heatmap_rejected() {
        use crate::tensor::Tensor;
        let h = Heatmap::unnormalized(Tensor::filled(vec![2, 2], 1.0)).unwrap();
        assert!(matches!(
            heatmap_symmetry_stats(&h),
            Err(StatsError::NotNormalized)
        ));
    }
}
