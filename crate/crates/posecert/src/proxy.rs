//! Proxy-model construction: per-keypoint pooling parameters, the
//! verification-friendly head (split -> avg-pool -> flatten -> concat), and
//! the classification-style output polytope.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, ModelGraph, OpKind};
use crate::heads::{AxisParams, PoolingParams};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("backbone emits {channels} channels but {params} pooling params were given")]
    ChannelMismatch { channels: usize, params: usize },
    #[error("backbone output shape {0:?} is not a [K, H, W] heatmap stack")]
    NotAHeatmapStack(Vec<usize>),
    #[error("keypoint {keypoint}: averaged coordinate {v_bar:?} outside pooled grid {dims:?}")]
    VbarOutOfRange {
        keypoint: usize,
        v_bar: (usize, usize),
        dims: (usize, usize),
    },
    #[error("keypoint coordinate {0} outside heatmap dimension {1}")]
    OutOfImage(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Big-M bound used to void spec rows; far above any pooled float32
/// activation the backbone can produce.
pub const BIG_M: f64 = 1e6;

/// A keypoint after pooling: its original and averaged coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AveragedKeypoint {
    pub keypoint: usize,
    /// Original coordinate (row, col), 1-based pixels.
    pub v: (usize, usize),
    /// Averaged coordinate (row, col), 1-based patch indices.
    pub v_bar: (usize, usize),
    /// Pooled grid (rows, cols).
    pub pooled_dims: (usize, usize),
}

fn axis_params(v: usize, delta: u64, dim: usize) -> AxisParams {
    // Clamp so the aligned patch's trailing edge stays inside the image:
    // the pooled grid drops truncated windows, so v + delta must not pass
    // dim. Shrinking a side keeps the rectangle feasible (conservative).
    let delta = delta.min((dim - v) as u64);
    let s = 2 * delta as usize + 1;
    let k = s;
    let mut r = v % k;
    // Boundary pixels belong to the patch they close, not a new one.
    if r == 0 {
        r = k;
    }
    let p = if r <= (k + 1) / 2 {
        (k + 1) / 2 - r
    } else {
        (3 * k + 1) / 2 - r
    };
    assert!(p < k, "padding {p} >= kernel {k} for v={v}");
    AxisParams {
        stride: s,
        kernel: k,
        padding: p,
    }
}

/// Per-axis pooling parameters that place a patch center exactly on the
/// 1-based keypoint coordinate `v = (row, col)`.
pub fn pooling_params(
    v: (usize, usize),
    deltas: (u64, u64),
    dims: (usize, usize),
) -> Result<PoolingParams, ProxyError> {
    if v.0 == 0 || v.0 > dims.0 {
        return Err(ProxyError::OutOfImage(v.0, dims.0));
    }
    if v.1 == 0 || v.1 > dims.1 {
        return Err(ProxyError::OutOfImage(v.1, dims.1));
    }
    Ok(PoolingParams {
        v: axis_params(v.0, deltas.0, dims.0),
        h: axis_params(v.1, deltas.1, dims.1),
    })
}

/// Averaged ground-truth coordinate of `v` under `params`.
pub fn averaged_keypoint(
    keypoint: usize,
    v: (usize, usize),
    params: &PoolingParams,
    dims: (usize, usize),
) -> AveragedKeypoint {
    let v_bar = (params.v.patch_of(v.0), params.h.patch_of(v.1));
    // The pooling parameters were chosen so a patch center lands on v.
    debug_assert_eq!(params.v.patch_center(v_bar.0), v.0 as isize);
    debug_assert_eq!(params.h.patch_center(v_bar.1), v.1 as isize);
    AveragedKeypoint {
        keypoint,
        v,
        v_bar,
        pooled_dims: (params.v.patches(dims.0), params.h.patches(dims.1)),
    }
}

/// Output-vector segment owned by one keypoint after the proxy head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub keypoint: usize,
    pub offset: usize,
    pub len: usize,
    pub pooled_dims: (usize, usize),
}

/// Appends the verification head to a heatmap backbone: channel split,
/// per-channel average pooling, flatten, and concatenation into one vector.
/// The original backbone nodes are left untouched.
pub fn build_proxy(
    backbone: &ModelGraph,
    params: &[PoolingParams],
) -> Result<(ModelGraph, Vec<Segment>), ProxyError> {
    let out_shape = backbone.output_shape().to_vec();
    if out_shape.len() != 3 {
        return Err(ProxyError::NotAHeatmapStack(out_shape));
    }
    let (channels, h, w) = (out_shape[0], out_shape[1], out_shape[2]);
    if channels != params.len() {
        return Err(ProxyError::ChannelMismatch {
            channels,
            params: params.len(),
        });
    }

    let mut graph = backbone.clone();
    // The heatmap stack is whatever feeds the backbone's output node.
    let heatmap_node = graph.inputs_of(graph.output_node())[0];

    let mut flattens = Vec::with_capacity(channels);
    let mut segments = Vec::with_capacity(channels);
    let mut offset = 0;
    for (k, p) in params.iter().enumerate() {
        let split = graph.push_node(
            format!("pxy_split_{k}"),
            OpKind::Split { channel: k },
            vec![heatmap_node],
            None,
        );
        let pool = graph.push_node(
            format!("pxy_pool_{k}"),
            OpKind::AvgPool {
                kernel: [p.v.kernel, p.h.kernel],
                stride: [p.v.stride, p.h.stride],
                padding: [p.v.padding, p.h.padding],
            },
            vec![split],
            None,
        );
        let flat = graph.push_node(format!("pxy_flat_{k}"), OpKind::Flatten, vec![pool], None);
        flattens.push(flat);
        let pooled_dims = (p.v.patches(h), p.h.patches(w));
        let len = pooled_dims.0 * pooled_dims.1;
        segments.push(Segment {
            keypoint: k,
            offset,
            len,
            pooled_dims,
        });
        offset += len;
    }
    let concat = graph.push_node("pxy_concat".into(), OpKind::Concat, flattens, None);
    let out = graph.push_node("pxy_out".into(), OpKind::Output, vec![concat], None);
    graph.rebuild(out)?;
    debug_assert_eq!(graph.output_shape(), &[offset]);
    Ok((graph, segments))
}

/// One block of the classification-style output specification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpecBlock {
    pub keypoint: usize,
    pub offset: usize,
    pub len: usize,
    /// 0-based flat index of the averaged keypoint within the segment.
    pub v_bar_flat: usize,
    pub skip: bool,
}

/// Block-diagonal output polytope `A y <= b`. Each non-skipped block states
/// that the averaged-keypoint entry is the segment maximum:
/// `y_i - y_vbar <= 0` for `i != vbar`, and the vbar row is voided with
/// big-M. Skipped blocks are `I y <= M 1`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputPolytope {
    pub blocks: Vec<SpecBlock>,
    pub big_m: f64,
    pub output_len: usize,
}

impl OutputPolytope {
    /// Sparse rows of `A y <= b` as (coefficients, bound).
    pub fn rows(&self) -> Vec<(Vec<(usize, f64)>, f64)> {
        let mut rows = Vec::new();
        for blk in &self.blocks {
            for i in 0..blk.len {
                let gi = blk.offset + i;
                if blk.skip {
                    rows.push((vec![(gi, 1.0)], self.big_m));
                } else if i == blk.v_bar_flat {
                    // Diagonal at (v_bar, v_bar) is -1; the row is voided by M.
                    rows.push((vec![(gi, -1.0)], self.big_m));
                } else {
                    rows.push((
                        vec![(gi, 1.0), (blk.offset + blk.v_bar_flat, -1.0)],
                        0.0,
                    ));
                }
            }
        }
        rows
    }

    /// Dense `(A, b)` materialization for small specs.
    pub fn dense(&self) -> (nalgebra::DMatrix<f64>, nalgebra::DVector<f64>) {
        let rows = self.rows();
        let mut a = nalgebra::DMatrix::zeros(rows.len(), self.output_len);
        let mut b = nalgebra::DVector::zeros(rows.len());
        for (i, (coefs, bound)) in rows.iter().enumerate() {
            for &(j, c) in coefs {
                a[(i, j)] = c;
            }
            b[i] = *bound;
        }
        (a, b)
    }

    /// Exact satisfaction check of `A y <= b`.
    pub fn satisfied(&self, y: &[f64]) -> bool {
        self.rows().iter().all(|(coefs, bound)| {
            coefs.iter().map(|&(j, c)| c * y[j]).sum::<f64>() <= *bound
        })
    }

    /// Index of the first violated row, if any.
    pub fn first_violation(&self, y: &[f64]) -> Option<usize> {
        self.rows()
            .iter()
            .position(|(coefs, bound)| coefs.iter().map(|&(j, c)| c * y[j]).sum::<f64>() > *bound)
    }
}

/// Builds the output polytope for the proxy segments.
pub fn output_spec(
    avgd: &[AveragedKeypoint],
    segments: &[Segment],
    skip: &HashSet<usize>,
) -> Result<OutputPolytope, ProxyError> {
    assert_eq!(avgd.len(), segments.len());
    let mut blocks = Vec::with_capacity(segments.len());
    let mut output_len = 0;
    for (a, s) in avgd.iter().zip(segments) {
        let (rows, cols) = s.pooled_dims;
        if a.v_bar.0 == 0 || a.v_bar.0 > rows || a.v_bar.1 == 0 || a.v_bar.1 > cols {
            return Err(ProxyError::VbarOutOfRange {
                keypoint: a.keypoint,
                v_bar: a.v_bar,
                dims: s.pooled_dims,
            });
        }
        blocks.push(SpecBlock {
            keypoint: a.keypoint,
            offset: s.offset,
            len: s.len,
            v_bar_flat: (a.v_bar.0 - 1) * cols + (a.v_bar.1 - 1),
            skip: skip.contains(&a.keypoint),
        });
        output_len = output_len.max(s.offset + s.len);
    }
    Ok(OutputPolytope {
        blocks,
        big_m: BIG_M,
        output_len,
    })
}

/// Sidecar description of the proxy head for audit.
pub fn sidecar_json(
    params: &[PoolingParams],
    avgd: &[AveragedKeypoint],
    segments: &[Segment],
) -> serde_json::Value {
    let mut map = serde_json::Map::new();
    for ((p, a), s) in params.iter().zip(avgd).zip(segments) {
        map.insert(
            a.keypoint.to_string(),
            serde_json::json!({
                "pool": {
                    "v": {"s": p.v.stride, "k": p.v.kernel, "p": p.v.padding},
                    "h": {"s": p.h.stride, "k": p.h.kernel, "p": p.h.padding},
                },
                "segment": {"offset": s.offset, "len": s.len},
                "v_bar": [a.v_bar.0, a.v_bar.1],
                "pooled_dims": [s.pooled_dims.0, s.pooled_dims.1],
            }),
        );
    }
    serde_json::Value::Object(map)
}
