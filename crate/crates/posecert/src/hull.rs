//! Convex-hull input specifications, sound reachability propagation through
//! proxy graphs, branch-and-bound refinement, and attack-based falsification.
//!
//! The reachable set is a `HullStar`: a center tensor plus simplex-constrained
//! generators (one per hull direction, coefficients alpha >= 0 with
//! sum(alpha) <= 1) and box-constrained error generators (coefficients in
//! [-1,1]) introduced by ReLU relaxation. Affine layers act exactly on this
//! representation; over-approximation enters only at unstable ReLUs.

use std::collections::{HashMap, VecDeque};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{run_graph, ModelGraph, OpKind};
use crate::proxy::OutputPolytope;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum HullError {
    #[error("hull vertex {index} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        index: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("seed image is empty")]
    EmptySeed,
    #[error("operator '{0}' has no sound abstract transformer; pass a proxy model")]
    UnsupportedOp(String),
    #[error("branch is a single point and cannot be split")]
    PointBranch,
    #[error("hull shape {got:?} does not match model input {expected:?}")]
    ModelInput { got: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Preprocessing applied to every vertex before storage, so the hull is
/// built over preprocessed images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Preproc {
    Identity,
    /// `x -> x * mul + add`, e.g. 1/255 normalization.
    Scale { mul: f32, add: f32 },
}

impl Preproc {
    pub fn apply(&self, t: &Tensor) -> Tensor {
        match self {
            Preproc::Identity => t.clone(),
            Preproc::Scale { mul, add } => t.map(|v| v * mul + add),
        }
    }
}

/// Convex hull of a seed image and its perturbed variants.
#[derive(Debug, Clone)]
pub struct ImageConvexHull {
    /// `vertices[0]` is the seed; all stored post-preprocessing.
    vertices: Vec<Tensor>,
}

/// Builds a hull from the seed and perturbed images. Exact duplicates of
/// already-stored vertices are deduplicated.
pub fn make_hull(
    seed: &Tensor,
    perturbed: &[Tensor],
    preproc: Preproc,
) -> Result<ImageConvexHull, HullError> {
    if seed.is_empty() {
        return Err(HullError::EmptySeed);
    }
    let mut vertices = vec![preproc.apply(seed)];
    for (i, p) in perturbed.iter().enumerate() {
        if p.shape() != seed.shape() {
            return Err(HullError::ShapeMismatch {
                index: i + 1,
                got: p.shape().to_vec(),
                expected: seed.shape().to_vec(),
            });
        }
        let v = preproc.apply(p);
        if !vertices.iter().any(|q| q.data() == v.data()) {
            vertices.push(v);
        }
    }
    Ok(ImageConvexHull { vertices })
}

impl ImageConvexHull {
    /// Number of generators (vertices beyond the seed).
    pub fn n(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn vertices(&self) -> &[Tensor] {
        &self.vertices
    }

    pub fn shape(&self) -> &[usize] {
        self.vertices[0].shape()
    }

    /// Concrete image at simplex coordinates `alpha` (length `n()`).
    pub fn point(&self, alpha: &[f64]) -> Tensor {
        assert_eq!(alpha.len(), self.n());
        let seed = self.vertices[0].data();
        let mut data: Vec<f64> = seed.iter().map(|&v| v as f64).collect();
        for (a, vert) in alpha.iter().zip(&self.vertices[1..]) {
            for (d, (&v, &s)) in data.iter_mut().zip(vert.data().iter().zip(seed)) {
                *d += a * (v as f64 - s as f64);
            }
        }
        Tensor::new(
            self.shape().to_vec(),
            data.into_iter().map(|v| v as f32).collect(),
        )
        .unwrap()
    }
}

// ---------------------------------------------------------------------------
// HullStar

type Sparse = Vec<(usize, f64)>;

fn sparse_at(e: &Sparse, idx: usize) -> f64 {
    match e.binary_search_by_key(&idx, |&(i, _)| i) {
        Ok(p) => e[p].1,
        Err(_) => 0.0,
    }
}

/// Abstract reachable set: center + simplex generators + error generators.
#[derive(Debug, Clone)]
pub struct HullStar {
    shape: Vec<usize>,
    center: Vec<f64>,
    /// Simplex generators: coefficients alpha_i >= 0, sum <= 1.
    gens: Vec<Vec<f64>>,
    /// Error generators (symbol id, sparse coefficients), coefficients in [-1,1].
    errs: Vec<(usize, Sparse)>,
    next_err_id: usize,
}

impl HullStar {
    /// Star spanned by `center` and the simplex over `others - center`.
    pub fn from_tensors(center: &Tensor, others: &[&Tensor]) -> Self {
        let c: Vec<f64> = center.data().iter().map(|&v| v as f64).collect();
        let gens = others
            .iter()
            .map(|t| {
                t.data()
                    .iter()
                    .zip(center.data())
                    .map(|(&a, &b)| a as f64 - b as f64)
                    .collect()
            })
            .collect();
        HullStar {
            shape: center.shape().to_vec(),
            center: c,
            gens,
            errs: Vec::new(),
            next_err_id: 0,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }

    pub fn generator_count(&self) -> (usize, usize) {
        (self.gens.len(), self.errs.len())
    }

    /// Per-coordinate error-generator index: coord -> [(err slot, coef)].
    fn err_transpose(&self) -> HashMap<usize, Vec<f64>> {
        let mut t: HashMap<usize, Vec<f64>> = HashMap::new();
        for (_, e) in &self.errs {
            for &(k, c) in e {
                t.entry(k).or_default().push(c);
            }
        }
        t
    }

    /// Elementwise lower/upper bounds of the concretization.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len();
        let mut lo = self.center.clone();
        let mut hi = self.center.clone();
        for k in 0..n {
            let (mut gmin, mut gmax) = (0.0f64, 0.0f64);
            for g in &self.gens {
                gmin = gmin.min(g[k]);
                gmax = gmax.max(g[k]);
            }
            lo[k] += gmin;
            hi[k] += gmax;
        }
        for (_, e) in &self.errs {
            for &(k, c) in e {
                lo[k] -= c.abs();
                hi[k] += c.abs();
            }
        }
        (lo, hi)
    }

    /// Upper bound of `a . y` over the set, for a sparse row `a`.
    pub fn support_upper(&self, row: &[(usize, f64)]) -> f64 {
        self.support(row, true)
    }

    /// Lower bound of `a . y` over the set.
    pub fn support_lower(&self, row: &[(usize, f64)]) -> f64 {
        self.support(row, false)
    }

    fn support(&self, row: &[(usize, f64)], upper: bool) -> f64 {
        let mut val: f64 = row.iter().map(|&(k, a)| a * self.center[k]).sum();
        // Simplex part: alpha concentrates on the best single generator or 0.
        let mut best = 0.0f64;
        for g in &self.gens {
            let d: f64 = row.iter().map(|&(k, a)| a * g[k]).sum();
            if upper {
                best = best.max(d);
            } else {
                best = best.min(d);
            }
        }
        val += best;
        // Error part: each symbol contributes |a . e| independently.
        let mut err = 0.0f64;
        for (_, e) in &self.errs {
            let d: f64 = row.iter().map(|&(k, a)| a * sparse_at(e, k)).sum();
            err += d.abs();
        }
        if upper {
            val + err
        } else {
            val - err
        }
    }

    /// Concrete point for given simplex and error coefficients (tests).
    pub fn sample(&self, alpha: &[f64], eps: &[f64]) -> Vec<f64> {
        assert_eq!(alpha.len(), self.gens.len());
        assert_eq!(eps.len(), self.errs.len());
        let mut out = self.center.clone();
        for (a, g) in alpha.iter().zip(&self.gens) {
            for (o, gv) in out.iter_mut().zip(g) {
                *o += a * gv;
            }
        }
        for (e, (_, gen)) in eps.iter().zip(&self.errs) {
            for &(k, c) in gen {
                out[k] += e * c;
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Abstract transformers

fn conv_dense(
    x: &[f64],
    in_shape: &[usize],
    weights: &[f32],
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    bias: bool,
    with_bias: bool,
) -> Vec<f64> {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h + 2 * padding[0] - kernel[0]) / stride[0] + 1;
    let ow = (w + 2 * padding[1] - kernel[1]) / stride[1] + 1;
    let ksz = kernel[0] * kernel[1];
    let mut out = vec![0.0f64; out_channels * oh * ow];
    for oc in 0..out_channels {
        let wbase = oc * c_in * ksz;
        let b = if bias && with_bias {
            weights[out_channels * c_in * ksz + oc] as f64
        } else {
            0.0
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..c_in {
                    let plane = &x[ic * h * w..(ic + 1) * h * w];
                    let wplane = &weights[wbase + ic * ksz..wbase + (ic + 1) * ksz];
                    for ky in 0..kernel[0] {
                        let y = (oy * stride[0] + ky) as isize - padding[0] as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel[1] {
                            let xx = (ox * stride[1] + kx) as isize - padding[1] as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            acc += wplane[ky * kernel[1] + kx] as f64
                                * plane[y as usize * w + xx as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

fn avg_pool_dense(
    x: &[f64],
    in_shape: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Vec<f64> {
    let (channels, h, w) = match in_shape.len() {
        3 => (in_shape[0], in_shape[1], in_shape[2]),
        2 => (1, in_shape[0], in_shape[1]),
        _ => panic!("avg_pool expects rank 2 or 3"),
    };
    let oh = (h + padding[0] - kernel[0]) / stride[0] + 1;
    let ow = (w + padding[1] - kernel[1]) / stride[1] + 1;
    let divisor = (kernel[0] * kernel[1]) as f64;
    let mut out = vec![0.0f64; channels * oh * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..kernel[0] {
                    let y = (oy * stride[0] + ky) as isize - padding[0] as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel[1] {
                        let xx = (ox * stride[1] + kx) as isize - padding[1] as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        acc += plane[y as usize * w + xx as usize];
                    }
                }
                out[(c * oh + oy) * ow + ox] = acc / divisor;
            }
        }
    }
    out
}

/// Scatter variant of `conv_dense` for sparse generators (no bias).
fn conv_sparse(
    x: &Sparse,
    in_shape: &[usize],
    weights: &[f32],
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Sparse {
    let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let oh = (h + 2 * padding[0] - kernel[0]) / stride[0] + 1;
    let ow = (w + 2 * padding[1] - kernel[1]) / stride[1] + 1;
    let ksz = kernel[0] * kernel[1];
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for &(idx, val) in x {
        let ic = idx / (h * w);
        let y = (idx / w) % h;
        let xx = idx % w;
        for ky in 0..kernel[0] {
            let num_y = y as isize + padding[0] as isize - ky as isize;
            if num_y < 0 || num_y as usize % stride[0] != 0 {
                continue;
            }
            let oy = num_y as usize / stride[0];
            if oy >= oh {
                continue;
            }
            for kx in 0..kernel[1] {
                let num_x = xx as isize + padding[1] as isize - kx as isize;
                if num_x < 0 || num_x as usize % stride[1] != 0 {
                    continue;
                }
                let ox = num_x as usize / stride[1];
                if ox >= ow {
                    continue;
                }
                for oc in 0..out_channels {
                    let wv = weights[oc * c_in * ksz + ic * ksz + ky * kernel[1] + kx] as f64;
                    if wv != 0.0 {
                        *acc.entry((oc * oh + oy) * ow + ox).or_insert(0.0) += wv * val;
                    }
                }
            }
        }
    }
    let mut out: Sparse = acc.into_iter().filter(|&(_, v)| v != 0.0).collect();
    out.sort_unstable_by_key(|&(i, _)| i);
    out
}

fn avg_pool_sparse(
    x: &Sparse,
    in_shape: &[usize],
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
) -> Sparse {
    let (h, w, ch_stride) = match in_shape.len() {
        3 => (in_shape[1], in_shape[2], in_shape[1] * in_shape[2]),
        2 => (in_shape[0], in_shape[1], in_shape[0] * in_shape[1]),
        _ => panic!("avg_pool expects rank 2 or 3"),
    };
    let oh = (h + padding[0] - kernel[0]) / stride[0] + 1;
    let ow = (w + padding[1] - kernel[1]) / stride[1] + 1;
    let divisor = (kernel[0] * kernel[1]) as f64;
    let mut acc: HashMap<usize, f64> = HashMap::new();
    for &(idx, val) in x {
        let c = idx / ch_stride;
        let rem = idx % ch_stride;
        let y = rem / w;
        let xx = rem % w;
        for ky in 0..kernel[0] {
            let num_y = y as isize + padding[0] as isize - ky as isize;
            if num_y < 0 || num_y as usize % stride[0] != 0 {
                continue;
            }
            let oy = num_y as usize / stride[0];
            if oy >= oh {
                continue;
            }
            for kx in 0..kernel[1] {
                let num_x = xx as isize + padding[1] as isize - kx as isize;
                if num_x < 0 || num_x as usize % stride[1] != 0 {
                    continue;
                }
                let ox = num_x as usize / stride[1];
                if ox >= ow {
                    continue;
                }
                *acc.entry((c * oh + oy) * ow + ox).or_insert(0.0) += val / divisor;
            }
        }
    }
    let mut out: Sparse = acc.into_iter().filter(|&(_, v)| v != 0.0).collect();
    out.sort_unstable_by_key(|&(i, _)| i);
    out
}

fn linear_dense(x: &[f64], weights: &[f32], out_features: usize, bias: bool, with_bias: bool) -> Vec<f64> {
    let n = x.len();
    (0..out_features)
        .map(|o| {
            let mut acc: f64 = weights[o * n..(o + 1) * n]
                .iter()
                .zip(x)
                .map(|(&w, &v)| w as f64 * v)
                .sum();
            if bias && with_bias {
                acc += weights[out_features * n + o] as f64;
            }
            acc
        })
        .collect()
}

fn linear_sparse(x: &Sparse, in_len: usize, weights: &[f32], out_features: usize) -> Sparse {
    let mut out = vec![0.0f64; out_features];
    for &(j, val) in x {
        for (o, ov) in out.iter_mut().enumerate() {
            *ov += weights[o * in_len + j] as f64 * val;
        }
    }
    out.into_iter()
        .enumerate()
        .filter(|&(_, v)| v != 0.0)
        .collect()
}

fn split_sparse(x: &Sparse, channel: usize, plane: usize) -> Sparse {
    let base = channel * plane;
    x.iter()
        .filter(|&&(i, _)| i >= base && i < base + plane)
        .map(|&(i, v)| (i - base, v))
        .collect()
}

fn apply_affine(
    star: &HullStar,
    op: &OpKind,
    weights: Option<&[f32]>,
    out_shape: &[usize],
) -> HullStar {
    let in_shape = &star.shape;
    let dense = |x: &[f64], with_bias: bool| -> Vec<f64> {
        match op {
            OpKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                bias,
            } => conv_dense(
                x, in_shape, weights.unwrap(), *out_channels, *kernel, *stride, *padding, *bias,
                with_bias,
            ),
            OpKind::AvgPool {
                kernel,
                stride,
                padding,
            } => avg_pool_dense(x, in_shape, *kernel, *stride, *padding),
            OpKind::Linear { out_features, bias } => {
                linear_dense(x, weights.unwrap(), *out_features, *bias, with_bias)
            }
            OpKind::Flatten | OpKind::Output => x.to_vec(),
            OpKind::Split { channel } => {
                let plane = in_shape[1] * in_shape[2];
                x[channel * plane..(channel + 1) * plane].to_vec()
            }
            OpKind::BiasAdd => {
                let mut out = x.to_vec();
                if with_bias {
                    for (o, &b) in out.iter_mut().zip(weights.unwrap()) {
                        *o += b as f64;
                    }
                }
                out
            }
            _ => unreachable!("non-affine op"),
        }
    };
    let sparse = |x: &Sparse| -> Sparse {
        match op {
            OpKind::Conv {
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => conv_sparse(x, in_shape, weights.unwrap(), *out_channels, *kernel, *stride, *padding),
            OpKind::AvgPool {
                kernel,
                stride,
                padding,
            } => avg_pool_sparse(x, in_shape, *kernel, *stride, *padding),
            OpKind::Linear { out_features, .. } => {
                linear_sparse(x, star.len(), weights.unwrap(), *out_features)
            }
            OpKind::Flatten | OpKind::Output | OpKind::BiasAdd => x.clone(),
            OpKind::Split { channel } => split_sparse(x, *channel, in_shape[1] * in_shape[2]),
            _ => unreachable!("non-affine op"),
        }
    };
    HullStar {
        shape: out_shape.to_vec(),
        center: dense(&star.center, true),
        gens: star.gens.iter().map(|g| dense(g, false)).collect(),
        errs: star
            .errs
            .iter()
            .map(|(id, e)| (*id, sparse(e)))
            .filter(|(_, e)| !e.is_empty())
            .collect(),
        next_err_id: star.next_err_id,
    }
}

fn apply_relu(star: &HullStar) -> HullStar {
    let (lo, hi) = star.bounds();
    let n = star.len();
    let mut lambda = vec![1.0f64; n];
    let mut shift = vec![0.0f64; n];
    let mut fresh: Vec<(usize, f64)> = Vec::new();
    for k in 0..n {
        let (l, u) = (lo[k], hi[k]);
        if l >= 0.0 {
            // stable active: identity
        } else if u <= 0.0 {
            lambda[k] = 0.0;
        } else {
            // Triangle relaxation: y = lam*x + mu +/- mu with mu = u(-l)/(2(u-l)).
            let lam = u / (u - l);
            let mu = u * (-l) / (2.0 * (u - l));
            lambda[k] = lam;
            shift[k] = mu;
            fresh.push((k, mu));
        }
    }
    let scale = |v: &[f64]| -> Vec<f64> { v.iter().zip(&lambda).map(|(x, l)| x * l).collect() };
    let mut center = scale(&star.center);
    for (c, s) in center.iter_mut().zip(&shift) {
        *c += s;
    }
    let mut errs: Vec<(usize, Sparse)> = star
        .errs
        .iter()
        .map(|(id, e)| {
            (
                *id,
                e.iter()
                    .map(|&(k, c)| (k, c * lambda[k]))
                    .filter(|&(_, c)| c != 0.0)
                    .collect(),
            )
        })
        .filter(|(_, e): &(usize, Sparse)| !e.is_empty())
        .collect();
    let mut next_id = star.next_err_id;
    for (k, mu) in fresh {
        errs.push((next_id, vec![(k, mu)]));
        next_id += 1;
    }
    HullStar {
        shape: star.shape.clone(),
        center,
        gens: star.gens.iter().map(|g| scale(g)).collect(),
        errs,
        next_err_id: next_id,
    }
}

fn apply_concat(stars: &[&HullStar], out_len: usize) -> HullStar {
    let gen_count = stars[0].gens.len();
    for s in stars {
        assert_eq!(s.gens.len(), gen_count, "concat inputs share simplex generators");
    }
    let mut center = Vec::with_capacity(out_len);
    for s in stars {
        center.extend_from_slice(&s.center);
    }
    let gens = (0..gen_count)
        .map(|i| {
            let mut g = Vec::with_capacity(out_len);
            for s in stars {
                g.extend_from_slice(&s.gens[i]);
            }
            g
        })
        .collect();
    // Error symbols are shared across inputs; merge by id with offsets.
    let mut merged: HashMap<usize, Sparse> = HashMap::new();
    let mut offset = 0;
    let mut next_id = 0;
    for s in stars {
        for (id, e) in &s.errs {
            let entry = merged.entry(*id).or_default();
            entry.extend(e.iter().map(|&(k, c)| (k + offset, c)));
        }
        offset += s.center.len();
        next_id = next_id.max(s.next_err_id);
    }
    let mut errs: Vec<(usize, Sparse)> = merged.into_iter().collect();
    errs.sort_unstable_by_key(|&(id, _)| id);
    for (_, e) in errs.iter_mut() {
        e.sort_unstable_by_key(|&(k, _)| k);
    }
    HullStar {
        shape: vec![out_len],
        center,
        gens,
        errs,
        next_err_id: next_id,
    }
}

/// Sound propagation of a `HullStar` through the proxy graph.
pub fn propagate(model: &ModelGraph, set: &HullStar) -> Result<HullStar, HullError> {
    if set.shape() != model.input_shape() {
        return Err(HullError::ModelInput {
            got: set.shape().to_vec(),
            expected: model.input_shape().to_vec(),
        });
    }
    let mut values: Vec<Option<HullStar>> = vec![None; model.node_count()];
    let out_idx = model.output_node();
    for &i in model.topo_order() {
        let node = &model.nodes()[i];
        if matches!(node.op, OpKind::Input) {
            values[i] = Some(set.clone());
            continue;
        }
        let ins: Vec<&HullStar> = model
            .inputs_of(i)
            .iter()
            .map(|&p| values[p].as_ref().expect("topo order"))
            .collect();
        let out = match &node.op {
            OpKind::Softmax => {
                return Err(HullError::UnsupportedOp("softmax".into()));
            }
            OpKind::Relu => apply_relu(ins[0]),
            OpKind::Concat => {
                let out_len = model.shape_of(i).iter().product();
                apply_concat(&ins, out_len)
            }
            op @ (OpKind::Conv { .. }
            | OpKind::AvgPool { .. }
            | OpKind::Linear { .. }
            | OpKind::Flatten
            | OpKind::Split { .. }
            | OpKind::BiasAdd
            | OpKind::Output) => {
                let w = node.weight.is_some().then(|| model.node_weights(i));
                apply_affine(ins[0], op, w, model.shape_of(i))
            }
            OpKind::Input => unreachable!(),
        };
        values[i] = Some(out);
    }
    Ok(values[out_idx].take().expect("output evaluated"))
}

// ---------------------------------------------------------------------------
// Inclusion check

#[derive(Debug, Clone, PartialEq)]
pub enum Inclusion {
    Holds,
    /// Some spec row's lower support bound already exceeds its budget;
    /// carries the row index as the violating direction.
    CandidateViolation(usize),
    Unknown,
}

/// Compares the reachable set against the output polytope row by row.
pub fn check_inclusion(set: &HullStar, spec: &OutputPolytope) -> Inclusion {
    assert_eq!(set.len(), spec.output_len, "output dimension matches spec");
    let mut all_hold = true;
    for (i, (row, bound)) in spec.rows().iter().enumerate() {
        if set.support_upper(row) > *bound {
            all_hold = false;
            if set.support_lower(row) > *bound {
                return Inclusion::CandidateViolation(i);
            }
        }
    }
    if all_hold {
        Inclusion::Holds
    } else {
        Inclusion::Unknown
    }
}

// ---------------------------------------------------------------------------
// Branch and bound

/// Sub-simplex of the hull in alpha-space.
#[derive(Debug, Clone)]
pub struct Branch {
    /// Vertices in alpha-coordinates (each of length `hull.n()`).
    pub verts: Vec<Vec<f64>>,
    pub depth: usize,
    pub id: u64,
}

impl Branch {
    /// Root branch covering the whole hull.
    pub fn root(hull: &ImageConvexHull) -> Branch {
        let n = hull.n();
        let mut verts = vec![vec![0.0; n]];
        for i in 0..n {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            verts.push(v);
        }
        Branch {
            verts,
            depth: 0,
            id: 0,
        }
    }

    /// Image-space vertex tensors of this branch.
    pub fn image_vertices(&self, hull: &ImageConvexHull) -> Vec<Tensor> {
        self.verts.iter().map(|a| hull.point(a)).collect()
    }

    /// HullStar concretizing exactly this branch (re-centered at vertex 0).
    pub fn star(&self, hull: &ImageConvexHull) -> HullStar {
        let imgs = self.image_vertices(hull);
        let others: Vec<&Tensor> = imgs[1..].iter().collect();
        HullStar::from_tensors(&imgs[0], &others)
    }

    /// Alpha coordinates of a convex combination of the branch vertices.
    pub fn alpha(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.verts.len());
        let n = self.verts[0].len();
        let mut a = vec![0.0; n];
        for (b, v) in beta.iter().zip(&self.verts) {
            for (ai, vi) in a.iter_mut().zip(v) {
                *ai += b * vi;
            }
        }
        a
    }
}

/// Longest-edge bisection. The edge lengths are measured in image space;
/// ties break toward the lowest vertex-index pair.
pub fn split_branch(
    branch: &Branch,
    hull: &ImageConvexHull,
) -> Result<(Branch, Branch), HullError> {
    let imgs = branch.image_vertices(hull);
    if imgs.len() < 2 {
        return Err(HullError::PointBranch);
    }
    let mut best = (0usize, 1usize);
    let mut best_d = -1.0f64;
    for i in 0..imgs.len() {
        for j in (i + 1)..imgs.len() {
            let d: f64 = imgs[i]
                .data()
                .iter()
                .zip(imgs[j].data())
                .map(|(&a, &b)| {
                    let d = a as f64 - b as f64;
                    d * d
                })
                .sum();
            if d > best_d + 1e-15 {
                best_d = d;
                best = (i, j);
            }
        }
    }
    if best_d <= 0.0 {
        return Err(HullError::PointBranch);
    }
    let (i, j) = best;
    let mid: Vec<f64> = branch.verts[i]
        .iter()
        .zip(&branch.verts[j])
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let mut left = branch.verts.clone();
    left[j] = mid.clone();
    let mut right = branch.verts.clone();
    right[i] = mid;
    Ok((
        Branch {
            verts: left,
            depth: branch.depth + 1,
            id: branch.id * 2 + 1,
        },
        Branch {
            verts: right,
            depth: branch.depth + 1,
            id: branch.id * 2 + 2,
        },
    ))
}

// ---------------------------------------------------------------------------
// Attack (falsification pre-pass)

fn spec_margin(spec_rows: &[(Vec<(usize, f64)>, f64)], y: &[f32]) -> f64 {
    spec_rows
        .iter()
        .map(|(row, b)| row.iter().map(|&(k, a)| a * y[k] as f64).sum::<f64>() - b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Euclidean projection onto the probability simplex {b >= 0, sum b = 1}.
fn project_simplex(b: &mut [f64]) {
    let n = b.len();
    let mut sorted = b.to_vec();
    sorted.sort_by(|a, c| c.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut rho = 0;
    for (i, &v) in sorted.iter().enumerate() {
        acc += v;
        if v - (acc - 1.0) / (i + 1) as f64 > 0.0 {
            rho = i + 1;
        }
    }
    let theta = (sorted[..rho].iter().sum::<f64>() - 1.0) / rho as f64;
    for v in b.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
    let _ = n;
}

fn attack_branch(
    model: &ModelGraph,
    hull: &ImageConvexHull,
    branch: &Branch,
    spec_rows: &[(Vec<(usize, f64)>, f64)],
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let eval = |alpha: &[f64]| -> Option<f64> {
        let x = hull.point(alpha);
        run_graph(model, &x).ok().map(|y| spec_margin(spec_rows, y.data()))
    };
    // Vertex enumeration first: violations often sit at hull corners.
    for v in &branch.verts {
        if eval(v).is_some_and(|m| m > 0.0) {
            return Some(v.clone());
        }
    }
    let m = branch.verts.len();
    if m < 2 || iterations == 0 {
        return None;
    }
    // PGD on the worst spec-row margin over the branch sub-simplex.
    let mut beta = vec![1.0 / m as f64; m];
    for it in 0..iterations {
        let alpha = branch.alpha(&beta);
        let margin = eval(&alpha)?;
        if margin > 0.0 {
            return Some(alpha);
        }
        let h = 1e-3;
        let mut grad = vec![0.0f64; m];
        for (k, g) in grad.iter_mut().enumerate() {
            let mut bp = beta.clone();
            bp[k] += h;
            project_simplex(&mut bp);
            let mp = eval(&branch.alpha(&bp))?;
            *g = (mp - margin) / h;
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let step = 0.3 / (1.0 + it as f64 / 10.0);
        if norm > 1e-12 {
            for (b, g) in beta.iter_mut().zip(&grad) {
                *b += step * g / norm;
            }
        } else {
            // Flat landscape: random restart inside the simplex.
            for b in beta.iter_mut() {
                *b = rng.gen_range(0.0..1.0);
            }
        }
        project_simplex(&mut beta);
    }
    let alpha = branch.alpha(&beta);
    if eval(&alpha).is_some_and(|m| m > 0.0) {
        Some(alpha)
    } else {
        None
    }
}

/// Searches the hull for a concrete input whose exact inference violates the
/// spec; returns the alpha coordinates only if the violation is confirmed.
pub fn attack(
    model: &ModelGraph,
    hull: &ImageConvexHull,
    spec: &OutputPolytope,
    iterations: usize,
    seed: u64,
) -> Option<Vec<f64>> {
    let rows = spec.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    attack_branch(model, hull, &Branch::root(hull), &rows, iterations, &mut rng)
}

// ---------------------------------------------------------------------------
// Branch-and-bound verification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Holds,
    Violated { alpha: Vec<f64> },
    Unknown,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationResult {
    #[serde(flatten)]
    pub status: Status,
    pub branches: usize,
    pub splits: usize,
    pub time_ms: u128,
}

enum BranchOutcome {
    Holds,
    Violated(Vec<f64>),
    Unknown,
}

/// Breadth-first branch-and-bound verification. Each branch is attacked
/// first (cheap falsification), then propagated and checked for inclusion;
/// unknown branches are split until the split budget is exhausted.
/// Deterministic for a fixed seed regardless of worker count.
pub fn verify(
    model: &ModelGraph,
    hull: &ImageConvexHull,
    spec: &OutputPolytope,
    budget: usize,
    seed: u64,
) -> Result<VerificationResult, HullError> {
    let start = Instant::now();
    if hull.shape() != model.input_shape() {
        return Err(HullError::ModelInput {
            got: hull.shape().to_vec(),
            expected: model.input_shape().to_vec(),
        });
    }
    if budget == 0 && hull.n() > 0 {
        return Ok(VerificationResult {
            status: Status::Unknown,
            branches: 0,
            splits: 0,
            time_ms: start.elapsed().as_millis(),
        });
    }
    let rows = spec.rows();
    let mut queue: VecDeque<Branch> = VecDeque::new();
    queue.push_back(Branch::root(hull));
    let mut branches = 0usize;
    let mut splits = 0usize;
    let mut any_unknown = false;

    while !queue.is_empty() {
        let wave: Vec<Branch> = queue.drain(..).collect();
        let outcomes: Vec<BranchOutcome> = wave
            .par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ b.id.wrapping_mul(0x9E3779B97F4A7C15));
                if let Some(alpha) = attack_branch(model, hull, b, &rows, 30, &mut rng) {
                    return BranchOutcome::Violated(alpha);
                }
                let reach = match propagate(model, &b.star(hull)) {
                    Ok(r) => r,
                    Err(_) => return BranchOutcome::Unknown,
                };
                match check_inclusion(&reach, spec) {
                    Inclusion::Holds => BranchOutcome::Holds,
                    // A candidate violation the attack could not confirm is
                    // treated as unknown and refined further.
                    Inclusion::CandidateViolation(_) | Inclusion::Unknown => BranchOutcome::Unknown,
                }
            })
            .collect();
        for (b, outcome) in wave.into_iter().zip(outcomes) {
            branches += 1;
            match outcome {
                BranchOutcome::Holds => {}
                BranchOutcome::Violated(alpha) => {
                    // Self-certifying: re-check under exact inference.
                    let y = run_graph(model, &hull.point(&alpha))?;
                    debug_assert!(spec_margin(&rows, y.data()) > 0.0);
                    return Ok(VerificationResult {
                        status: Status::Violated { alpha },
                        branches,
                        splits,
                        time_ms: start.elapsed().as_millis(),
                    });
                }
                BranchOutcome::Unknown => {
                    if splits < budget {
                        match split_branch(&b, hull) {
                            Ok((l, r)) => {
                                splits += 1;
                                queue.push_back(l);
                                queue.push_back(r);
                            }
                            Err(_) => any_unknown = true,
                        }
                    } else {
                        any_unknown = true;
                    }
                }
            }
        }
    }
    Ok(VerificationResult {
        status: if any_unknown {
            Status::Unknown
        } else {
            Status::Holds
        },
        branches,
        splits,
        time_ms: start.elapsed().as_millis(),
    })
}
