//! Computation-graph representation of keypoint detection models.
//!
//! Graphs are loaded from a JSON manifest plus a raw little-endian `f32`
//! weight blob. Shape inference runs at load time, so a successfully loaded
//! graph is guaranteed acyclic and shape-consistent. Forward inference is a
//! pure function of `(graph, input)`.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("cycle detected in graph")]
    Cycle,
    #[error("node {node}: shape mismatch: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node {node}: weight out of range (offset {offset}, len {len}, blob {blob})")]
    WeightOutOfRange {
        node: String,
        offset: usize,
        len: usize,
        blob: usize,
    },
    #[error("node {node}: dangling weight reference ({detail})")]
    DanglingWeight { node: String, detail: String },
    #[error("node {node}: non-finite intermediate value")]
    NonFinite { node: String },
    #[error("input shape mismatch: model expects {expected:?}, got {got:?}")]
    InputShape {
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("node {node}: unsupported operator '{op}'")]
    UnsupportedOp { node: String, op: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Tensor operator kinds supported by the graph.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Output,
    Conv {
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
        bias: bool,
    },
    Relu,
    /// Zero-padded average pooling. `padding` is applied on the top/left
    /// only and the divisor is always the full kernel area, padded zeros
    /// included, which keeps the operator affine.
    AvgPool {
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: [usize; 2],
    },
    Linear {
        out_features: usize,
        bias: bool,
    },
    Flatten,
    /// Selects one channel of a `[C, H, W]` tensor, producing `[H, W]`.
    Split {
        channel: usize,
    },
    /// Concatenates flattened inputs in edge order.
    Concat,
    /// Per-channel spatial softmax (whole tensor for 1-D/2-D inputs).
    Softmax,
    /// Adds a stored constant tensor element-wise.
    BiasAdd,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Output => "output",
            OpKind::Conv { .. } => "conv",
            OpKind::Relu => "relu",
            OpKind::AvgPool { .. } => "avgpool",
            OpKind::Linear { .. } => "linear",
            OpKind::Flatten => "flatten",
            OpKind::Split { .. } => "split",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::BiasAdd => "bias_add",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub weight: Option<Range<usize>>,
}

/// Validated, shape-inferred computation graph.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    nodes: Vec<Node>,
    /// Ordered producer indices per node (edge order defines input order).
    inputs_of: Vec<Vec<usize>>,
    input_node: usize,
    output_node: usize,
    shapes: Vec<Vec<usize>>,
    order: Vec<usize>,
    weights: Vec<f32>,
}

// ---------------------------------------------------------------------------
// Manifest (de)serialization

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub input: ManifestInput,
    pub nodes: Vec<ManifestNode>,
    pub edges: Vec<[String; 2]>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestInput {
    pub shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestNode {
    pub id: String,
    pub op: String,
    #[serde(default)]
    pub attrs: serde_json::Map<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightRef {
    pub offset: usize,
    pub len: usize,
}

fn attr_usize(
    attrs: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    node: &str,
) -> Result<usize, GraphError> {
    attrs
        .get(key)
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .ok_or_else(|| GraphError::Malformed(format!("node {node}: missing attr '{key}'")))
}

fn attr_pair(
    attrs: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    node: &str,
    default: Option<[usize; 2]>,
) -> Result<[usize; 2], GraphError> {
    match attrs.get(key) {
        None => default
            .ok_or_else(|| GraphError::Malformed(format!("node {node}: missing attr '{key}'"))),
        Some(v) => {
            let arr = v
                .as_array()
                .filter(|a| a.len() == 2)
                .ok_or_else(|| GraphError::Malformed(format!("node {node}: attr '{key}'")))?;
            let a = arr[0].as_u64().map(|x| x as usize);
            let b = arr[1].as_u64().map(|x| x as usize);
            match (a, b) {
                (Some(a), Some(b)) => Ok([a, b]),
                _ => Err(GraphError::Malformed(format!("node {node}: attr '{key}'"))),
            }
        }
    }
}

fn parse_op(n: &ManifestNode) -> Result<OpKind, GraphError> {
    let id = n.id.as_str();
    let op = match n.op.as_str() {
        "input" => OpKind::Input,
        "output" => OpKind::Output,
        "relu" => OpKind::Relu,
        "flatten" => OpKind::Flatten,
        "concat" => OpKind::Concat,
        "softmax" => OpKind::Softmax,
        "bias_add" => OpKind::BiasAdd,
        "split" => OpKind::Split {
            channel: attr_usize(&n.attrs, "channel", id)?,
        },
        "conv" => OpKind::Conv {
            out_channels: attr_usize(&n.attrs, "out_channels", id)?,
            kernel: attr_pair(&n.attrs, "kernel", id, None)?,
            stride: attr_pair(&n.attrs, "stride", id, Some([1, 1]))?,
            padding: attr_pair(&n.attrs, "padding", id, Some([0, 0]))?,
            bias: n.attrs.get("bias").and_then(|v| v.as_bool()).unwrap_or(true),
        },
        "avgpool" => OpKind::AvgPool {
            kernel: attr_pair(&n.attrs, "kernel", id, None)?,
            stride: attr_pair(&n.attrs, "stride", id, None)?,
            padding: attr_pair(&n.attrs, "padding", id, Some([0, 0]))?,
        },
        "linear" => OpKind::Linear {
            out_features: attr_usize(&n.attrs, "out_features", id)?,
            bias: n.attrs.get("bias").and_then(|v| v.as_bool()).unwrap_or(true),
        },
        other => {
            return Err(GraphError::UnsupportedOp {
                node: id.to_string(),
                op: other.to_string(),
            })
        }
    };
    Ok(op)
}

fn op_to_manifest(node: &Node) -> ManifestNode {
    let mut attrs = serde_json::Map::new();
    let pair = |a: &[usize; 2]| serde_json::json!([a[0], a[1]]);
    match &node.op {
        OpKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => {
            attrs.insert("out_channels".into(), (*out_channels).into());
            attrs.insert("kernel".into(), pair(kernel));
            attrs.insert("stride".into(), pair(stride));
            attrs.insert("padding".into(), pair(padding));
            attrs.insert("bias".into(), (*bias).into());
        }
        OpKind::AvgPool {
            kernel,
            stride,
            padding,
        } => {
            attrs.insert("kernel".into(), pair(kernel));
            attrs.insert("stride".into(), pair(stride));
            attrs.insert("padding".into(), pair(padding));
        }
        OpKind::Linear { out_features, bias } => {
            attrs.insert("out_features".into(), (*out_features).into());
            attrs.insert("bias".into(), (*bias).into());
        }
        OpKind::Split { channel } => {
            attrs.insert("channel".into(), (*channel).into());
        }
        _ => {}
    }
    ManifestNode {
        id: node.id.clone(),
        op: node.op.name().to_string(),
        attrs,
        weight: node.weight.as_ref().map(|r| WeightRef {
            offset: r.start,
            len: r.end - r.start,
        }),
    }
}

// ---------------------------------------------------------------------------
// Construction and shape inference

impl ModelGraph {
    /// Builds a graph from a parsed manifest and weight blob, running
    /// topological validation and shape inference.
    pub fn from_manifest(manifest: &Manifest, weights: Vec<f32>) -> Result<Self, GraphError> {
        let mut nodes = Vec::with_capacity(manifest.nodes.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, mn) in manifest.nodes.iter().enumerate() {
            if index.insert(mn.id.as_str(), i).is_some() {
                return Err(GraphError::Malformed(format!("duplicate node id {}", mn.id)));
            }
            nodes.push(Node {
                id: mn.id.clone(),
                op: parse_op(mn)?,
                weight: mn.weight.as_ref().map(|w| w.offset..w.offset + w.len),
            });
        }

        let mut inputs_of: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
        for [from, to] in &manifest.edges {
            let f = *index
                .get(from.as_str())
                .ok_or_else(|| GraphError::Malformed(format!("edge from unknown node {from}")))?;
            let t = *index
                .get(to.as_str())
                .ok_or_else(|| GraphError::Malformed(format!("edge to unknown node {to}")))?;
            inputs_of[t].push(f);
        }

        let input_nodes: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, OpKind::Input))
            .map(|(i, _)| i)
            .collect();
        if input_nodes.len() != 1 {
            return Err(GraphError::Malformed(format!(
                "expected exactly one input node, found {}",
                input_nodes.len()
            )));
        }
        if manifest.outputs.len() != 1 {
            return Err(GraphError::Malformed(format!(
                "expected exactly one output id, found {}",
                manifest.outputs.len()
            )));
        }
        let output_node = *index
            .get(manifest.outputs[0].as_str())
            .ok_or_else(|| GraphError::Malformed("unknown output id".into()))?;

        let order = toposort(&nodes, &inputs_of)?;
        let mut graph = ModelGraph {
            nodes,
            inputs_of,
            input_node: input_nodes[0],
            output_node,
            shapes: Vec::new(),
            order,
            weights,
        };
        graph.infer_shapes(&manifest.input.shape)?;
        Ok(graph)
    }

    /// Loads a graph from a JSON manifest and a raw little-endian f32 blob.
    pub fn load(manifest_path: &Path, weights_path: &Path) -> Result<Self, GraphError> {
        let text = std::fs::read_to_string(manifest_path)?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| GraphError::Malformed(e.to_string()))?;
        let bytes = std::fs::read(weights_path)?;
        if bytes.len() % 4 != 0 {
            return Err(GraphError::Malformed(
                "weight blob length is not a multiple of 4".into(),
            ));
        }
        let weights = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_manifest(&manifest, weights)
    }

    /// Serializes back to the manifest format plus weight blob bytes.
    pub fn to_manifest(&self) -> (Manifest, Vec<u8>) {
        let manifest = Manifest {
            input: ManifestInput {
                shape: self.shapes[self.input_node].clone(),
            },
            nodes: self.nodes.iter().map(op_to_manifest).collect(),
            edges: self
                .inputs_of
                .iter()
                .enumerate()
                .flat_map(|(to, froms)| {
                    froms
                        .iter()
                        .map(move |&f| [self.nodes[f].id.clone(), self.nodes[to].id.clone()])
                })
                .collect(),
            outputs: vec![self.nodes[self.output_node].id.clone()],
        };
        let blob = self
            .weights
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .collect();
        (manifest, blob)
    }

    pub fn save(&self, manifest_path: &Path, weights_path: &Path) -> Result<(), GraphError> {
        let (manifest, blob) = self.to_manifest();
        std::fs::write(manifest_path, serde_json::to_string_pretty(&manifest).unwrap())?;
        std::fs::write(weights_path, blob)?;
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn inputs_of(&self, node: usize) -> &[usize] {
        &self.inputs_of[node]
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.shapes[self.input_node]
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.shapes[self.output_node]
    }

    pub fn output_node(&self) -> usize {
        self.output_node
    }

    pub fn shape_of(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn node_weights(&self, node: usize) -> &[f32] {
        let r = self.nodes[node].weight.as_ref().expect("node has weights");
        &self.weights[r.clone()]
    }

    fn weight_slice(&self, i: usize, needed: usize) -> Result<&[f32], GraphError> {
        let node = &self.nodes[i];
        let r = node.weight.as_ref().ok_or_else(|| GraphError::DanglingWeight {
            node: node.id.clone(),
            detail: "operator requires weights but none referenced".into(),
        })?;
        if r.end > self.weights.len() {
            return Err(GraphError::WeightOutOfRange {
                node: node.id.clone(),
                offset: r.start,
                len: r.end - r.start,
                blob: self.weights.len(),
            });
        }
        if r.end - r.start != needed {
            return Err(GraphError::DanglingWeight {
                node: node.id.clone(),
                detail: format!("expected {needed} weight elements, got {}", r.end - r.start),
            });
        }
        Ok(&self.weights[r.clone()])
    }

    fn infer_shapes(&mut self, input_shape: &[usize]) -> Result<(), GraphError> {
        let mut shapes: Vec<Option<Vec<usize>>> = vec![None; self.nodes.len()];
        for &i in &self.order.clone() {
            let node = &self.nodes[i];
            let ins: Vec<Vec<usize>> = self.inputs_of[i]
                .iter()
                .map(|&p| shapes[p].clone().expect("topo order"))
                .collect();
            let mismatch = |detail: String| GraphError::ShapeMismatch {
                node: node.id.clone(),
                detail,
            };
            let arity = |n: usize| -> Result<(), GraphError> {
                if ins.len() != n {
                    Err(mismatch(format!("expected {n} input(s), got {}", ins.len())))
                } else {
                    Ok(())
                }
            };
            let out = match &node.op {
                OpKind::Input => {
                    arity(0)?;
                    input_shape.to_vec()
                }
                OpKind::Output | OpKind::Relu | OpKind::Softmax => {
                    arity(1)?;
                    ins[0].clone()
                }
                OpKind::Flatten => {
                    arity(1)?;
                    vec![ins[0].iter().product()]
                }
                OpKind::Split { channel } => {
                    arity(1)?;
                    if ins[0].len() != 3 || *channel >= ins[0][0] {
                        return Err(mismatch(format!(
                            "split channel {channel} on shape {:?}",
                            ins[0]
                        )));
                    }
                    vec![ins[0][1], ins[0][2]]
                }
                OpKind::Concat => {
                    if ins.is_empty() {
                        return Err(mismatch("concat with no inputs".into()));
                    }
                    vec![ins.iter().map(|s| s.iter().product::<usize>()).sum()]
                }
                OpKind::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    arity(1)?;
                    if ins[0].len() != 3 {
                        return Err(mismatch(format!("conv input shape {:?}", ins[0])));
                    }
                    let (c, h, w) = (ins[0][0], ins[0][1], ins[0][2]);
                    if h + 2 * padding[0] < kernel[0] || w + 2 * padding[1] < kernel[1] {
                        return Err(mismatch("kernel larger than padded input".into()));
                    }
                    let oh = (h + 2 * padding[0] - kernel[0]) / stride[0] + 1;
                    let ow = (w + 2 * padding[1] - kernel[1]) / stride[1] + 1;
                    let needed =
                        out_channels * c * kernel[0] * kernel[1] + if *bias { *out_channels } else { 0 };
                    self.weight_slice(i, needed)?;
                    vec![*out_channels, oh, ow]
                }
                OpKind::AvgPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let shape = {
                        arity(1)?;
                        let (h, w) = match ins[0].len() {
                            2 => (ins[0][0], ins[0][1]),
                            3 => (ins[0][1], ins[0][2]),
                            _ => return Err(mismatch(format!("avgpool input {:?}", ins[0]))),
                        };
                        if padding[0] >= kernel[0] || padding[1] >= kernel[1] {
                            return Err(mismatch("padding must be smaller than kernel".into()));
                        }
                        if h + padding[0] < kernel[0] || w + padding[1] < kernel[1] {
                            return Err(mismatch("kernel larger than padded input".into()));
                        }
                        let oh = (h + padding[0] - kernel[0]) / stride[0] + 1;
                        let ow = (w + padding[1] - kernel[1]) / stride[1] + 1;
                        if ins[0].len() == 3 {
                            vec![ins[0][0], oh, ow]
                        } else {
                            vec![oh, ow]
                        }
                    };
                    shape
                }
                OpKind::Linear { out_features, bias } => {
                    arity(1)?;
                    let n: usize = ins[0].iter().product();
                    let needed = out_features * n + if *bias { *out_features } else { 0 };
                    self.weight_slice(i, needed)?;
                    vec![*out_features]
                }
                OpKind::BiasAdd => {
                    arity(1)?;
                    let n: usize = ins[0].iter().product();
                    self.weight_slice(i, n)?;
                    ins[0].clone()
                }
            };
            shapes[i] = Some(out);
        }
        self.shapes = shapes.into_iter().map(|s| s.expect("all reached")).collect();
        Ok(())
    }

    // -- mutation used by the proxy builder ---------------------------------

    /// Appends a node fed by `producers` (in order); returns its index.
    /// Callers must finish with [`ModelGraph::rebuild`].
    pub(crate) fn push_node(
        &mut self,
        id: String,
        op: OpKind,
        producers: Vec<usize>,
        weights: Option<Vec<f32>>,
    ) -> usize {
        let weight = weights.map(|w| {
            let start = self.weights.len();
            self.weights.extend_from_slice(&w);
            start..start + w.len()
        });
        self.nodes.push(Node { id, op, weight });
        self.inputs_of.push(producers);
        self.nodes.len() - 1
    }

    /// Re-runs topological sort and shape inference after structural edits,
    /// and re-points the graph output to `output_node`.
    pub(crate) fn rebuild(&mut self, output_node: usize) -> Result<(), GraphError> {
        self.output_node = output_node;
        self.order = toposort(&self.nodes, &self.inputs_of)?;
        let input_shape = self.shapes[self.input_node].clone();
        self.infer_shapes(&input_shape)
    }
}

fn toposort(nodes: &[Node], inputs_of: &[Vec<usize>]) -> Result<Vec<usize>, GraphError> {
    let n = nodes.len();
    let mut indeg: Vec<usize> = inputs_of.iter().map(|v| v.len()).collect();
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (to, froms) in inputs_of.iter().enumerate() {
        for &f in froms {
            consumers[f].push(to);
        }
    }
    let mut queue: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = queue.pop() {
        order.push(i);
        for &c in &consumers[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push(c);
            }
        }
    }
    if order.len() != n {
        return Err(GraphError::Cycle);
    }
    // Deterministic order: stable by node index among ready nodes.
    order.sort_by_key(|&i| rank(i, inputs_of));
    // rank() gives a valid topological key because rank(child) > rank(parent).
    Ok(order)
}

// Longest-path depth; memo-free since graphs here are small.
fn rank(i: usize, inputs_of: &[Vec<usize>]) -> usize {
    inputs_of[i]
        .iter()
        .map(|&p| rank(p, inputs_of) + 1)
        .max()
        .unwrap_or(0)
}

// ---------------------------------------------------------------------------
// Forward evaluation

/// Deterministic forward evaluation of the full graph.
pub fn run_graph(model: &ModelGraph, input: &Tensor) -> Result<Tensor, GraphError> {
    if input.shape() != model.input_shape() {
        return Err(GraphError::InputShape {
            expected: model.input_shape().to_vec(),
            got: input.shape().to_vec(),
        });
    }
    let mut values: Vec<Option<Tensor>> = vec![None; model.node_count()];
    for &i in model.topo_order() {
        if i == model.input_node {
            values[i] = Some(input.clone());
            continue;
        }
        let node = &model.nodes[i];
        let ins: Vec<&Tensor> = model.inputs_of[i]
            .iter()
            .map(|&p| values[p].as_ref().expect("topo order"))
            .collect();
        let out = eval_node(model, i, node, &ins)?;
        if out.check_finite().is_err() {
            return Err(GraphError::NonFinite {
                node: node.id.clone(),
            });
        }
        values[i] = Some(out);
    }
    Ok(values[model.output_node].take().expect("output evaluated"))
}

fn eval_node(
    model: &ModelGraph,
    idx: usize,
    node: &Node,
    ins: &[&Tensor],
) -> Result<Tensor, GraphError> {
    Ok(match &node.op {
        OpKind::Input => unreachable!("input node receives the graph input"),
        OpKind::Output => ins[0].clone(),
        OpKind::Relu => ins[0].map(|v| v.max(0.0)),
        OpKind::Flatten => ins[0].reshaped(vec![ins[0].len()]).unwrap(),
        OpKind::Split { channel } => ins[0].channel(*channel),
        OpKind::Concat => {
            let mut data = Vec::new();
            for t in ins {
                data.extend_from_slice(t.data());
            }
            let n = data.len();
            Tensor::new(vec![n], data).unwrap()
        }
        OpKind::Softmax => softmax(ins[0]),
        OpKind::BiasAdd => {
            let w = model.node_weights(idx);
            let mut out = ins[0].clone();
            for (o, b) in out.data_mut().iter_mut().zip(w) {
                *o += b;
            }
            out
        }
        OpKind::Conv {
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => conv2d(ins[0], model.node_weights(idx), *out_channels, *kernel, *stride, *padding, *bias),
        OpKind::AvgPool {
            kernel,
            stride,
            padding,
        } => avg_pool_tensor(ins[0], *kernel, *stride, *padding),
        OpKind::Linear { out_features, bias } => {
            let x = ins[0].data();
            let n = x.len();
            let w = model.node_weights(idx);
            let mut out = vec![0.0f32; *out_features];
            for (o, out_v) in out.iter_mut().enumerate() {
                let row = &w[o * n..(o + 1) * n];
                let mut acc = 0.0f64;
                for (a, b) in row.iter().zip(x) {
                    acc += *a as f64 * *b as f64;
                }
                if *bias {
                    acc += w[out_features * n + o] as f64;
                }
                *out_v = acc as f32;
            }
            Tensor::new(vec![*out_features], out).unwrap()
        }
    })
}

/// Per-channel spatial softmax; whole-tensor softmax for rank < 3.
pub fn softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let chunk = if t.shape().len() == 3 {
        t.shape()[1] * t.shape()[2]
    } else {
        t.len()
    };
    for ch in out.data_mut().chunks_mut(chunk) {
        let max = ch.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f64;
        for v in ch.iter_mut() {
            *v = (*v - max).exp();
            sum += *v as f64;
        }
        for v in ch.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    out
}

/// Zero-padded average pooling with full-kernel divisor.
///
/// Padding applies on the top/left only; the output grid is
/// `floor((dim + pad - kernel) / stride) + 1` so every patch stays inside
/// the padded extent.
pub fn avg_pool_tensor(t: &Tensor, kernel: [usize; 2], stride: [usize; 2], padding: [usize; 2]) -> Tensor {
    let (channels, h, w, rank3) = match t.shape().len() {
        3 => (t.shape()[0], t.shape()[1], t.shape()[2], true),
        2 => (1, t.shape()[0], t.shape()[1], false),
        _ => panic!("avg_pool expects rank 2 or 3"),
    };
    let oh = (h + padding[0] - kernel[0]) / stride[0] + 1;
    let ow = (w + padding[1] - kernel[1]) / stride[1] + 1;
    let divisor = (kernel[0] * kernel[1]) as f64;
    let mut data = vec![0.0f32; channels * oh * ow];
    for c in 0..channels {
        let plane = &t.data()[c * h * w..(c + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for ky in 0..kernel[0] {
                    let y = (oy * stride[0] + ky) as isize - padding[0] as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel[1] {
                        let x = (ox * stride[1] + kx) as isize - padding[1] as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        acc += plane[y as usize * w + x as usize] as f64;
                    }
                }
                data[(c * oh + oy) * ow + ox] = (acc / divisor) as f32;
            }
        }
    }
    let shape = if rank3 { vec![channels, oh, ow] } else { vec![oh, ow] };
    Tensor::new(shape, data).unwrap()
}

fn conv2d(
    input: &Tensor,
    weights: &[f32],
    out_channels: usize,
    kernel: [usize; 2],
    stride: [usize; 2],
    padding: [usize; 2],
    bias: bool,
) -> Tensor {
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = (h + 2 * padding[0] - kernel[0]) / stride[0] + 1;
    let ow = (w + 2 * padding[1] - kernel[1]) / stride[1] + 1;
    let ksz = kernel[0] * kernel[1];
    let mut data = vec![0.0f32; out_channels * oh * ow];
    for oc in 0..out_channels {
        let wbase = oc * c_in * ksz;
        let b = if bias {
            weights[out_channels * c_in * ksz + oc] as f64
        } else {
            0.0
        };
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..c_in {
                    let plane = &input.data()[ic * h * w..(ic + 1) * h * w];
                    let wplane = &weights[wbase + ic * ksz..wbase + (ic + 1) * ksz];
                    for ky in 0..kernel[0] {
                        let y = (oy * stride[0] + ky) as isize - padding[0] as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        for kx in 0..kernel[1] {
                            let x = (ox * stride[1] + kx) as isize - padding[1] as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += wplane[ky * kernel[1] + kx] as f64
                                * plane[y as usize * w + x as usize] as f64;
                        }
                    }
                }
                data[(oc * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![out_channels, oh, ow], data).unwrap()
}
