//! Layered DAG model definition: typed layer nodes over the tensor kernels,
//! with load-time validation that propagates shapes end to end. A graph that
//! validates never raises shape errors during forward or backward passes.

mod forward;
mod io;
mod train;

pub use forward::{forward, forward_batch, ActivationCache};
pub use io::{load_model, load_model_files, save_model, save_model_files, ModelDoc};
pub use train::{
    backward_sgd_step, evaluate, gradients, train, EpochStats, Gradients, TrainConfig,
    TrainHistory, WeightMasks,
};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ConvWeights, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node id `{0}`")]
    DuplicateId(String),
    #[error("node `{node}`: unknown input `{input}` (inputs must precede the node)")]
    UnknownInput { node: String, input: String },
    #[error("node `{node}`: expected {expected} inputs, got {got}")]
    InputArity {
        node: String,
        expected: &'static str,
        got: usize,
    },
    #[error("node `{node}`: {source}")]
    Shape {
        node: String,
        source: TensorError,
    },
    #[error("node `{node}`: concat inputs disagree on spatial extents")]
    ConcatSpatialMismatch { node: String },
    #[error("node `{node}`: dropout rate {rate} outside [0, 1)")]
    DropoutRate { node: String, rate: f64 },
    #[error("expected exactly one softmax sink, found {0}")]
    SoftmaxCount(usize),
    #[error("node `{0}` is unused (only the softmax may be a sink)")]
    DeadEnd(String),
    #[error("softmax `{node}` expects {expected} classes, feeds {got} values")]
    ClassCount {
        node: String,
        expected: usize,
        got: usize,
    },
    #[error("last-hidden tag `{0}` does not name a node")]
    LastHiddenMissing(String),
    #[error("last-hidden tag `{0}` may not be the softmax")]
    LastHiddenIsSoftmax(String),
    #[error("last-hidden `{0}` does not resolve to a conv or dense layer")]
    NoPreDecisionLayer(String),
    #[error("reserved id `input` used as a node id")]
    ReservedId,
    #[error("non-finite loss (learning rate too high?)")]
    NonFiniteLoss,
    #[error("empty dataset (or image/label count mismatch)")]
    EmptyDataset,
    #[error("label {label} outside [0, {classes})")]
    BadLabel { label: u8, classes: usize },
    #[error("model document: {0}")]
    Document(String),
    #[error("weights for node `{0}`: {1}")]
    Weights(String, String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Reference to a producer: the graph input or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeRef {
    Input,
    Node(usize),
}

#[derive(Debug, Clone)]
pub enum LayerOp {
    Conv(ConvWeights),
    Relu,
    MaxPool { k: usize, stride: usize },
    Dense { weight: Tensor, bias: Tensor },
    Dropout { rate: f64 },
    Flatten,
    Concat,
    Softmax,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Conv(_) => LayerKind::Conv,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::MaxPool { .. } => LayerKind::MaxPool,
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Dropout { .. } => LayerKind::Dropout,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::Concat => LayerKind::Concat,
            LayerOp::Softmax => LayerKind::Softmax,
        }
    }

    /// Number of output channels for weight-carrying layers.
    pub fn out_channels(&self) -> Option<usize> {
        match self {
            LayerOp::Conv(w) => Some(w.filters()),
            LayerOp::Dense { weight, .. } => Some(weight.shape()[0]),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Relu,
    MaxPool,
    Dense,
    Dropout,
    Flatten,
    Concat,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct LayerNode {
    pub id: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
}

/// Validated layered DAG. Nodes are stored in topological order; derived
/// lookups (shapes, consumers, resolved inputs) are built once at
/// construction and never drift from the node list.
#[derive(Debug, Clone)]
pub struct NetGraph {
    nodes: Vec<LayerNode>,
    input_shape: Vec<usize>,
    class_count: usize,
    last_hidden: String,
    index: HashMap<String, usize>,
    resolved: Vec<Vec<NodeRef>>,
    shapes: Vec<Vec<usize>>,
    consumers: Vec<Vec<usize>>,
    softmax: usize,
    last_hidden_idx: usize,
}

impl NetGraph {
    pub fn new(
        nodes: Vec<LayerNode>,
        input_shape: Vec<usize>,
        class_count: usize,
        last_hidden: String,
    ) -> Result<Self, GraphError> {
        if input_shape.is_empty() || input_shape.iter().any(|&e| e == 0) {
            return Err(GraphError::Tensor(TensorError::ZeroExtent {
                shape: input_shape,
            }));
        }

        let mut index = HashMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if n.id == "input" {
                return Err(GraphError::ReservedId);
            }
            if index.insert(n.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateId(n.id.clone()));
            }
        }

        let mut resolved = Vec::with_capacity(nodes.len());
        let mut consumers = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            let need_one = !matches!(n.op, LayerOp::Concat);
            if need_one && n.inputs.len() != 1 {
                return Err(GraphError::InputArity {
                    node: n.id.clone(),
                    expected: "1",
                    got: n.inputs.len(),
                });
            }
            if matches!(n.op, LayerOp::Concat) && n.inputs.is_empty() {
                return Err(GraphError::InputArity {
                    node: n.id.clone(),
                    expected: "at least 1",
                    got: 0,
                });
            }
            let mut refs = Vec::with_capacity(n.inputs.len());
            for inp in &n.inputs {
                if inp == "input" {
                    refs.push(NodeRef::Input);
                } else {
                    match index.get(inp) {
                        Some(&j) if j < i => {
                            refs.push(NodeRef::Node(j));
                            consumers[j].push(i);
                        }
                        _ => {
                            return Err(GraphError::UnknownInput {
                                node: n.id.clone(),
                                input: inp.clone(),
                            })
                        }
                    }
                }
            }
            resolved.push(refs);
        }

        // Shape propagation from the input through every node.
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            let in_shape = |r: &NodeRef| -> &[usize] {
                match r {
                    NodeRef::Input => &input_shape,
                    NodeRef::Node(j) => &shapes[*j],
                }
            };
            let shape = match &n.op {
                LayerOp::Conv(w) => {
                    let s = in_shape(&resolved[i][0]);
                    conv_shape(s, w).map_err(|source| GraphError::Shape {
                        node: n.id.clone(),
                        source,
                    })?
                }
                LayerOp::Relu | LayerOp::Dropout { .. } => in_shape(&resolved[i][0]).to_vec(),
                LayerOp::MaxPool { k, stride } => {
                    let s = in_shape(&resolved[i][0]);
                    pool_shape(s, *k, *stride).map_err(|source| GraphError::Shape {
                        node: n.id.clone(),
                        source,
                    })?
                }
                LayerOp::Dense { weight, bias } => {
                    let s = in_shape(&resolved[i][0]);
                    dense_shape(s, weight, bias).map_err(|source| GraphError::Shape {
                        node: n.id.clone(),
                        source,
                    })?
                }
                LayerOp::Flatten => {
                    vec![in_shape(&resolved[i][0]).iter().product()]
                }
                LayerOp::Concat => {
                    let first = in_shape(&resolved[i][0]).to_vec();
                    if first.len() != 3 {
                        return Err(GraphError::Shape {
                            node: n.id.clone(),
                            source: TensorError::Rank {
                                op: "concat",
                                expected: 3,
                                shape: first,
                            },
                        });
                    }
                    let (h, w) = (first[1], first[2]);
                    let mut channels = 0;
                    for r in &resolved[i] {
                        let s = in_shape(r);
                        if s.len() != 3 || s[1] != h || s[2] != w {
                            return Err(GraphError::ConcatSpatialMismatch {
                                node: n.id.clone(),
                            });
                        }
                        channels += s[0];
                    }
                    vec![channels, h, w]
                }
                LayerOp::Softmax => {
                    let s = in_shape(&resolved[i][0]);
                    if s.len() != 1 {
                        return Err(GraphError::Shape {
                            node: n.id.clone(),
                            source: TensorError::Rank {
                                op: "softmax",
                                expected: 1,
                                shape: s.to_vec(),
                            },
                        });
                    }
                    if s[0] != class_count {
                        return Err(GraphError::ClassCount {
                            node: n.id.clone(),
                            expected: class_count,
                            got: s[0],
                        });
                    }
                    s.to_vec()
                }
            };
            if let LayerOp::Dropout { rate } = n.op {
                if !(0.0..1.0).contains(&rate) {
                    return Err(GraphError::DropoutRate {
                        node: n.id.clone(),
                        rate,
                    });
                }
            }
            shapes.push(shape);
        }

        let softmaxes: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, LayerOp::Softmax))
            .map(|(i, _)| i)
            .collect();
        if softmaxes.len() != 1 {
            return Err(GraphError::SoftmaxCount(softmaxes.len()));
        }
        let softmax = softmaxes[0];
        for (i, n) in nodes.iter().enumerate() {
            if consumers[i].is_empty() && i != softmax {
                return Err(GraphError::DeadEnd(n.id.clone()));
            }
        }

        let last_hidden_idx = *index
            .get(&last_hidden)
            .ok_or_else(|| GraphError::LastHiddenMissing(last_hidden.clone()))?;
        if last_hidden_idx == softmax {
            return Err(GraphError::LastHiddenIsSoftmax(last_hidden));
        }

        let g = NetGraph {
            nodes,
            input_shape,
            class_count,
            last_hidden,
            index,
            resolved,
            shapes,
            consumers,
            softmax,
            last_hidden_idx,
        };
        // The tag's channels must trace back to conv/dense filters.
        g.channel_owners(last_hidden_idx)?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    pub fn node(&self, idx: usize) -> &LayerNode {
        &self.nodes[idx]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn last_hidden_id(&self) -> &str {
        &self.last_hidden
    }

    pub fn last_hidden(&self) -> usize {
        self.last_hidden_idx
    }

    /// For each output channel of `idx`, the weight layer and filter index
    /// that produce it, traced back through channel-preserving ops and
    /// group-wise through concatenations.
    pub fn channel_owners(&self, idx: usize) -> Result<Vec<(usize, usize)>, GraphError> {
        let channels = match self.shapes[idx].as_slice() {
            [c, _, _] => *c,
            [d] => *d,
            other => {
                return Err(GraphError::Shape {
                    node: self.nodes[idx].id.clone(),
                    source: TensorError::Rank {
                        op: "channel_owners",
                        expected: 3,
                        shape: other.to_vec(),
                    },
                })
            }
        };
        match &self.nodes[idx].op {
            LayerOp::Conv(_) | LayerOp::Dense { .. } => {
                Ok((0..channels).map(|c| (idx, c)).collect())
            }
            LayerOp::Relu | LayerOp::Dropout { .. } | LayerOp::MaxPool { .. } | LayerOp::Softmax => {
                match self.resolved[idx][0] {
                    NodeRef::Node(j) => self.channel_owners(j),
                    NodeRef::Input => {
                        Err(GraphError::NoPreDecisionLayer(self.nodes[idx].id.clone()))
                    }
                }
            }
            LayerOp::Flatten => match self.resolved[idx][0] {
                NodeRef::Node(j) => {
                    let s = &self.shapes[j];
                    // A flatten only preserves channel identity when the
                    // spatial extent is 1x1 (or the input is already flat).
                    if s.len() == 1 || (s.len() == 3 && s[1] == 1 && s[2] == 1) {
                        self.channel_owners(j)
                    } else {
                        Err(GraphError::NoPreDecisionLayer(self.nodes[idx].id.clone()))
                    }
                }
                NodeRef::Input => Err(GraphError::NoPreDecisionLayer(self.nodes[idx].id.clone())),
            },
            LayerOp::Concat => {
                let mut owners = Vec::with_capacity(channels);
                for r in &self.resolved[idx] {
                    match r {
                        NodeRef::Node(j) => owners.extend(self.channel_owners(*j)?),
                        NodeRef::Input => {
                            return Err(GraphError::NoPreDecisionLayer(
                                self.nodes[idx].id.clone(),
                            ))
                        }
                    }
                }
                Ok(owners)
            }
        }
    }

    pub fn softmax(&self) -> usize {
        self.softmax
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// Output shape of node `idx` as computed at validation time.
    pub fn shape_of(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn shape_of_ref(&self, r: NodeRef) -> &[usize] {
        match r {
            NodeRef::Input => &self.input_shape,
            NodeRef::Node(j) => &self.shapes[j],
        }
    }

    pub fn inputs_of(&self, idx: usize) -> &[NodeRef] {
        &self.resolved[idx]
    }

    pub fn consumers_of(&self, idx: usize) -> &[usize] {
        &self.consumers[idx]
    }

    pub(crate) fn op_mut(&mut self, idx: usize) -> &mut LayerOp {
        &mut self.nodes[idx].op
    }

    /// Nodes from which `idx` is reachable (excluding `idx` itself).
    pub fn ancestors_of(&self, idx: usize) -> Vec<bool> {
        let mut mark = vec![false; self.nodes.len()];
        let mut stack = vec![idx];
        while let Some(i) = stack.pop() {
            for r in &self.resolved[i] {
                if let NodeRef::Node(j) = r {
                    if !mark[*j] {
                        mark[*j] = true;
                        stack.push(*j);
                    }
                }
            }
        }
        mark
    }

    /// Total number of learnable parameters.
    pub fn param_count(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                LayerOp::Conv(w) => (w.kernel.len() + w.bias.len()) as u64,
                LayerOp::Dense { weight, bias } => (weight.len() + bias.len()) as u64,
                _ => 0,
            })
            .sum()
    }
}

fn conv_shape(in_shape: &[usize], w: &ConvWeights) -> Result<Vec<usize>, TensorError> {
    if in_shape.len() != 3 {
        return Err(TensorError::Rank {
            op: "conv",
            expected: 3,
            shape: in_shape.to_vec(),
        });
    }
    if in_shape[0] != w.channels() {
        return Err(TensorError::ChannelMismatch {
            op: "conv",
            expected: w.channels(),
            got: in_shape[0],
        });
    }
    let out = |extent: usize, k: usize| -> Result<usize, TensorError> {
        let padded = extent + 2 * w.pad;
        if padded < k || (padded - k) % w.stride != 0 {
            return Err(TensorError::NonIntegralConvOutput {
                extent,
                kernel: k,
                pad: w.pad,
                stride: w.stride,
            });
        }
        Ok((padded - k) / w.stride + 1)
    };
    Ok(vec![
        w.filters(),
        out(in_shape[1], w.kh())?,
        out(in_shape[2], w.kw())?,
    ])
}

fn pool_shape(in_shape: &[usize], k: usize, stride: usize) -> Result<Vec<usize>, TensorError> {
    if in_shape.len() != 3 {
        return Err(TensorError::Rank {
            op: "maxpool",
            expected: 3,
            shape: in_shape.to_vec(),
        });
    }
    for extent in [in_shape[1], in_shape[2]] {
        if extent < k || (extent - k) % stride != 0 {
            return Err(TensorError::PoolTiling { k, stride, extent });
        }
    }
    Ok(vec![
        in_shape[0],
        (in_shape[1] - k) / stride + 1,
        (in_shape[2] - k) / stride + 1,
    ])
}

fn dense_shape(in_shape: &[usize], weight: &Tensor, bias: &Tensor) -> Result<Vec<usize>, TensorError> {
    if weight.shape().len() != 2 {
        return Err(TensorError::Rank {
            op: "dense weight",
            expected: 2,
            shape: weight.shape().to_vec(),
        });
    }
    if in_shape.len() != 1 {
        return Err(TensorError::Rank {
            op: "dense",
            expected: 1,
            shape: in_shape.to_vec(),
        });
    }
    let (dout, din) = (weight.shape()[0], weight.shape()[1]);
    if in_shape[0] != din {
        return Err(TensorError::LengthMismatch {
            op: "dense",
            expected: din,
            got: in_shape[0],
        });
    }
    if bias.len() != dout {
        return Err(TensorError::LengthMismatch {
            op: "dense bias",
            expected: dout,
            got: bias.len(),
        });
    }
    Ok(vec![dout])
}
