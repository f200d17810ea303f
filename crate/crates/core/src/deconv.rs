//! Cross-layer utility tracing. The activations of the selected last-hidden
//! neurons are flowed backwards through the graph — unpooling with the
//! cached switches, rectification where a ReLU stands, transposed
//! convolution, dense layers as their 1x1-conv view, and channel splits
//! group-wise through concatenations — yielding a reconstruction field for
//! every layer. Fields are averaged over the sample set; a channel's score
//! is the spatial max of its averaged field. Biases never enter the
//! backward trace (the flow is the linear adjoint), and rectification acts
//! on the traced signal itself, not on the forward sign pattern.

use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{forward, ActivationCache, GraphError, LayerOp, NetGraph, NodeRef};
use crate::tensor::{
    conv2d_transpose_into_shape, dense_transpose, rectify, unpool, ConvWeights, Tensor,
    TensorError,
};

#[derive(Debug, Error)]
pub enum DeconvError {
    #[error("empty neuron selection")]
    EmptySeed,
    #[error("selected neuron {neuron} outside the {channels} last-hidden channels")]
    SelectionRange { neuron: usize, channels: usize },
    #[error("node `{0}` has no cached pool switches")]
    MissingSwitches(String),
    #[error("node `{node}`: {source}")]
    Step {
        node: String,
        source: TensorError,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("trace over an empty sample set")]
    NoSamples,
}

/// Options for the trace; `weight_by_score` additionally scales each seeded
/// neuron by a caller-supplied weight (e.g. its discriminant ratio).
#[derive(Debug, Clone, Copy, Default)]
pub struct TraceConfig {
    pub weight_by_score: bool,
}

/// Averaged reconstruction fields per node plus the image-space field, with
/// the seeding selection recorded.
#[derive(Debug, Clone)]
pub struct UtilityMap {
    fields: Vec<Option<Tensor>>,
    input_field: Option<Tensor>,
    selected: Vec<usize>,
    samples: usize,
}

impl UtilityMap {
    /// Averaged field at a node's output, when the node is on the trace.
    pub fn field(&self, idx: usize) -> Option<&Tensor> {
        self.fields.get(idx).and_then(|f| f.as_ref())
    }

    pub fn input_field(&self) -> Option<&Tensor> {
        self.input_field.as_ref()
    }

    pub fn selected_neurons(&self) -> &[usize] {
        &self.selected
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Per-channel utility: the spatial max of the averaged field.
    pub fn channel_scores(&self, idx: usize) -> Option<Vec<f64>> {
        self.field(idx).map(channel_scores_of)
    }
}

/// Spatial max per channel for rank-3 fields; the values themselves for
/// flat fields.
pub fn channel_scores_of(field: &Tensor) -> Vec<f64> {
    match field.shape() {
        [c, h, w] => {
            let hw = h * w;
            (0..*c)
                .map(|ch| {
                    field.data()[ch * hw..(ch + 1) * hw]
                        .iter()
                        .cloned()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect()
        }
        _ => field.data().to_vec(),
    }
}

/// Build the seed field at the tagged layer for one sample: each selected
/// neuron carries its activation value at its firing location (the spatial
/// argmax for conv layers, ties to the lowest linear index), everything
/// else zero.
pub fn seed_utility(
    g: &NetGraph,
    cache: &ActivationCache,
    selected: &[usize],
    weights: Option<&[f64]>,
) -> Result<Tensor, DeconvError> {
    if selected.is_empty() {
        return Err(DeconvError::EmptySeed);
    }
    let act = cache.output(g.last_hidden());
    let mut seed = Tensor::zeros(act.shape());
    match act.shape() {
        [c, h, w] => {
            let hw = h * w;
            for (si, &ch) in selected.iter().enumerate() {
                if ch >= *c {
                    return Err(DeconvError::SelectionRange {
                        neuron: ch,
                        channels: *c,
                    });
                }
                let plane = &act.data()[ch * hw..(ch + 1) * hw];
                let mut best = 0usize;
                for (i, &v) in plane.iter().enumerate() {
                    if v > plane[best] {
                        best = i;
                    }
                }
                let mut v = plane[best];
                if let Some(w) = weights {
                    v *= w[si];
                }
                seed.data_mut()[ch * hw + best] = v;
            }
        }
        shape => {
            let d = shape[0];
            for (si, &j) in selected.iter().enumerate() {
                if j >= d {
                    return Err(DeconvError::SelectionRange {
                        neuron: j,
                        channels: d,
                    });
                }
                let mut v = act.data()[j];
                if let Some(w) = weights {
                    v *= w[si];
                }
                seed.data_mut()[j] = v;
            }
        }
    }
    Ok(seed)
}

/// The 1x1-conv (or full-map conv, for a dense layer fed by flattened
/// feature maps) view of a dense layer's weights: each output neuron
/// becomes one filter over `map_shape`, producing a 1x1 map.
pub fn dense_as_conv(
    weight: &Tensor,
    bias: &Tensor,
    map_shape: &[usize],
) -> Result<ConvWeights, TensorError> {
    let (dout, din) = (weight.shape()[0], weight.shape()[1]);
    let (c, h, w) = match map_shape {
        [c, h, w] => (*c, *h, *w),
        [d] => (*d, 1, 1),
        other => {
            return Err(TensorError::Rank {
                op: "dense_as_conv",
                expected: 3,
                shape: other.to_vec(),
            })
        }
    };
    if c * h * w != din {
        return Err(TensorError::LengthMismatch {
            op: "dense_as_conv",
            expected: din,
            got: c * h * w,
        });
    }
    let kernel = weight.reshape(&[dout, c, h, w])?;
    ConvWeights::new(kernel, bias.clone(), 1, 0)
}

/// One backward trace step through a node: maps a field shaped like the
/// node's output to fields shaped like each of its inputs (one per input;
/// concat splits channel-wise in recorded order).
pub fn deconv_step(
    g: &NetGraph,
    cache: &ActivationCache,
    idx: usize,
    u: &Tensor,
) -> Result<Vec<Tensor>, DeconvError> {
    let node = g.node(idx);
    let wrap = |source| DeconvError::Step {
        node: node.id.clone(),
        source,
    };
    match &node.op {
        LayerOp::Conv(w) => {
            let in_shape = g.shape_of_ref(g.inputs_of(idx)[0]);
            let below = conv2d_transpose_into_shape(u, w, Some((in_shape[1], in_shape[2])))
                .map_err(wrap)?;
            Ok(vec![below])
        }
        LayerOp::Dense { weight, .. } => {
            Ok(vec![dense_transpose(u, weight).map_err(wrap)?])
        }
        LayerOp::Relu => Ok(vec![rectify(u)]),
        LayerOp::MaxPool { .. } => {
            let sw = cache
                .switches(idx)
                .ok_or_else(|| DeconvError::MissingSwitches(node.id.clone()))?;
            let in_shape = g.shape_of_ref(g.inputs_of(idx)[0]);
            Ok(vec![unpool(u, sw, in_shape).map_err(wrap)?])
        }
        LayerOp::Dropout { .. } | LayerOp::Softmax => Ok(vec![u.clone()]),
        LayerOp::Flatten => {
            let in_shape = g.shape_of_ref(g.inputs_of(idx)[0]);
            Ok(vec![u.reshape(in_shape).map_err(wrap)?])
        }
        LayerOp::Concat => {
            let mut pieces = Vec::with_capacity(g.inputs_of(idx).len());
            let mut offset = 0usize;
            for r in g.inputs_of(idx) {
                let s = g.shape_of_ref(*r);
                let span: usize = s.iter().product();
                pieces.push(
                    Tensor::new(s.to_vec(), u.data()[offset..offset + span].to_vec())
                        .map_err(wrap)?,
                );
                offset += span;
            }
            Ok(pieces)
        }
    }
}

/// Fields of one sample's trace: entry per node (None off the trace), plus
/// the image-space field.
pub fn trace_sample(
    g: &NetGraph,
    cache: &ActivationCache,
    seed: Tensor,
) -> Result<(Vec<Option<Tensor>>, Tensor), DeconvError> {
    let tag = g.last_hidden();
    let mut fields: Vec<Option<Tensor>> = vec![None; g.node_count()];
    let mut input_field = Tensor::zeros(g.input_shape());
    fields[tag] = Some(seed);
    for i in (0..=tag).rev() {
        let Some(u) = fields[i].clone() else {
            continue;
        };
        let pieces = deconv_step(g, cache, i, &u)?;
        for (piece, r) in pieces.into_iter().zip(g.inputs_of(i)) {
            match r {
                NodeRef::Input => input_field.add_assign(&piece),
                NodeRef::Node(j) => match &mut fields[*j] {
                    Some(t) => t.add_assign(&piece),
                    slot => *slot = Some(piece),
                },
            }
        }
    }
    Ok((fields, input_field))
}

/// Samples per accumulation chunk; fixed so the reduction order (and hence
/// the bit pattern of the averages) is machine independent.
const TRACE_CHUNK: usize = 8;

/// Trace the selected neurons' utility over a sample set and average the
/// reconstruction fields.
pub fn trace_utility(
    g: &NetGraph,
    samples: &[Tensor],
    selected: &[usize],
    weights: Option<&[f64]>,
    cfg: &TraceConfig,
) -> Result<UtilityMap, DeconvError> {
    if samples.is_empty() {
        return Err(DeconvError::NoSamples);
    }
    if selected.is_empty() {
        return Err(DeconvError::EmptySeed);
    }
    let weights = if cfg.weight_by_score { weights } else { None };

    let chunk_sums: Vec<Result<(Vec<Option<Tensor>>, Tensor), DeconvError>> = samples
        .par_chunks(TRACE_CHUNK)
        .map(|chunk| {
            let mut acc: Vec<Option<Tensor>> = vec![None; g.node_count()];
            let mut input_acc = Tensor::zeros(g.input_shape());
            for x in chunk {
                let cache = forward(g, x, None)?;
                let seed = seed_utility(g, &cache, selected, weights)?;
                let (fields, input_field) = trace_sample(g, &cache, seed)?;
                for (slot, f) in acc.iter_mut().zip(fields) {
                    if let Some(f) = f {
                        match slot {
                            Some(t) => t.add_assign(&f),
                            none => *none = Some(f),
                        }
                    }
                }
                input_acc.add_assign(&input_field);
            }
            Ok((acc, input_acc))
        })
        .collect();

    let mut fields: Vec<Option<Tensor>> = vec![None; g.node_count()];
    let mut input_field = Tensor::zeros(g.input_shape());
    for r in chunk_sums {
        let (acc, input_acc) = r?;
        for (slot, f) in fields.iter_mut().zip(acc) {
            if let Some(f) = f {
                match slot {
                    Some(t) => t.add_assign(&f),
                    none => *none = Some(f),
                }
            }
        }
        input_field.add_assign(&input_acc);
    }
    let inv = 1.0 / samples.len() as f64;
    for f in fields.iter_mut().flatten() {
        f.scale(inv);
    }
    input_field.scale(inv);

    Ok(UtilityMap {
        fields,
        input_field: Some(input_field),
        selected: selected.to_vec(),
        samples: samples.len(),
    })
}
