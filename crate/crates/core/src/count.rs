//! Parameter and FLOP accounting. Multiplication and addition each count as
//! one FLOP; a conv output element therefore costs `2*kh*kw*cn` (the bias
//! is folded into the add count) and a dense layer costs `2*din*dout`.
//! Rectification, pooling and softmax count as zero.

use std::collections::HashMap;

use crate::graph::{GraphError, LayerOp, NetGraph, NodeRef};
use crate::tensor::TensorError;

/// Learnable parameter count (kernel + bias + dense weight elements).
pub fn count_params(g: &NetGraph) -> u64 {
    g.param_count()
}

/// Per-node parameter counts for weight-carrying layers, in node order.
pub fn params_per_layer(g: &NetGraph) -> Vec<(String, u64)> {
    g.nodes()
        .iter()
        .filter_map(|n| {
            let p = match &n.op {
                LayerOp::Conv(w) => (w.kernel.len() + w.bias.len()) as u64,
                LayerOp::Dense { weight, bias } => (weight.len() + bias.len()) as u64,
                _ => return None,
            };
            Some((n.id.clone(), p))
        })
        .collect()
}

/// Propagate shapes for an arbitrary input without touching weight data.
fn shapes_for(g: &NetGraph, input_shape: &[usize]) -> Result<Vec<Vec<usize>>, GraphError> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(g.node_count());
    for (i, n) in g.nodes().iter().enumerate() {
        let of = |r: &NodeRef, shapes: &Vec<Vec<usize>>| -> Vec<usize> {
            match r {
                NodeRef::Input => input_shape.to_vec(),
                NodeRef::Node(j) => shapes[*j].clone(),
            }
        };
        let fail = |source: TensorError| GraphError::Shape {
            node: n.id.clone(),
            source,
        };
        let s = match &n.op {
            LayerOp::Conv(w) => {
                let inp = of(&g.inputs_of(i)[0], &shapes);
                if inp.len() != 3 || inp[0] != w.channels() {
                    return Err(fail(TensorError::ChannelMismatch {
                        op: "count conv",
                        expected: w.channels(),
                        got: *inp.first().unwrap_or(&0),
                    }));
                }
                let ext = |e: usize, k: usize| -> Result<usize, GraphError> {
                    let padded = e + 2 * w.pad;
                    if padded < k || (padded - k) % w.stride != 0 {
                        return Err(fail(TensorError::NonIntegralConvOutput {
                            extent: e,
                            kernel: k,
                            pad: w.pad,
                            stride: w.stride,
                        }));
                    }
                    Ok((padded - k) / w.stride + 1)
                };
                vec![w.filters(), ext(inp[1], w.kh())?, ext(inp[2], w.kw())?]
            }
            LayerOp::Relu | LayerOp::Dropout { .. } => of(&g.inputs_of(i)[0], &shapes),
            LayerOp::MaxPool { k, stride } => {
                let inp = of(&g.inputs_of(i)[0], &shapes);
                if inp.len() != 3 {
                    return Err(fail(TensorError::Rank {
                        op: "count pool",
                        expected: 3,
                        shape: inp,
                    }));
                }
                for extent in [inp[1], inp[2]] {
                    if extent < *k || (extent - k) % stride != 0 {
                        return Err(fail(TensorError::PoolTiling {
                            k: *k,
                            stride: *stride,
                            extent,
                        }));
                    }
                }
                vec![inp[0], (inp[1] - k) / stride + 1, (inp[2] - k) / stride + 1]
            }
            LayerOp::Dense { weight, .. } => {
                let inp = of(&g.inputs_of(i)[0], &shapes);
                let din = weight.shape()[1];
                if inp.len() != 1 || inp[0] != din {
                    return Err(fail(TensorError::LengthMismatch {
                        op: "count dense",
                        expected: din,
                        got: inp.iter().product(),
                    }));
                }
                vec![weight.shape()[0]]
            }
            LayerOp::Flatten => vec![of(&g.inputs_of(i)[0], &shapes).iter().product()],
            LayerOp::Concat => {
                let first = of(&g.inputs_of(i)[0], &shapes);
                let mut ch = 0;
                for r in g.inputs_of(i) {
                    let s = of(r, &shapes);
                    if s.len() != 3 || s[1..] != first[1..] {
                        return Err(GraphError::ConcatSpatialMismatch {
                            node: n.id.clone(),
                        });
                    }
                    ch += s[0];
                }
                vec![ch, first[1], first[2]]
            }
            LayerOp::Softmax => of(&g.inputs_of(i)[0], &shapes),
        };
        shapes.push(s);
    }
    Ok(shapes)
}

/// Per-node FLOP counts at the given input shape, in node order; zero-cost
/// nodes are omitted.
pub fn flops_per_layer(
    g: &NetGraph,
    input_shape: &[usize],
) -> Result<Vec<(String, u64)>, GraphError> {
    let shapes = shapes_for(g, input_shape)?;
    Ok(g.nodes()
        .iter()
        .enumerate()
        .filter_map(|(i, n)| {
            let f = match &n.op {
                LayerOp::Conv(w) => {
                    let out = &shapes[i];
                    2 * (w.kh() * w.kw() * w.channels() * w.filters() * out[1] * out[2]) as u64
                }
                LayerOp::Dense { weight, .. } => {
                    2 * (weight.shape()[0] * weight.shape()[1]) as u64
                }
                _ => return None,
            };
            Some((n.id.clone(), f))
        })
        .collect())
}

/// Total forward-pass FLOPs at the given input shape.
pub fn count_flops(g: &NetGraph, input_shape: &[usize]) -> Result<u64, GraphError> {
    Ok(flops_per_layer(g, input_shape)?.iter().map(|(_, f)| f).sum())
}

/// Per-layer (params, FLOPs) keyed by node id.
pub fn layer_table(
    g: &NetGraph,
    input_shape: &[usize],
) -> Result<HashMap<String, (u64, u64)>, GraphError> {
    let mut table: HashMap<String, (u64, u64)> = HashMap::new();
    for (id, p) in params_per_layer(g) {
        table.entry(id).or_default().0 = p;
    }
    for (id, f) in flops_per_layer(g, input_shape)? {
        table.entry(id).or_default().1 = f;
    }
    Ok(table)
}
