//! Model file format: a versioned JSON document carrying the ordered node
//! list, input shape, class count and last-hidden tag, with weights stored
//! as little-endian f64 blobs in a sidecar binary file referenced by node
//! id. Nodes absent from the weight index load as all-zero (weightless
//! architecture configs).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphError, LayerNode, LayerOp, NetGraph};
use crate::tensor::{ConvWeights, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDoc {
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
    pub last_hidden: String,
    pub nodes: Vec<NodeDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_file: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<WeightRef>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDoc {
    pub id: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub op: OpDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OpDoc {
    Conv {
        filters: usize,
        channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Dense {
        din: usize,
        dout: usize,
    },
    Dropout {
        rate: f64,
    },
    Flatten,
    Concat,
    Softmax,
}

/// Byte offset and f64 element count of one node's blob (kernel/weight
/// first, then bias) inside the sidecar.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightRef {
    pub node: String,
    pub offset: u64,
    pub count: u64,
}

fn tensor_to_le(t: &Tensor, out: &mut Vec<u8>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn le_to_vec(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Serialise a graph to (document text, sidecar bytes).
pub fn save_model(g: &NetGraph) -> (String, Vec<u8>) {
    let mut sidecar = Vec::new();
    let mut weights = Vec::new();
    let mut nodes = Vec::with_capacity(g.node_count());
    for n in g.nodes() {
        let op = match &n.op {
            LayerOp::Conv(w) => {
                let offset = sidecar.len() as u64;
                tensor_to_le(&w.kernel, &mut sidecar);
                tensor_to_le(&w.bias, &mut sidecar);
                weights.push(WeightRef {
                    node: n.id.clone(),
                    offset,
                    count: (w.kernel.len() + w.bias.len()) as u64,
                });
                OpDoc::Conv {
                    filters: w.filters(),
                    channels: w.channels(),
                    kh: w.kh(),
                    kw: w.kw(),
                    stride: w.stride,
                    pad: w.pad,
                }
            }
            LayerOp::Dense { weight, bias } => {
                let offset = sidecar.len() as u64;
                tensor_to_le(weight, &mut sidecar);
                tensor_to_le(bias, &mut sidecar);
                weights.push(WeightRef {
                    node: n.id.clone(),
                    offset,
                    count: (weight.len() + bias.len()) as u64,
                });
                OpDoc::Dense {
                    din: weight.shape()[1],
                    dout: weight.shape()[0],
                }
            }
            LayerOp::Relu => OpDoc::Relu,
            LayerOp::MaxPool { k, stride } => OpDoc::MaxPool {
                k: *k,
                stride: *stride,
            },
            LayerOp::Dropout { rate } => OpDoc::Dropout { rate: *rate },
            LayerOp::Flatten => OpDoc::Flatten,
            LayerOp::Concat => OpDoc::Concat,
            LayerOp::Softmax => OpDoc::Softmax,
        };
        nodes.push(NodeDoc {
            id: n.id.clone(),
            inputs: n.inputs.clone(),
            op,
        });
    }
    let doc = ModelDoc {
        version: MODEL_FORMAT_VERSION,
        input_shape: g.input_shape().to_vec(),
        class_count: g.class_count(),
        last_hidden: g.last_hidden_id().to_string(),
        nodes,
        weights_file: None,
        weights,
    };
    let text = serde_json::to_string_pretty(&doc).expect("model doc serialises");
    (text, sidecar)
}

/// Parse a model document and materialise its graph. Weight-carrying nodes
/// without a sidecar entry are zero-initialised.
pub fn load_model(text: &str, sidecar: Option<&[u8]>) -> Result<NetGraph, GraphError> {
    let doc: ModelDoc =
        serde_json::from_str(text).map_err(|e| GraphError::Document(e.to_string()))?;
    if doc.version != MODEL_FORMAT_VERSION {
        return Err(GraphError::Document(format!(
            "unsupported model format version {}",
            doc.version
        )));
    }

    let blob_for = |id: &str, expected: usize| -> Result<Option<Vec<f64>>, GraphError> {
        let Some(r) = doc.weights.iter().find(|r| r.node == id) else {
            return Ok(None);
        };
        let bytes = sidecar.ok_or_else(|| {
            GraphError::Weights(id.to_string(), "weight index present but no sidecar".into())
        })?;
        if r.count as usize != expected {
            return Err(GraphError::Weights(
                id.to_string(),
                format!("expected {expected} values, index says {}", r.count),
            ));
        }
        let start = r.offset as usize;
        let end = start + expected * 8;
        if end > bytes.len() {
            return Err(GraphError::Weights(
                id.to_string(),
                format!("blob [{start}, {end}) outside sidecar of {} bytes", bytes.len()),
            ));
        }
        Ok(Some(le_to_vec(&bytes[start..end])))
    };

    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for nd in &doc.nodes {
        let op = match &nd.op {
            OpDoc::Conv {
                filters,
                channels,
                kh,
                kw,
                stride,
                pad,
            } => {
                let klen = filters * channels * kh * kw;
                let (kdata, bdata) = match blob_for(&nd.id, klen + filters)? {
                    Some(mut v) => {
                        let b = v.split_off(klen);
                        (v, b)
                    }
                    None => (vec![0.0; klen], vec![0.0; *filters]),
                };
                let kernel = Tensor::new(vec![*filters, *channels, *kh, *kw], kdata)
                    .map_err(|e| GraphError::Weights(nd.id.clone(), e.to_string()))?;
                let bias = Tensor::new(vec![*filters], bdata)
                    .map_err(|e| GraphError::Weights(nd.id.clone(), e.to_string()))?;
                LayerOp::Conv(
                    ConvWeights::new(kernel, bias, *stride, *pad)
                        .map_err(|e| GraphError::Weights(nd.id.clone(), e.to_string()))?,
                )
            }
            OpDoc::Dense { din, dout } => {
                let wlen = din * dout;
                let (wdata, bdata) = match blob_for(&nd.id, wlen + dout)? {
                    Some(mut v) => {
                        let b = v.split_off(wlen);
                        (v, b)
                    }
                    None => (vec![0.0; wlen], vec![0.0; *dout]),
                };
                LayerOp::Dense {
                    weight: Tensor::new(vec![*dout, *din], wdata)
                        .map_err(|e| GraphError::Weights(nd.id.clone(), e.to_string()))?,
                    bias: Tensor::new(vec![*dout], bdata)
                        .map_err(|e| GraphError::Weights(nd.id.clone(), e.to_string()))?,
                }
            }
            OpDoc::Relu => LayerOp::Relu,
            OpDoc::MaxPool { k, stride } => LayerOp::MaxPool {
                k: *k,
                stride: *stride,
            },
            OpDoc::Dropout { rate } => LayerOp::Dropout { rate: *rate },
            OpDoc::Flatten => LayerOp::Flatten,
            OpDoc::Concat => LayerOp::Concat,
            OpDoc::Softmax => LayerOp::Softmax,
        };
        nodes.push(LayerNode {
            id: nd.id.clone(),
            op,
            inputs: nd.inputs.clone(),
        });
    }

    NetGraph::new(nodes, doc.input_shape, doc.class_count, doc.last_hidden)
}

fn sidecar_path(json_path: &Path, named: Option<&str>) -> PathBuf {
    match named {
        Some(name) => json_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(name),
        None => json_path.with_extension("bin"),
    }
}

/// Write `model.json` plus its `.bin` sidecar next to it.
pub fn save_model_files(g: &NetGraph, json_path: &Path) -> Result<(), GraphError> {
    let (text, sidecar) = save_model(g);
    let mut doc: ModelDoc = serde_json::from_str(&text).expect("round trip");
    let bin = json_path.with_extension("bin");
    doc.weights_file = bin.file_name().map(|s| s.to_string_lossy().into_owned());
    fs::write(json_path, serde_json::to_string_pretty(&doc).unwrap())?;
    fs::write(bin, sidecar)?;
    Ok(())
}

/// Load a model document and, when referenced, its weight sidecar.
pub fn load_model_files(json_path: &Path) -> Result<NetGraph, GraphError> {
    let text = fs::read_to_string(json_path)?;
    let doc: ModelDoc =
        serde_json::from_str(&text).map_err(|e| GraphError::Document(e.to_string()))?;
    let sidecar = if doc.weights.is_empty() {
        None
    } else {
        Some(fs::read(sidecar_path(json_path, doc.weights_file.as_deref()))?)
    };
    load_model(&text, sidecar.as_deref())
}
