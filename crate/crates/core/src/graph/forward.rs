//! Forward evaluation of a [`NetGraph`] with full per-node activation and
//! pool-switch caching, as the utility tracing and training paths require.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GraphError, LayerOp, NetGraph, NodeRef};
use crate::tensor::{
    conv2d_forward, dense_forward, maxpool_forward, rectify, PoolSwitches, Tensor,
};

/// Every node's output for one sample, plus pool switches and (in training
/// mode) the sampled dropout masks.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    outputs: Vec<Tensor>,
    switches: Vec<Option<PoolSwitches>>,
    dropout_masks: Vec<Option<Vec<f64>>>,
}

impl ActivationCache {
    pub fn output(&self, idx: usize) -> &Tensor {
        &self.outputs[idx]
    }

    pub fn switches(&self, idx: usize) -> Option<&PoolSwitches> {
        self.switches[idx].as_ref()
    }

    pub fn dropout_mask(&self, idx: usize) -> Option<&[f64]> {
        self.dropout_masks[idx].as_deref()
    }

    /// Softmax output (class probabilities).
    pub fn probabilities<'a>(&'a self, g: &NetGraph) -> &'a Tensor {
        &self.outputs[g.softmax()]
    }

    /// Pre-softmax logits.
    pub fn logits<'a>(&'a self, g: &NetGraph) -> &'a Tensor {
        match g.inputs_of(g.softmax())[0] {
            NodeRef::Node(j) => &self.outputs[j],
            NodeRef::Input => &self.outputs[g.softmax()],
        }
    }

    pub fn predicted_class(&self, g: &NetGraph) -> usize {
        let p = self.probabilities(g).data();
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best
    }
}

pub(crate) fn stable_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Single-sample forward pass. `dropout_rng` enables training-mode inverted
/// dropout; `None` runs inference (dropout is the identity).
pub fn forward(
    g: &NetGraph,
    x: &Tensor,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<ActivationCache, GraphError> {
    if x.shape() != g.input_shape() {
        return Err(GraphError::Shape {
            node: "input".into(),
            source: crate::tensor::TensorError::Rank {
                op: "forward input",
                expected: g.input_shape().len(),
                shape: x.shape().to_vec(),
            },
        });
    }
    let n = g.node_count();
    let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
    let mut switches: Vec<Option<PoolSwitches>> = vec![None; n];
    let mut dropout_masks: Vec<Option<Vec<f64>>> = vec![None; n];

    for (i, node) in g.nodes().iter().enumerate() {
        let input = |r: NodeRef| -> &Tensor {
            match r {
                NodeRef::Input => x,
                NodeRef::Node(j) => &outputs[j],
            }
        };
        let wrap = |source| GraphError::Shape {
            node: node.id.clone(),
            source,
        };
        let out = match &node.op {
            LayerOp::Conv(w) => conv2d_forward(input(g.inputs_of(i)[0]), w).map_err(wrap)?,
            LayerOp::Relu => rectify(input(g.inputs_of(i)[0])),
            LayerOp::MaxPool { k, stride } => {
                let (out, sw) = maxpool_forward(input(g.inputs_of(i)[0]), *k, *stride).map_err(wrap)?;
                switches[i] = Some(sw);
                out
            }
            LayerOp::Dense { weight, bias } => {
                dense_forward(input(g.inputs_of(i)[0]), weight, bias).map_err(wrap)?
            }
            LayerOp::Dropout { rate } => {
                let src = input(g.inputs_of(i)[0]);
                match dropout_rng.as_deref_mut() {
                    Some(rng) if *rate > 0.0 => {
                        let keep = 1.0 - rate;
                        let mask: Vec<f64> = (0..src.len())
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let data = src
                            .data()
                            .iter()
                            .zip(&mask)
                            .map(|(v, m)| v * m)
                            .collect();
                        dropout_masks[i] = Some(mask);
                        Tensor::new(src.shape().to_vec(), data).map_err(wrap)?
                    }
                    _ => src.clone(),
                }
            }
            LayerOp::Flatten => {
                let src = input(g.inputs_of(i)[0]);
                src.reshape(&[src.len()]).map_err(wrap)?
            }
            LayerOp::Concat => {
                let shape = g.shape_of(i).to_vec();
                let mut data = Vec::with_capacity(shape.iter().product());
                for r in g.inputs_of(i) {
                    data.extend_from_slice(input(*r).data());
                }
                Tensor::new(shape, data).map_err(wrap)?
            }
            LayerOp::Softmax => {
                let src = input(g.inputs_of(i)[0]);
                Tensor::from_vec(stable_softmax(src.data()))
            }
        };
        outputs.push(out);
    }

    Ok(ActivationCache {
        outputs,
        switches,
        dropout_masks,
    })
}

/// Inference-mode forward over many samples. Parallelised per sample; the
/// output order matches the input order.
pub fn forward_batch(g: &NetGraph, xs: &[Tensor]) -> Result<Vec<ActivationCache>, GraphError> {
    xs.par_iter()
        .map(|x| forward(g, x, None))
        .collect::<Result<Vec<_>, _>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch;
    use crate::tensor::{conv2d_forward, maxpool_forward, rectify, ConvWeights};
    use rand::prelude::*;

    #[test]
    fn zero_weight_net_gives_uniform_softmax() {
        let g = arch::tiny_net(4, 0).unwrap();
        // tiny_net(_, seed 0) still randomises; rebuild with zeroed weights
        let mut g = g;
        for idx in 0..g.node_count() {
            match g.op_mut(idx) {
                LayerOp::Conv(w) => {
                    w.kernel.data_mut().fill(0.0);
                    w.bias.data_mut().fill(0.0);
                }
                LayerOp::Dense { weight, bias } => {
                    weight.data_mut().fill(0.0);
                    bias.data_mut().fill(0.0);
                }
                _ => {}
            }
        }
        let x = Tensor::zeros(g.input_shape());
        let cache = forward(&g, &x, None).unwrap();
        let p = cache.probabilities(&g);
        for &v in p.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_normalises_per_sample() {
        let g = arch::tiny_net(3, 42).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let data: Vec<f64> = (0..g.input_shape().iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let x = Tensor::new(g.input_shape().to_vec(), data).unwrap();
            let cache = forward(&g, &x, None).unwrap();
            let sum: f64 = cache.probabilities(&g).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_conv_net_matches_hand_composition() {
        let g = arch::tiny_net(3, 9).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..g.input_shape().iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(g.input_shape().to_vec(), data).unwrap();
        let cache = forward(&g, &x, None).unwrap();

        let conv_idx = g.index_of("conv1").unwrap();
        let w = match &g.node(conv_idx).op {
            LayerOp::Conv(w) => w.clone(),
            _ => unreachable!(),
        };
        let by_hand = conv2d_forward(&x, &w).unwrap();
        assert!(cache.output(conv_idx).bits_eq(&by_hand));

        let relu_idx = g.index_of("relu1").unwrap();
        assert!(cache.output(relu_idx).bits_eq(&rectify(&by_hand)));

        let pool_idx = g.index_of("pool1").unwrap();
        let (pooled, _) = maxpool_forward(&rectify(&by_hand), 2, 2).unwrap();
        assert!(cache.output(pool_idx).bits_eq(&pooled));
    }

    #[test]
    fn concat_is_channel_stacking() {
        let g = arch::tiny_module_net(3, 11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..g.input_shape().iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let x = Tensor::new(g.input_shape().to_vec(), data).unwrap();
        let cache = forward(&g, &x, None).unwrap();

        let cat = g.index_of("cat").unwrap();
        let mut stacked = Vec::new();
        for r in g.inputs_of(cat) {
            match r {
                NodeRef::Node(j) => stacked.extend_from_slice(cache.output(*j).data()),
                NodeRef::Input => stacked.extend_from_slice(x.data()),
            }
        }
        assert_eq!(cache.output(cat).data(), stacked.as_slice());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let g = arch::tiny_net(3, 1).unwrap();
        let x = Tensor::zeros(&[2, 8, 8]);
        assert!(forward(&g, &x, None).is_err());
    }

    #[allow(dead_code)]
    fn conv_weights_helper() -> ConvWeights {
        ConvWeights::new(Tensor::zeros(&[1, 1, 1, 1]), Tensor::zeros(&[1]), 1, 0).unwrap()
    }
}
