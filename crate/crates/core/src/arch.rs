//! Stock architectures: the small desk-scale training nets (plain CNN and a
//! three-branch module net), reference configs used for parameter/FLOP
//! accounting, and seeded weight initialisation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{GraphError, LayerNode, LayerOp, NetGraph};
use crate::tensor::{ConvWeights, Tensor};

fn conv(id: &str, input: &str, channels: usize, filters: usize, k: usize, stride: usize, pad: usize) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Conv(
            ConvWeights::new(
                Tensor::zeros(&[filters, channels, k, k]),
                Tensor::zeros(&[filters]),
                stride,
                pad,
            )
            .expect("valid conv dims"),
        ),
        inputs: vec![input.into()],
    }
}

fn relu(id: &str, input: &str) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Relu,
        inputs: vec![input.into()],
    }
}

fn pool(id: &str, input: &str, k: usize, stride: usize) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::MaxPool { k, stride },
        inputs: vec![input.into()],
    }
}

fn dense(id: &str, input: &str, din: usize, dout: usize) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Dense {
            weight: Tensor::zeros(&[dout, din]),
            bias: Tensor::zeros(&[dout]),
        },
        inputs: vec![input.into()],
    }
}

fn dropout(id: &str, input: &str, rate: f64) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Dropout { rate },
        inputs: vec![input.into()],
    }
}

fn flatten(id: &str, input: &str) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Flatten,
        inputs: vec![input.into()],
    }
}

fn concat(id: &str, inputs: &[&str]) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Concat,
        inputs: inputs.iter().map(|s| s.to_string()).collect(),
    }
}

fn softmax(id: &str, input: &str) -> LayerNode {
    LayerNode {
        id: id.into(),
        op: LayerOp::Softmax,
        inputs: vec![input.into()],
    }
}

/// Xavier-uniform weights (zero biases) drawn from per-node seeded streams.
pub fn init_weights(g: &mut NetGraph, seed: u64) {
    for idx in 0..g.node_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        match g.op_mut(idx) {
            LayerOp::Conv(w) => {
                let (f, c, kh, kw) = (
                    w.kernel.shape()[0],
                    w.kernel.shape()[1],
                    w.kernel.shape()[2],
                    w.kernel.shape()[3],
                );
                let limit = (6.0 / ((c * kh * kw + f * kh * kw) as f64)).sqrt();
                for v in w.kernel.data_mut() {
                    *v = rng.random_range(-limit..limit);
                }
                w.bias.data_mut().fill(0.0);
            }
            LayerOp::Dense { weight, bias } => {
                let (dout, din) = (weight.shape()[0], weight.shape()[1]);
                let limit = (6.0 / ((din + dout) as f64)).sqrt();
                for v in weight.data_mut() {
                    *v = rng.random_range(-limit..limit);
                }
                bias.data_mut().fill(0.0);
            }
            _ => {}
        }
    }
}

/// Smallest useful net: one conv block plus two dense layers on 1x8x8 input.
pub fn tiny_net(classes: usize, seed: u64) -> Result<NetGraph, GraphError> {
    let nodes = vec![
        conv("conv1", "input", 1, 4, 3, 1, 1),
        relu("relu1", "conv1"),
        pool("pool1", "relu1", 2, 2),
        flatten("flat", "pool1"),
        dense("fc1", "flat", 4 * 4 * 4, 16),
        relu("relu_fc1", "fc1"),
        dense("fc2", "relu_fc1", 16, classes),
        softmax("sm", "fc2"),
    ];
    let mut g = NetGraph::new(nodes, vec![1, 8, 8], classes, "relu_fc1".into())?;
    init_weights(&mut g, seed);
    Ok(g)
}

/// Tiny three-branch module net on 1x8x8 input; exercises group-wise
/// concat handling end to end at gradient-check scale.
pub fn tiny_module_net(classes: usize, seed: u64) -> Result<NetGraph, GraphError> {
    let nodes = vec![
        conv("stem", "input", 1, 3, 3, 1, 1),
        relu("stem_relu", "stem"),
        pool("stem_pool", "stem_relu", 2, 2),
        conv("b1", "stem_pool", 3, 2, 1, 1, 0),
        relu("b1_relu", "b1"),
        conv("b2", "stem_pool", 3, 3, 3, 1, 1),
        relu("b2_relu", "b2"),
        conv("b3", "stem_pool", 3, 2, 5, 1, 2),
        relu("b3_relu", "b3"),
        concat("cat", &["b1_relu", "b2_relu", "b3_relu"]),
        flatten("flat", "cat"),
        dense("fc1", "flat", 7 * 4 * 4, 12),
        relu("relu_fc1", "fc1"),
        dense("fc2", "relu_fc1", 12, classes),
        softmax("sm", "fc2"),
    ];
    let mut g = NetGraph::new(nodes, vec![1, 8, 8], classes, "relu_fc1".into())?;
    init_weights(&mut g, seed);
    Ok(g)
}

/// Desk-scale CNN for 1x28x28 images: four conv layers, two dense layers,
/// ~217k parameters at 10 classes.
pub fn desk_cnn(classes: usize, seed: u64) -> Result<NetGraph, GraphError> {
    let nodes = vec![
        conv("conv1", "input", 1, 8, 3, 1, 1),
        relu("relu1", "conv1"),
        pool("pool1", "relu1", 2, 2),
        conv("conv2", "pool1", 8, 16, 3, 1, 1),
        relu("relu2", "conv2"),
        pool("pool2", "relu2", 2, 2),
        conv("conv3", "pool2", 16, 32, 3, 1, 1),
        relu("relu3", "conv3"),
        conv("conv4", "relu3", 32, 32, 3, 1, 1),
        relu("relu4", "conv4"),
        flatten("flat", "relu4"),
        dropout("drop1", "flat", 0.25),
        dense("fc1", "drop1", 32 * 7 * 7, 128),
        relu("relu_fc1", "fc1"),
        dropout("drop2", "relu_fc1", 0.25),
        dense("fc2", "drop2", 128, classes),
        softmax("sm", "fc2"),
    ];
    let mut g = NetGraph::new(nodes, vec![1, 28, 28], classes, "relu_fc1".into())?;
    init_weights(&mut g, seed);
    Ok(g)
}

/// Desk-scale modular net: a stem conv feeding a three-branch module
/// (1x1 / 3x3 / 5x5 scales) joined by concat, then a fusing conv and two
/// dense layers.
pub fn desk_modular(classes: usize, seed: u64) -> Result<NetGraph, GraphError> {
    let nodes = vec![
        conv("conv1", "input", 1, 8, 3, 1, 1),
        relu("relu1", "conv1"),
        pool("pool1", "relu1", 2, 2),
        conv("m_b1", "pool1", 8, 8, 1, 1, 0),
        relu("m_b1_relu", "m_b1"),
        conv("m_b2", "pool1", 8, 12, 3, 1, 1),
        relu("m_b2_relu", "m_b2"),
        conv("m_b3", "pool1", 8, 6, 5, 1, 2),
        relu("m_b3_relu", "m_b3"),
        concat("m_cat", &["m_b1_relu", "m_b2_relu", "m_b3_relu"]),
        conv("conv2", "m_cat", 26, 16, 3, 1, 1),
        relu("relu2", "conv2"),
        pool("pool2", "relu2", 2, 2),
        flatten("flat", "pool2"),
        dropout("drop1", "flat", 0.25),
        dense("fc1", "drop1", 16 * 7 * 7, 64),
        relu("relu_fc1", "fc1"),
        dropout("drop2", "relu_fc1", 0.25),
        dense("fc2", "drop2", 64, classes),
        softmax("sm", "fc2"),
    ];
    let mut g = NetGraph::new(nodes, vec![1, 28, 28], classes, "relu_fc1".into())?;
    init_weights(&mut g, seed);
    Ok(g)
}

/// 16-layer conv/dense reference config on 3x224x224 input. Weights are
/// zero; the config exists for parameter/FLOP accounting and shape checks.
pub fn vgg16(classes: usize) -> Result<NetGraph, GraphError> {
    let mut nodes = Vec::new();
    let mut prev = "input".to_string();
    let mut channels = 3usize;
    let blocks: &[Vec<usize>] = &[
        vec![64, 64],
        vec![128, 128],
        vec![256, 256, 256],
        vec![512, 512, 512],
        vec![512, 512, 512],
    ];
    for (bi, block) in blocks.iter().enumerate() {
        for (ci, &filters) in block.iter().enumerate() {
            let cid = format!("conv{}_{}", bi + 1, ci + 1);
            let rid = format!("relu{}_{}", bi + 1, ci + 1);
            nodes.push(conv(&cid, &prev, channels, filters, 3, 1, 1));
            nodes.push(relu(&rid, &cid));
            prev = rid;
            channels = filters;
        }
        let pid = format!("pool{}", bi + 1);
        nodes.push(pool(&pid, &prev, 2, 2));
        prev = pid;
    }
    nodes.push(flatten("flat", &prev));
    nodes.push(dense("fc6", "flat", 512 * 7 * 7, 4096));
    nodes.push(relu("relu6", "fc6"));
    nodes.push(dropout("drop7", "relu6", 0.5));
    nodes.push(dense("fc7", "drop7", 4096, 4096));
    nodes.push(relu("relu7", "fc7"));
    nodes.push(dropout("drop8", "relu7", 0.5));
    nodes.push(dense("fc8", "drop8", 4096, classes));
    nodes.push(softmax("sm", "fc8"));
    NetGraph::new(nodes, vec![3, 224, 224], classes, "relu7".into())
}

fn inception(
    nodes: &mut Vec<LayerNode>,
    name: &str,
    input: &str,
    in_ch: usize,
    c1: usize,
    r3: usize,
    c3: usize,
    r5: usize,
    c5: usize,
    proj: usize,
) -> String {
    let n = |s: &str| format!("{name}_{s}");
    nodes.push(conv(&n("1x1"), input, in_ch, c1, 1, 1, 0));
    nodes.push(relu(&n("1x1_relu"), &n("1x1")));
    nodes.push(conv(&n("3x3r"), input, in_ch, r3, 1, 1, 0));
    nodes.push(relu(&n("3x3r_relu"), &n("3x3r")));
    nodes.push(conv(&n("3x3"), &n("3x3r_relu"), r3, c3, 3, 1, 1));
    nodes.push(relu(&n("3x3_relu"), &n("3x3")));
    nodes.push(conv(&n("5x5r"), input, in_ch, r5, 1, 1, 0));
    nodes.push(relu(&n("5x5r_relu"), &n("5x5r")));
    nodes.push(conv(&n("5x5"), &n("5x5r_relu"), r5, c5, 5, 1, 2));
    nodes.push(relu(&n("5x5_relu"), &n("5x5")));
    nodes.push(conv(&n("proj"), input, in_ch, proj, 1, 1, 0));
    nodes.push(relu(&n("proj_relu"), &n("proj")));
    let cat = n("cat");
    nodes.push(concat(
        &cat,
        &[
            n("1x1_relu").as_str(),
            n("3x3_relu").as_str(),
            n("5x5_relu").as_str(),
            n("proj_relu").as_str(),
        ],
    ));
    cat
}

/// Nine-module inception-style reference config on 3x224x224 input, ~6M
/// parameters with a small classifier head. Like [`vgg16`] this is a
/// count/shape config with zero weights. Spatial reductions use 2x2 pools
/// and an even stem kernel so strided extents stay integral under symmetric
/// padding; pooling carries no parameters or counted FLOPs, and the map
/// sizes match the canonical 112/56/28/14/7 progression.
pub fn googlenet(classes: usize) -> Result<NetGraph, GraphError> {
    let mut nodes = vec![
        conv("conv1", "input", 3, 64, 8, 2, 3),
        relu("relu1", "conv1"),
        pool("pool1", "relu1", 2, 2),
        conv("conv2r", "pool1", 64, 64, 1, 1, 0),
        relu("relu2r", "conv2r"),
        conv("conv2", "relu2r", 64, 192, 3, 1, 1),
        relu("relu2", "conv2"),
        pool("pool2", "relu2", 2, 2),
    ];
    let m3a = inception(&mut nodes, "inc3a", "pool2", 192, 64, 96, 128, 16, 32, 32);
    let m3b = inception(&mut nodes, "inc3b", &m3a, 256, 128, 128, 192, 32, 96, 64);
    nodes.push(pool("pool3", &m3b, 2, 2));
    let m4a = inception(&mut nodes, "inc4a", "pool3", 480, 192, 96, 208, 16, 48, 64);
    let m4b = inception(&mut nodes, "inc4b", &m4a, 512, 160, 112, 224, 24, 64, 64);
    let m4c = inception(&mut nodes, "inc4c", &m4b, 512, 128, 128, 256, 24, 64, 64);
    let m4d = inception(&mut nodes, "inc4d", &m4c, 512, 112, 144, 288, 32, 64, 64);
    let m4e = inception(&mut nodes, "inc4e", &m4d, 528, 256, 160, 320, 32, 128, 128);
    nodes.push(pool("pool4", &m4e, 2, 2));
    let m5a = inception(&mut nodes, "inc5a", "pool4", 832, 256, 160, 320, 32, 128, 128);
    let m5b = inception(&mut nodes, "inc5b", &m5a, 832, 384, 192, 384, 48, 128, 128);
    nodes.push(pool("pool5", &m5b, 7, 7));
    nodes.push(flatten("flat", "pool5"));
    nodes.push(dropout("drop", "flat", 0.4));
    nodes.push(dense("fc", "drop", 1024, classes));
    nodes.push(softmax("sm", "fc"));
    NetGraph::new(nodes, vec![3, 224, 224], classes, "flat".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_nets_validate_and_stay_small() {
        let cnn = desk_cnn(10, 1).unwrap();
        assert!(cnn.param_count() <= 1_000_000);
        let modular = desk_modular(10, 1).unwrap();
        assert!(modular.param_count() <= 1_000_000);
    }

    #[test]
    fn vgg16_shape_progression() {
        let g = vgg16(1000).unwrap();
        // spatial extents halve at each pool: 224 -> 112 -> 56 -> 28 -> 14 -> 7
        for (id, ch, hw) in [
            ("pool1", 64, 112),
            ("pool2", 128, 56),
            ("pool3", 256, 28),
            ("pool4", 512, 14),
            ("pool5", 512, 7),
        ] {
            let idx = g.index_of(id).unwrap();
            assert_eq!(g.shape_of(idx), &[ch, hw, hw], "{id}");
        }
        assert_eq!(g.shape_of(g.index_of("fc8").unwrap()), &[1000]);
    }

    #[test]
    fn googlenet_shape_progression() {
        let g = googlenet(8).unwrap();
        for (id, ch, hw) in [
            ("pool2", 192, 28),
            ("inc3b_cat", 480, 28),
            ("inc4e_cat", 832, 14),
            ("inc5b_cat", 1024, 7),
            ("pool5", 1024, 1),
        ] {
            let idx = g.index_of(id).unwrap();
            assert_eq!(g.shape_of(idx), &[ch, hw, hw], "{id}");
        }
        // the tag's channels resolve group-wise to the last module's branches
        let owners = g.channel_owners(g.last_hidden()).unwrap();
        assert_eq!(owners.len(), 1024);
        let first = owners[0].0;
        assert_eq!(g.node(first).id, "inc5b_1x1");
        let last = owners[1023].0;
        assert_eq!(g.node(last).id, "inc5b_proj");
    }

    #[test]
    fn init_is_seeded_and_reproducible() {
        let a = desk_cnn(10, 99).unwrap();
        let b = desk_cnn(10, 99).unwrap();
        let c = desk_cnn(10, 100).unwrap();
        for i in 0..a.node_count() {
            match (&a.node(i).op, &b.node(i).op) {
                (LayerOp::Conv(wa), LayerOp::Conv(wb)) => assert!(wa.kernel.bits_eq(&wb.kernel)),
                (LayerOp::Dense { weight: wa, .. }, LayerOp::Dense { weight: wb, .. }) => {
                    assert!(wa.bits_eq(wb))
                }
                _ => {}
            }
        }
        let ai = a.index_of("conv1").unwrap();
        if let (LayerOp::Conv(wa), LayerOp::Conv(wc)) = (&a.node(ai).op, &c.node(ai).op) {
            assert!(!wa.kernel.bits_eq(&wc.kernel), "different seeds differ");
        }
    }
}
