//! Backpropagation and SGD training: cross entropy with L2 regularisation
//! and inverted dropout. All randomness (init, shuffling, dropout masks)
//! flows from the config seed through fixed-position streams, and gradient
//! reduction runs over fixed-size chunks in index order, so a training run
//! is bitwise reproducible regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use super::forward::forward;
use super::{GraphError, LayerOp, NetGraph, NodeRef};
use crate::tensor::{
    conv2d_grad_weights, conv2d_transpose_into_shape, dense_transpose, unpool, Tensor,
};

/// Samples per parallel gradient chunk. Fixed (not tied to the thread count)
/// so the reduction order is machine independent.
const GRAD_CHUNK: usize = 8;

/// Stream tag separating the shuffle RNG from the dropout streams.
const SHUFFLE_STREAM: u64 = 0x53_48_55_46_46_4C_45;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default = "default_true")]
    pub dropout: bool,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(GraphError::Document(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.l2 < 0.0 || !self.l2.is_finite() {
            return Err(GraphError::Document(format!(
                "l2 coefficient must be non-negative, got {}",
                self.l2
            )));
        }
        if self.batch_size == 0 {
            return Err(GraphError::Document("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-node (weight, bias) gradient buffers, aligned with the node list.
#[derive(Debug, Clone)]
pub struct Gradients {
    pairs: Vec<Option<(Tensor, Tensor)>>,
}

impl Gradients {
    pub fn zeros_like(g: &NetGraph) -> Self {
        let pairs = g
            .nodes()
            .iter()
            .map(|n| match &n.op {
                LayerOp::Conv(w) => Some((Tensor::zeros(w.kernel.shape()), Tensor::zeros(&[w.filters()]))),
                LayerOp::Dense { weight, bias } => {
                    Some((Tensor::zeros(weight.shape()), Tensor::zeros(bias.shape())))
                }
                _ => None,
            })
            .collect();
        Gradients { pairs }
    }

    pub fn get(&self, idx: usize) -> Option<&(Tensor, Tensor)> {
        self.pairs[idx].as_ref()
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.pairs.iter_mut().zip(&other.pairs) {
            if let (Some((aw, ab)), Some((bw, bb))) = (a.as_mut(), b.as_ref()) {
                aw.add_assign(bw);
                ab.add_assign(bb);
            }
        }
    }

    fn scale(&mut self, f: f64) {
        for p in self.pairs.iter_mut().flatten() {
            p.0.scale(f);
            p.1.scale(f);
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.pairs
            .iter()
            .flatten()
            .flat_map(|(w, b)| w.data().iter().chain(b.data()))
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// Boolean keep-masks over kernel / dense weight elements, keyed by node id.
/// Masked-out positions are forced back to exactly zero after every update.
#[derive(Debug, Clone, Default)]
pub struct WeightMasks {
    pub by_node: HashMap<String, Vec<bool>>,
}

impl WeightMasks {
    pub fn apply(&self, g: &mut NetGraph) {
        for idx in 0..g.node_count() {
            let id = g.node(idx).id.clone();
            if let Some(mask) = self.by_node.get(&id) {
                let data = match g.op_mut(idx) {
                    LayerOp::Conv(w) => w.kernel.data_mut(),
                    LayerOp::Dense { weight, .. } => weight.data_mut(),
                    _ => continue,
                };
                for (v, &keep) in data.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
    }
}

/// Position-keyed dropout stream: sample `p` of step `s` always draws the
/// same masks for a given seed.
#[derive(Debug, Clone, Copy)]
pub struct DropoutStream {
    pub seed: u64,
    pub step: u64,
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ c.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn sum_sq_params(g: &NetGraph) -> f64 {
    g.nodes()
        .iter()
        .map(|n| match &n.op {
            LayerOp::Conv(w) => {
                w.kernel.data().iter().map(|v| v * v).sum::<f64>()
                    + w.bias.data().iter().map(|v| v * v).sum::<f64>()
            }
            LayerOp::Dense { weight, bias } => {
                weight.data().iter().map(|v| v * v).sum::<f64>()
                    + bias.data().iter().map(|v| v * v).sum::<f64>()
            }
            _ => 0.0,
        })
        .sum()
}

/// Backpropagate one sample's cross-entropy delta, accumulating weight
/// gradients into `grads`. Returns the sample's CE loss.
fn backprop_sample(
    g: &NetGraph,
    x: &Tensor,
    label: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
    grads: &mut Gradients,
) -> Result<f64, GraphError> {
    let cache = forward(g, x, dropout_rng)?;
    let logits = cache.logits(g).data();
    let loss = cross_entropy(logits, label);

    let n = g.node_count();
    let mut deltas: Vec<Option<Tensor>> = vec![None; n];

    // Joint softmax + cross-entropy gradient at the softmax input.
    let probs = cache.probabilities(g);
    let mut d0 = probs.clone();
    d0.data_mut()[label] -= 1.0;
    match g.inputs_of(g.softmax())[0] {
        NodeRef::Node(j) => deltas[j] = Some(d0),
        NodeRef::Input => return Ok(loss),
    }

    for i in (0..n).rev() {
        if i == g.softmax() {
            continue;
        }
        let Some(delta) = deltas[i].take() else {
            continue;
        };
        let node = g.node(i);
        let producer_out = |r: NodeRef| -> &Tensor {
            match r {
                NodeRef::Input => x,
                NodeRef::Node(j) => cache.output(j),
            }
        };
        let wrap = |source| GraphError::Shape {
            node: node.id.clone(),
            source,
        };
        let route = |r: NodeRef, dx: Tensor, deltas: &mut Vec<Option<Tensor>>| {
            if let NodeRef::Node(j) = r {
                match &mut deltas[j] {
                    Some(t) => t.add_assign(&dx),
                    slot => *slot = Some(dx),
                }
            }
        };
        match &node.op {
            LayerOp::Conv(w) => {
                let r = g.inputs_of(i)[0];
                let xin = producer_out(r);
                let (gk, gb) = conv2d_grad_weights(xin, &delta, w).map_err(wrap)?;
                if let Some((gw, gbias)) = grads.pairs[i].as_mut() {
                    gw.add_assign(&gk);
                    gbias.add_assign(&gb);
                }
                let in_shape = g.shape_of_ref(r);
                let dx = conv2d_transpose_into_shape(&delta, w, Some((in_shape[1], in_shape[2])))
                    .map_err(wrap)?;
                route(r, dx, &mut deltas);
            }
            LayerOp::Dense { weight, .. } => {
                let r = g.inputs_of(i)[0];
                let xin = producer_out(r);
                let din = xin.len();
                if let Some((gw, gbias)) = grads.pairs[i].as_mut() {
                    for (j, &dj) in delta.data().iter().enumerate() {
                        if dj != 0.0 {
                            let row = &mut gw.data_mut()[j * din..(j + 1) * din];
                            for (gv, xv) in row.iter_mut().zip(xin.data()) {
                                *gv += dj * xv;
                            }
                        }
                        gbias.data_mut()[j] += dj;
                    }
                }
                let dx = dense_transpose(&delta, weight).map_err(wrap)?;
                route(r, dx, &mut deltas);
            }
            LayerOp::Relu => {
                let r = g.inputs_of(i)[0];
                let xin = producer_out(r);
                let data = delta
                    .data()
                    .iter()
                    .zip(xin.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                let dx = Tensor::new(xin.shape().to_vec(), data).map_err(wrap)?;
                route(r, dx, &mut deltas);
            }
            LayerOp::MaxPool { .. } => {
                let r = g.inputs_of(i)[0];
                let sw = cache.switches(i).expect("pool switches cached");
                let dx = unpool(&delta, sw, g.shape_of_ref(r)).map_err(wrap)?;
                route(r, dx, &mut deltas);
            }
            LayerOp::Dropout { .. } => {
                let r = g.inputs_of(i)[0];
                let dx = match cache.dropout_mask(i) {
                    Some(mask) => {
                        let data = delta.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                        Tensor::new(delta.shape().to_vec(), data).map_err(wrap)?
                    }
                    None => delta,
                };
                route(r, dx, &mut deltas);
            }
            LayerOp::Flatten => {
                let r = g.inputs_of(i)[0];
                let dx = delta.reshape(g.shape_of_ref(r)).map_err(wrap)?;
                route(r, dx, &mut deltas);
            }
            LayerOp::Concat => {
                let mut offset = 0usize;
                for r in g.inputs_of(i) {
                    let s = g.shape_of_ref(*r);
                    let span = s.iter().product::<usize>();
                    let piece = Tensor::new(
                        s.to_vec(),
                        delta.data()[offset..offset + span].to_vec(),
                    )
                    .map_err(wrap)?;
                    offset += span;
                    route(*r, piece, &mut deltas);
                }
            }
            LayerOp::Softmax => unreachable!("softmax handled before the loop"),
        }
    }
    Ok(loss)
}

/// Mean loss (cross entropy plus the L2 term) and mean gradients over a
/// batch, without touching the weights.
pub fn gradients(
    g: &NetGraph,
    xs: &[Tensor],
    ys: &[u8],
    l2: f64,
    dropout: Option<DropoutStream>,
) -> Result<(f64, Gradients), GraphError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(GraphError::EmptyDataset);
    }
    for &y in ys {
        if (y as usize) >= g.class_count() {
            return Err(GraphError::BadLabel {
                label: y,
                classes: g.class_count(),
            });
        }
    }

    let chunk_results: Vec<Result<(f64, Gradients), GraphError>> = xs
        .par_chunks(GRAD_CHUNK)
        .zip(ys.par_chunks(GRAD_CHUNK))
        .enumerate()
        .map(|(ci, (cxs, cys))| {
            let mut grads = Gradients::zeros_like(g);
            let mut loss = 0.0;
            for (si, (x, &label)) in cxs.iter().zip(cys).enumerate() {
                let pos = (ci * GRAD_CHUNK + si) as u64;
                let mut rng = dropout.map(|d| ChaCha8Rng::seed_from_u64(mix3(d.seed, d.step, pos)));
                loss += backprop_sample(g, x, label as usize, rng.as_mut(), &mut grads)?;
            }
            Ok((loss, grads))
        })
        .collect();

    let mut total = Gradients::zeros_like(g);
    let mut loss_sum = 0.0;
    for r in chunk_results {
        let (l, grad) = r?;
        loss_sum += l;
        total.add_assign(&grad);
    }
    let n = xs.len() as f64;
    total.scale(1.0 / n);
    // Fold the L2 term into the reported objective and its gradient.
    let mut loss = loss_sum / n;
    if l2 > 0.0 {
        loss += 0.5 * l2 * sum_sq_params(g);
    }
    Ok((loss, total))
}

fn apply_update(
    g: &mut NetGraph,
    grads: &Gradients,
    lr: f64,
    l2: f64,
    masks: Option<&WeightMasks>,
) {
    for idx in 0..g.node_count() {
        let Some((gw, gb)) = grads.get(idx) else {
            continue;
        };
        let (gw, gb) = (gw.clone(), gb.clone());
        match g.op_mut(idx) {
            LayerOp::Conv(w) => {
                for (v, gv) in w.kernel.data_mut().iter_mut().zip(gw.data()) {
                    *v -= lr * (gv + l2 * *v);
                }
                for (v, gv) in w.bias.data_mut().iter_mut().zip(gb.data()) {
                    *v -= lr * (gv + l2 * *v);
                }
            }
            LayerOp::Dense { weight, bias } => {
                for (v, gv) in weight.data_mut().iter_mut().zip(gw.data()) {
                    *v -= lr * (gv + l2 * *v);
                }
                for (v, gv) in bias.data_mut().iter_mut().zip(gb.data()) {
                    *v -= lr * (gv + l2 * *v);
                }
            }
            _ => {}
        }
    }
    if let Some(m) = masks {
        m.apply(g);
    }
}

/// One SGD step over a batch. Returns the pre-step mean batch loss.
pub fn backward_sgd_step(
    g: &mut NetGraph,
    xs: &[Tensor],
    ys: &[u8],
    cfg: &TrainConfig,
    step: u64,
) -> Result<f64, GraphError> {
    backward_sgd_step_masked(g, xs, ys, cfg, step, None)
}

pub fn backward_sgd_step_masked(
    g: &mut NetGraph,
    xs: &[Tensor],
    ys: &[u8],
    cfg: &TrainConfig,
    step: u64,
    masks: Option<&WeightMasks>,
) -> Result<f64, GraphError> {
    cfg.validate()?;
    let dropout = cfg.dropout.then_some(DropoutStream {
        seed: cfg.seed,
        step,
    });
    let (loss, grads) = gradients(g, xs, ys, cfg.l2, dropout)?;
    if !loss.is_finite() {
        return Err(GraphError::NonFiniteLoss);
    }
    apply_update(g, &grads, cfg.learning_rate, cfg.l2, masks);
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Epoch-driven SGD over a dataset, with optional per-epoch validation
/// accuracy and optional weight freezing masks.
pub fn train(
    g: &mut NetGraph,
    xs: &[Tensor],
    ys: &[u8],
    val: Option<(&[Tensor], &[u8])>,
    cfg: &TrainConfig,
    masks: Option<&WeightMasks>,
) -> Result<TrainHistory, GraphError> {
    cfg.validate()?;
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(GraphError::EmptyDataset);
    }
    let n = xs.len();
    let mut history = TrainHistory::default();
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(mix3(cfg.seed, SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let bx: Vec<Tensor> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<u8> = batch.iter().map(|&i| ys[i]).collect();
            let loss = backward_sgd_step_masked(g, &bx, &by, cfg, step, masks)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        let val_accuracy = match val {
            Some((vx, vy)) => Some(evaluate(g, vx, vy)?),
            None => None,
        };
        history.epochs.push(EpochStats {
            loss: loss_sum / n as f64,
            val_accuracy,
        });
    }
    Ok(history)
}

/// Classification accuracy in `[0, 1]`.
pub fn evaluate(g: &NetGraph, xs: &[Tensor], ys: &[u8]) -> Result<f64, GraphError> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(GraphError::EmptyDataset);
    }
    // Stream per sample rather than via forward_batch: retaining every
    // sample's full activation cache is needlessly heavy here.
    let preds: Vec<usize> = xs
        .par_iter()
        .map(|x| forward(g, x, None).map(|c| c.predicted_class(g)))
        .collect::<Result<_, _>>()?;
    let correct = preds.iter().zip(ys).filter(|(&p, &y)| p == y as usize).count();
    Ok(correct as f64 / xs.len() as f64)
}
