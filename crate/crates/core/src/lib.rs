//! Structured neuron/filter-level pruning toolkit. A trained network is
//! scored in its last hidden layer with per-neuron discriminant ratios,
//! the surviving utility is traced backwards through the graph by
//! deconvolution, and layers are pruned along both the filter and channel
//! dimensions, then retrained. Baseline pruners (global weight magnitude,
//! per-layer filter norm) and parameter/FLOP accounting round out the
//! experiment surface.

pub mod arch;
pub mod count;
pub mod dataset;
pub mod deconv;
pub mod graph;
pub mod lda;
pub mod prune;
pub mod sweep;
pub mod tensor;

pub use graph::{NetGraph, TrainConfig};
pub use tensor::{ConvWeights, PoolSwitches, Tensor};
