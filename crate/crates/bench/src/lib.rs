//! Shared fixtures for the benchmark targets.

use earlycrop_core::model::{Activation, Batch, GraphOpts, Head, Model, Targets};
use earlycrop_core::rng::Rng;
use earlycrop_core::structured::{self, NodeMask};
use earlycrop_core::tape::Tape;
use earlycrop_core::tensor::Tensor;

/// Reference MLP for timing comparisons.
pub fn reference_mlp(width: usize, seed: u64) -> Model {
    let mut rng = Rng::seed_from_u64(seed);
    Model::mlp(100, &[width, width], 10, Activation::Relu, Head::Classification, &mut rng).unwrap()
}

/// Node mask removing a fraction of every hidden layer, lowest indices first.
pub fn uniform_node_mask(model: &Model, fraction: f64) -> NodeMask {
    let keep = model
        .layers
        .iter()
        .map(|l| {
            l.gate.as_ref().map(|g| {
                let n = g.numel();
                let pruned = (fraction * n as f64).round() as usize;
                (0..n).map(|j| if j < pruned { 0u8 } else { 1u8 }).collect()
            })
        })
        .collect();
    NodeMask {
        keep,
        rho_nodes: fraction,
    }
}

/// A gated-masked model and its physically compacted equivalent.
pub fn masked_and_compacted(width: usize, fraction: f64, seed: u64) -> (Model, Model) {
    let mut model = reference_mlp(width, seed);
    structured::inject_gates(&mut model).unwrap();
    let mask = uniform_node_mask(&model, fraction);
    let compacted = structured::compact(&model, &mask).unwrap();
    let mut masked = model;
    structured::apply_node_mask_as_gates(&mut masked, &mask).unwrap();
    (masked, compacted)
}

pub fn random_batch(batch: usize, seed: u64) -> (Tensor, Targets) {
    let mut rng = Rng::seed_from_u64(seed);
    let inputs = Tensor::from_fn(&[batch, 100], |_| rng.normal());
    let labels = (0..batch).map(|_| rng.next_below(10) as usize).collect();
    (inputs, Targets::Labels(labels))
}

/// One forward + backward pass; the quantity the batch-time metric reports.
pub fn forward_backward(model: &Model, inputs: &Tensor, targets: &Targets) -> f64 {
    let mut tape = Tape::new();
    let batch = Batch { inputs, targets };
    let (graph, loss) = model.build_loss(&mut tape, &batch, GraphOpts::params_only()).unwrap();
    let g = tape.grad(loss, &graph.param_ids).unwrap();
    g.grads.iter().map(|t| t.data().iter().sum::<f64>()).sum()
}
