//! Structured pruning: auxiliary gates, per-node curvature scores, node
//! masks, and physical compaction.
//!
//! A gate is a scalar fixed at 1 per hidden output node (dense) or output
//! channel (conv), multiplying the pre-activation: `f(c ⊙ (Wx + b))`. Gates
//! are mathematically neutral, but they are learnable parameters, so the
//! gradient and curvature with respect to a gate proxy the importance of
//! the whole node. The node score `|(H_c g_c)_j|` differentiates with
//! respect to gates only — weights stay constant, matching the block
//! structure of the score's arguments.
//!
//! Compaction removes pruned output nodes physically: the node's weight
//! column, bias, and gate disappear from layer l, and the matching input
//! rows disappear from layer l+1 (at a conv-to-dense boundary, all spatial
//! positions of a pruned channel disappear). The result is a genuinely
//! smaller dense model needing no masks.

use crate::criteria::{pruned_count_for, ranking, Criterion, ScoreVector};
use crate::error::{CoreError, Result};
use crate::model::{Batch, Layer, LayerKind, Model};
use crate::tensor::Tensor;

/// Per-layer keep bits over output nodes/channels. `None` for layers that
/// are not gated (the final output layer).
#[derive(Clone, Debug)]
pub struct NodeMask {
    pub keep: Vec<Option<Vec<u8>>>,
    pub rho_nodes: f64,
}

impl NodeMask {
    pub fn pruned_nodes(&self) -> usize {
        self.keep
            .iter()
            .flatten()
            .map(|l| l.iter().filter(|&&k| k == 0).count())
            .sum()
    }

    pub fn total_gated_nodes(&self) -> usize {
        self.keep.iter().flatten().map(|l| l.len()).sum()
    }

    /// Fraction of gated nodes removed, exact integer arithmetic.
    pub fn node_sparsity(&self) -> f64 {
        let total = self.total_gated_nodes();
        if total == 0 {
            0.0
        } else {
            self.pruned_nodes() as f64 / total as f64
        }
    }
}

/// Attach all-ones gates to every layer except the final one. Idempotent;
/// outputs are unchanged bit-for-bit.
pub fn inject_gates(model: &mut Model) -> Result<()> {
    if model.layers.is_empty() {
        return Err(CoreError::StructuredUnsupported("model has no layers".into()));
    }
    let last = model.layers.len() - 1;
    for layer in model.layers.iter_mut().take(last) {
        if layer.gate.is_none() {
            layer.gate = Some(Tensor::ones(&[layer.out_dim]));
        }
    }
    Ok(())
}

/// (layer, node) pair for every gate, in flat gate order.
pub fn gate_layout(model: &Model) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        if let Some(g) = &layer.gate {
            for j in 0..g.numel() {
                out.push((li, j));
            }
        }
    }
    out
}

/// Per-gate importance `|(H_c g_c)_j|`: exact HVP in the gate-gradient
/// direction, weights held constant.
pub fn gate_scores(model: &Model, batch: &Batch) -> Result<ScoreVector> {
    if model.gate_count() == 0 {
        return Err(CoreError::StructuredUnsupported(
            "gate scoring requires injected gates".into(),
        ));
    }
    let lg = model.gate_grad_flat(batch)?;
    let batch_id = crate::criteria::batch_fingerprint(batch);
    if lg.grad.iter().all(|&g| g == 0.0) {
        return Ok(ScoreVector {
            values: vec![0.0; model.gate_count()],
            criterion: Criterion::Crop,
            batch_id,
            degenerate: true,
        });
    }
    let hg = model.gate_hvp_flat(batch, &lg.grad)?;
    Ok(ScoreVector {
        values: hg.iter().map(|h| h.abs()).collect(),
        criterion: Criterion::Crop,
        batch_id,
        degenerate: false,
    })
}

/// Global node ranking, lowest pruned; every layer keeps at least its
/// top-scoring node. Exactly `round(rho * gates)` nodes are pruned unless
/// protection caps the count on toy layers.
pub fn build_node_mask(model: &Model, scores: &ScoreVector, rho_nodes: f64) -> Result<NodeMask> {
    let layout = gate_layout(model);
    if scores.values.len() != layout.len() {
        return Err(CoreError::Contract(format!(
            "gate score vector has {} entries, model has {} gates",
            scores.values.len(),
            layout.len()
        )));
    }
    if !(0.0..1.0).contains(&rho_nodes) {
        return Err(CoreError::InfeasibleRatio {
            rho: rho_nodes,
            reason: "node ratio must satisfy 0 <= rho < 1".into(),
        });
    }
    let n = layout.len();
    let k = pruned_count_for(rho_nodes, n);

    // Protect each gated layer's top node (lowest node index on ties).
    let mut best: Vec<Option<usize>> = vec![None; model.layers.len()];
    for (g, &(li, _)) in layout.iter().enumerate() {
        match best[li] {
            None => best[li] = Some(g),
            Some(b) => {
                if scores.values[g] > scores.values[b] {
                    best[li] = Some(g);
                }
            }
        }
    }
    let mut protected = vec![false; n];
    for b in best.iter().flatten() {
        protected[*b] = true;
    }

    let pool: Vec<usize> = ranking(&scores.values)
        .into_iter()
        .filter(|&g| !protected[g])
        .collect();
    if pool.is_empty() && k > 0 {
        return Err(CoreError::InfeasibleRatio {
            rho: rho_nodes,
            reason: "every gated layer has a single node".into(),
        });
    }

    let mut keep: Vec<Option<Vec<u8>>> = model
        .layers
        .iter()
        .map(|l| l.gate.as_ref().map(|g| vec![1u8; g.numel()]))
        .collect();
    for &g in &pool[..k.min(pool.len())] {
        let (li, j) = layout[g];
        keep[li].as_mut().expect("gated layer")[j] = 0;
    }
    Ok(NodeMask { keep, rho_nodes })
}

/// Write a node mask into the gates (0/1 values): the masked-but-not-
/// compacted reference model.
pub fn apply_node_mask_as_gates(model: &mut Model, mask: &NodeMask) -> Result<()> {
    if mask.keep.len() != model.layers.len() {
        return Err(CoreError::Contract("node mask layer count mismatch".into()));
    }
    for (layer, keep) in model.layers.iter_mut().zip(mask.keep.iter()) {
        match (layer.gate.as_mut(), keep) {
            (Some(gate), Some(bits)) => {
                if gate.numel() != bits.len() {
                    return Err(CoreError::Contract("node mask width mismatch".into()));
                }
                for (g, &b) in gate.data_mut().iter_mut().zip(bits.iter()) {
                    *g = b as f64;
                }
            }
            (None, None) => {}
            _ => return Err(CoreError::Contract("node mask gating mismatch".into())),
        }
    }
    Ok(())
}

fn select<T: Copy>(xs: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| xs[i]).collect()
}

/// Physically remove pruned nodes. Returns a smaller model with all-ones
/// gates removed and the surviving unstructured mask entries carried over.
pub fn compact(model: &Model, mask: &NodeMask) -> Result<Model> {
    if mask.keep.len() != model.layers.len() {
        return Err(CoreError::Contract("node mask layer count mismatch".into()));
    }
    for (li, (layer, keep)) in model.layers.iter().zip(mask.keep.iter()).enumerate() {
        if let Some(bits) = keep {
            if bits.len() != layer.out_dim {
                return Err(CoreError::Contract(format!(
                    "layer {li}: node mask width {} != output count {}",
                    bits.len(),
                    layer.out_dim
                )));
            }
            if bits.iter().all(|&b| b == 0) {
                return Err(CoreError::InfeasibleRatio {
                    rho: mask.rho_nodes,
                    reason: format!("layer {li} would lose every node"),
                });
            }
        }
    }

    let spatial = model.layer_spatial_inputs();
    let mut layers = Vec::with_capacity(model.layers.len());
    // Kept input indices for the upcoming layer: feature indices for dense,
    // channel indices for conv. The first layer keeps its full input.
    let mut kept_in: Vec<usize> = (0..model.layers[0].in_dim).collect();

    for (li, layer) in model.layers.iter().enumerate() {
        let kept_out: Vec<usize> = match &mask.keep[li] {
            Some(bits) => bits
                .iter()
                .enumerate()
                .filter(|(_, &b)| b == 1)
                .map(|(j, _)| j)
                .collect(),
            None => (0..layer.out_dim).collect(),
        };

        let new_in = kept_in.len();
        let new_out = kept_out.len();
        let old_out = layer.out_dim;

        // Row indices of the 2-D weight to keep.
        let row_idx: Vec<usize> = match layer.kind {
            LayerKind::Dense => kept_in.clone(),
            LayerKind::Conv2d { kernel, .. } => {
                // Rows ordered (ky, kx, ci); keep rows whose channel is kept.
                let old_in = layer.in_dim;
                let mut rows = Vec::with_capacity(kernel * kernel * new_in);
                for pos in 0..kernel * kernel {
                    for &ci in &kept_in {
                        rows.push(pos * old_in + ci);
                    }
                }
                rows
            }
        };

        let old_w = layer.weight.data();
        let mut w = Vec::with_capacity(row_idx.len() * new_out);
        let mut wm = Vec::with_capacity(row_idx.len() * new_out);
        for &r in &row_idx {
            for &c in &kept_out {
                w.push(old_w[r * old_out + c]);
                wm.push(layer.weight_mask[r * old_out + c]);
            }
        }

        layers.push(Layer {
            kind: layer.kind,
            weight: Tensor::new(vec![row_idx.len(), new_out], w)?,
            bias: Tensor::new(vec![new_out], select(layer.bias.data(), &kept_out))?,
            weight_mask: wm,
            bias_mask: select(&layer.bias_mask, &kept_out),
            gate: None,
            activation: layer.activation,
            in_dim: new_in,
            out_dim: new_out,
        });

        // Input selection for the next layer.
        let next_is_dense = model
            .layers
            .get(li + 1)
            .map(|l| matches!(l.kind, LayerKind::Dense))
            .unwrap_or(false);
        kept_in = match layer.kind {
            LayerKind::Conv2d { kernel, stride } if next_is_dense => {
                // Flatten boundary: expand kept channels over all output
                // spatial positions, channel-last feature order.
                let (h, w_sp, _) = spatial[li].ok_or_else(|| {
                    CoreError::StructuredUnsupported("conv without spatial input".into())
                })?;
                let oh = (h - kernel) / stride + 1;
                let ow = (w_sp - kernel) / stride + 1;
                let mut feats = Vec::with_capacity(oh * ow * new_out);
                for pos in 0..oh * ow {
                    for &c in &kept_out {
                        feats.push(pos * old_out + c);
                    }
                }
                feats
            }
            _ => kept_out,
        };
    }

    let compacted = Model {
        layers,
        head: model.head,
        input_shape: model.input_shape.clone(),
    };
    compacted.validate()?;
    Ok(compacted)
}
