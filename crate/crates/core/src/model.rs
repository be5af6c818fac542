//! Maskable small architectures: MLPs with configurable widths and plain
//! conv chains (LeNet-style, no residuals).
//!
//! Every layer carries a binary weight mask; the forward pass always uses
//! `weight ⊙ mask`, so pruned entries cannot contribute even if the raw
//! value drifts. Hidden layers may additionally host an auxiliary gate: one
//! multiplicative scalar per output node (dense) or output channel (conv),
//! applied to the pre-activation as `f(c ⊙ (Wx + b))`. Gates are initialized
//! to ones and are mathematically neutral until a node mask zeroes them.
//!
//! Storage conventions: dense weights are `[in, out]` row-major (forward is
//! `X @ W`), conv weights are `[k*k*in_ch, out_ch]` matching im2col column
//! order `(ky, kx, c)`. Conv activations are channel-last, so flattening
//! into a dense layer is a pure reshape.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tape::{im2col_indices, mean_squared_error, softmax_cross_entropy, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Classification,
    Regression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d { kernel: usize, stride: usize },
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub kind: LayerKind,
    /// Dense: `[in, out]`; conv: `[k*k*in_ch, out_ch]`.
    pub weight: Tensor,
    pub bias: Tensor,
    /// Binary, same element count as `weight`.
    pub weight_mask: Vec<f64>,
    /// Binary, same element count as `bias`.
    pub bias_mask: Vec<f64>,
    /// One scalar per output node/channel, ones at injection.
    pub gate: Option<Tensor>,
    pub activation: Activation,
    /// Dense: input features; conv: input channels.
    pub in_dim: usize,
    /// Dense: output features; conv: output channels.
    pub out_dim: usize,
}

impl Layer {
    pub fn weight_numel(&self) -> usize {
        self.weight.numel()
    }

    fn expected_weight_numel(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.in_dim * self.out_dim,
            LayerKind::Conv2d { kernel, .. } => kernel * kernel * self.in_dim * self.out_dim,
        }
    }
}

/// Targets for one batch.
#[derive(Clone, Debug)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

/// Borrowed view of one scoring/training batch.
#[derive(Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a Tensor,
    pub targets: &'a Targets,
}

/// Whether parameters enter the tape as differentiable variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarMode {
    Var,
    Const,
}

#[derive(Clone, Copy, Debug)]
pub struct GraphOpts {
    pub params: VarMode,
    pub gates: VarMode,
}

impl GraphOpts {
    pub fn params_only() -> Self {
        GraphOpts {
            params: VarMode::Var,
            gates: VarMode::Const,
        }
    }

    pub fn gates_only() -> Self {
        GraphOpts {
            params: VarMode::Const,
            gates: VarMode::Var,
        }
    }

    pub fn inference() -> Self {
        GraphOpts {
            params: VarMode::Const,
            gates: VarMode::Const,
        }
    }
}

/// Node ids of interest from one forward build.
pub struct ModelGraph {
    pub output: NodeId,
    /// One id per parameter tensor, ordered (layer0 weight, layer0 bias, ...).
    pub param_ids: Vec<NodeId>,
    /// One id per gated layer, in layer order.
    pub gate_ids: Vec<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub head: Head,
    /// `[features]` for dense inputs, `[h, w, c]` channel-last for images.
    pub input_shape: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTensor {
    Weight,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub tensor: ParamTensor,
    pub offset: usize,
}

/// Bijection between flat global parameter indices and
/// (layer, tensor, offset) triples, plus the rankable sub-view used for
/// pruning. Biases are excluded from ranking unless requested: pruning the
/// only bias of a nearly-dead unit at extreme ratios creates artifacts, so
/// ranking covers weights by default.
#[derive(Clone, Debug)]
pub struct ParamIndexMap {
    refs: Vec<ParamRef>,
    rankable: Vec<usize>,
    rankable_layer: Vec<usize>,
    include_biases: bool,
}

impl ParamIndexMap {
    pub fn full_len(&self) -> usize {
        self.refs.len()
    }

    pub fn rankable_len(&self) -> usize {
        self.rankable.len()
    }

    pub fn full_ref(&self, i: usize) -> ParamRef {
        self.refs[i]
    }

    pub fn rankable_to_full(&self, r: usize) -> usize {
        self.rankable[r]
    }

    pub fn rankable_layer(&self, r: usize) -> usize {
        self.rankable_layer[r]
    }

    pub fn includes_biases(&self) -> bool {
        self.include_biases
    }
}

fn kaiming_uniform(rng: &mut Rng, fan_in: usize, numel: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..numel).map(|_| rng.uniform_range(-bound, bound)).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Model {
    /// Fully connected network `in -> hidden... -> out`. Hidden layers use
    /// `activation`; the output layer is linear.
    pub fn mlp(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        head: Head,
        rng: &mut Rng,
    ) -> Result<Model> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            let (din, dout) = (dims[i], dims[i + 1]);
            if din == 0 || dout == 0 {
                return Err(CoreError::Config("layer widths must be positive".into()));
            }
            let last = i == dims.len() - 2;
            layers.push(Layer {
                kind: LayerKind::Dense,
                weight: Tensor::new(vec![din, dout], kaiming_uniform(rng, din, din * dout))?,
                bias: Tensor::zeros(&[dout]),
                weight_mask: vec![1.0; din * dout],
                bias_mask: vec![1.0; dout],
                gate: None,
                activation: if last { Activation::Identity } else { activation },
                in_dim: din,
                out_dim: dout,
            });
        }
        let model = Model {
            layers,
            head,
            input_shape: vec![in_dim],
        };
        model.validate()?;
        Ok(model)
    }

    /// Plain conv chain followed by dense layers. Input is channel-last
    /// `[h, w, c]`; valid padding throughout.
    pub fn cnn(
        input: (usize, usize, usize),
        convs: &[ConvSpec],
        hidden_dense: &[usize],
        out_dim: usize,
        activation: Activation,
        head: Head,
        rng: &mut Rng,
    ) -> Result<Model> {
        let (mut h, mut w, mut c) = input;
        let mut layers = Vec::new();
        for spec in convs {
            if spec.kernel == 0 || spec.stride == 0 || spec.kernel > h || spec.kernel > w {
                return Err(CoreError::Config(format!(
                    "conv kernel {}x{} stride {} does not fit {}x{} input",
                    spec.kernel, spec.kernel, spec.stride, h, w
                )));
            }
            let fan_in = spec.kernel * spec.kernel * c;
            layers.push(Layer {
                kind: LayerKind::Conv2d {
                    kernel: spec.kernel,
                    stride: spec.stride,
                },
                weight: Tensor::new(
                    vec![fan_in, spec.out_channels],
                    kaiming_uniform(rng, fan_in, fan_in * spec.out_channels),
                )?,
                bias: Tensor::zeros(&[spec.out_channels]),
                weight_mask: vec![1.0; fan_in * spec.out_channels],
                bias_mask: vec![1.0; spec.out_channels],
                gate: None,
                activation,
                in_dim: c,
                out_dim: spec.out_channels,
            });
            h = (h - spec.kernel) / spec.stride + 1;
            w = (w - spec.kernel) / spec.stride + 1;
            c = spec.out_channels;
        }
        let mut din = h * w * c;
        let mut dims = hidden_dense.to_vec();
        dims.push(out_dim);
        for (i, &dout) in dims.iter().enumerate() {
            let last = i == dims.len() - 1;
            layers.push(Layer {
                kind: LayerKind::Dense,
                weight: Tensor::new(vec![din, dout], kaiming_uniform(rng, din, din * dout))?,
                bias: Tensor::zeros(&[dout]),
                weight_mask: vec![1.0; din * dout],
                bias_mask: vec![1.0; dout],
                gate: None,
                activation: if last { Activation::Identity } else { activation },
                in_dim: din,
                out_dim: dout,
            });
            din = dout;
        }
        let model = Model {
            layers,
            head,
            input_shape: vec![input.0, input.1, input.2],
        };
        model.validate()?;
        Ok(model)
    }

    /// Check shape conformability, mask binarity, and gate lengths.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(CoreError::Contract("model has no layers".into()));
        }
        let mut spatial = match self.input_shape.len() {
            1 => None,
            3 => Some((self.input_shape[0], self.input_shape[1], self.input_shape[2])),
            _ => {
                return Err(CoreError::Contract(format!(
                    "input shape {:?} must be [features] or [h, w, c]",
                    self.input_shape
                )))
            }
        };
        let mut features = if spatial.is_none() { self.input_shape[0] } else { 0 };
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.weight.numel() != layer.expected_weight_numel() {
                return Err(CoreError::Contract(format!(
                    "layer {i}: weight has {} elements, expected {}",
                    layer.weight.numel(),
                    layer.expected_weight_numel()
                )));
            }
            if layer.bias.numel() != layer.out_dim {
                return Err(CoreError::Contract(format!("layer {i}: bias length mismatch")));
            }
            if layer.weight_mask.len() != layer.weight.numel()
                || layer.bias_mask.len() != layer.bias.numel()
            {
                return Err(CoreError::Contract(format!("layer {i}: mask length mismatch")));
            }
            if layer
                .weight_mask
                .iter()
                .chain(layer.bias_mask.iter())
                .any(|&m| m != 0.0 && m != 1.0)
            {
                return Err(CoreError::Contract(format!("layer {i}: mask entries must be 0 or 1")));
            }
            if let Some(g) = &layer.gate {
                if g.numel() != layer.out_dim {
                    return Err(CoreError::Contract(format!(
                        "layer {i}: gate length {} != output count {}",
                        g.numel(),
                        layer.out_dim
                    )));
                }
            }
            match layer.kind {
                LayerKind::Dense => {
                    if let Some((h, w, c)) = spatial.take() {
                        features = h * w * c;
                    }
                    if layer.in_dim != features {
                        return Err(CoreError::Contract(format!(
                            "layer {i}: expects {} input features, previous layer provides {features}",
                            layer.in_dim
                        )));
                    }
                    features = layer.out_dim;
                }
                LayerKind::Conv2d { kernel, stride } => {
                    let Some((h, w, c)) = spatial else {
                        return Err(CoreError::StructuredUnsupported(format!(
                            "layer {i}: conv after flatten is not supported"
                        )));
                    };
                    if c != layer.in_dim || kernel > h || kernel > w || stride == 0 {
                        return Err(CoreError::Contract(format!(
                            "layer {i}: conv geometry invalid for input {h}x{w}x{c}"
                        )));
                    }
                    spatial = Some(((h - kernel) / stride + 1, (w - kernel) / stride + 1, layer.out_dim));
                }
            }
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn input_features(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial input dims `(h, w, c)` of each layer; `None` once flattened.
    pub fn layer_spatial_inputs(&self) -> Vec<Option<(usize, usize, usize)>> {
        let mut spatial = if self.input_shape.len() == 3 {
            Some((self.input_shape[0], self.input_shape[1], self.input_shape[2]))
        } else {
            None
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            out.push(spatial);
            match layer.kind {
                LayerKind::Dense => spatial = None,
                LayerKind::Conv2d { kernel, stride } => {
                    let (h, w, _) = spatial.expect("validated model");
                    spatial = Some(((h - kernel) / stride + 1, (w - kernel) / stride + 1, layer.out_dim));
                }
            }
        }
        out
    }

    /// Build the forward graph on a tape, recording masks and gates as in
    /// the gated forward `f(c ⊙ (Wx + b))`.
    pub fn build_graph(&self, tape: &mut Tape, inputs: &Tensor, opts: GraphOpts) -> Result<ModelGraph> {
        if inputs.shape().len() != 2 || inputs.shape()[1] != self.input_features() {
            return Err(CoreError::Dimension {
                op: "model_forward",
                left: inputs.shape().to_vec(),
                right: vec![self.input_features()],
            });
        }
        let batch = inputs.shape()[0];
        let mut spatial = if self.input_shape.len() == 3 {
            Some((self.input_shape[0], self.input_shape[1], self.input_shape[2]))
        } else {
            None
        };
        let mut cur = tape.constant(inputs);
        let mut param_ids = Vec::new();
        let mut gate_ids = Vec::new();

        for layer in &self.layers {
            let w_node = match opts.params {
                VarMode::Var => tape.var(&layer.weight),
                VarMode::Const => tape.constant(&layer.weight),
            };
            let b_node = match opts.params {
                VarMode::Var => tape.var(&layer.bias),
                VarMode::Const => tape.constant(&layer.bias),
            };
            param_ids.push(w_node);
            param_ids.push(b_node);

            let wmask = tape.constant_from(layer.weight.shape().to_vec(), layer.weight_mask.clone());
            let w_eff = tape.mul(w_node, wmask)?;
            let bmask = tape.constant_from(layer.bias.shape().to_vec(), layer.bias_mask.clone());
            let b_eff = tape.mul(b_node, bmask)?;

            let (pre_rows, z) = match layer.kind {
                LayerKind::Dense => {
                    if let Some((h, w, c)) = spatial.take() {
                        cur = tape.reshape(cur, vec![batch, h * w * c])?;
                    }
                    (batch, tape.matmul(cur, w_eff)?)
                }
                LayerKind::Conv2d { kernel, stride } => {
                    let (h, w, c) = spatial.ok_or_else(|| {
                        CoreError::StructuredUnsupported("conv after flatten".into())
                    })?;
                    let (idx, oh, ow) = im2col_indices(batch, h, w, c, kernel, stride)?;
                    let rows = batch * oh * ow;
                    let cols = tape.gather(cur, Arc::new(idx), vec![rows, kernel * kernel * c])?;
                    spatial = Some((oh, ow, layer.out_dim));
                    (rows, tape.matmul(cols, w_eff)?)
                }
            };

            let bias_rows = tape.col_broadcast(b_eff, pre_rows)?;
            let mut pre = tape.add(z, bias_rows)?;

            if let Some(gate) = &layer.gate {
                let g_node = match opts.gates {
                    VarMode::Var => tape.var(gate),
                    VarMode::Const => tape.constant(gate),
                };
                gate_ids.push(g_node);
                let g_rows = tape.col_broadcast(g_node, pre_rows)?;
                pre = tape.mul(pre, g_rows)?;
            }

            cur = match layer.activation {
                Activation::Relu => tape.relu(pre)?,
                Activation::Tanh => tape.tanh(pre)?,
                Activation::Identity => pre,
            };
        }

        if spatial.is_some() {
            // All-conv model: expose outputs as [batch, features].
            let feats: usize = tape.value(cur).len() / batch;
            cur = tape.reshape(cur, vec![batch, feats])?;
        }

        Ok(ModelGraph {
            output: cur,
            param_ids,
            gate_ids,
        })
    }

    /// Forward + head loss on the tape. Cross-entropy for classification,
    /// MSE for regression, mean over the batch.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        batch: &Batch,
        opts: GraphOpts,
    ) -> Result<(ModelGraph, NodeId)> {
        let graph = self.build_graph(tape, batch.inputs, opts)?;
        let loss = self.attach_loss(tape, graph.output, batch.targets)?;
        Ok((graph, loss))
    }

    /// Loss node for an already-built output node.
    pub fn attach_loss(&self, tape: &mut Tape, output: NodeId, targets: &Targets) -> Result<NodeId> {
        match (self.head, targets) {
            (Head::Classification, Targets::Labels(labels)) => {
                softmax_cross_entropy(tape, output, labels)
            }
            (Head::Regression, Targets::Values(values)) => {
                if values.shape() != tape.shape(output) {
                    return Err(CoreError::Dimension {
                        op: "mse",
                        left: tape.shape(output).to_vec(),
                        right: values.shape().to_vec(),
                    });
                }
                let t = tape.constant(values);
                mean_squared_error(tape, output, t)
            }
            _ => Err(CoreError::Data(
                "target type does not match model head".into(),
            )),
        }
    }

    /// Inference without gradients.
    pub fn forward(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let graph = self.build_graph(&mut tape, inputs, GraphOpts::inference())?;
        Ok(tape.to_tensor(graph.output))
    }

    /// Scalar loss value for a batch.
    pub fn loss_value(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let (_, loss) = self.build_loss(&mut tape, batch, GraphOpts::inference())?;
        Ok(tape.value(loss)[0])
    }

    // ---- parameter flattening ------------------------------------------

    /// Stable bijection between flat indices and parameter slots.
    pub fn param_index_map(&self, include_biases: bool) -> ParamIndexMap {
        let mut refs = Vec::new();
        let mut rankable = Vec::new();
        let mut rankable_layer = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            for off in 0..layer.weight.numel() {
                rankable.push(refs.len());
                rankable_layer.push(li);
                refs.push(ParamRef {
                    layer: li,
                    tensor: ParamTensor::Weight,
                    offset: off,
                });
            }
            for off in 0..layer.bias.numel() {
                if include_biases {
                    rankable.push(refs.len());
                    rankable_layer.push(li);
                }
                refs.push(ParamRef {
                    layer: li,
                    tensor: ParamTensor::Bias,
                    offset: off,
                });
            }
        }
        ParamIndexMap {
            refs,
            rankable,
            rankable_layer,
            include_biases,
        }
    }

    /// All parameters in map order (weights then bias per layer).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(layer.bias.data());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum();
        if flat.len() != expected {
            return Err(CoreError::Contract(format!(
                "flat parameter vector has {} entries, model needs {expected}",
                flat.len()
            )));
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let wn = layer.weight.numel();
            layer.weight.data_mut().copy_from_slice(&flat[off..off + wn]);
            off += wn;
            let bn = layer.bias.numel();
            layer.bias.data_mut().copy_from_slice(&flat[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    /// Values of the rankable parameters, in rankable order.
    pub fn rankable_values(&self, map: &ParamIndexMap) -> Vec<f64> {
        let flat = self.flatten_params();
        map.rankable.iter().map(|&i| flat[i]).collect()
    }

    /// Apply keep bits over the rankable view: masks updated, pruned
    /// entries zeroed in place.
    pub fn apply_keep(&mut self, map: &ParamIndexMap, keep: &[u8]) -> Result<()> {
        if keep.len() != map.rankable_len() {
            return Err(CoreError::Contract(format!(
                "keep vector has {} bits, rankable count is {}",
                keep.len(),
                map.rankable_len()
            )));
        }
        for (r, &k) in keep.iter().enumerate() {
            let pref = map.refs[map.rankable[r]];
            let layer = &mut self.layers[pref.layer];
            let m = if k == 0 { 0.0 } else { 1.0 };
            match pref.tensor {
                ParamTensor::Weight => {
                    layer.weight_mask[pref.offset] = m;
                    if k == 0 {
                        layer.weight.data_mut()[pref.offset] = 0.0;
                    }
                }
                ParamTensor::Bias => {
                    layer.bias_mask[pref.offset] = m;
                    if k == 0 {
                        layer.bias.data_mut()[pref.offset] = 0.0;
                    }
                }
            }
        }
        Ok(())
    }

    /// Force masked entries of the raw parameters back to zero (used after
    /// optimizer steps so checkpoints stay clean).
    pub fn enforce_masks(&mut self) {
        for layer in &mut self.layers {
            for (v, &m) in layer.weight.data_mut().iter_mut().zip(layer.weight_mask.iter()) {
                if m == 0.0 {
                    *v = 0.0;
                }
            }
            for (v, &m) in layer.bias.data_mut().iter_mut().zip(layer.bias_mask.iter()) {
                if m == 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// Parameters surviving their masks.
    pub fn nonzero_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight_mask.iter().filter(|&&m| m != 0.0).count()
                    + l.bias_mask.iter().filter(|&&m| m != 0.0).count()
            })
            .sum()
    }

    /// `1 - kept/total` over weight-mask entries, exact integer arithmetic.
    pub fn weight_sparsity(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.weight_mask.len()).sum();
        let kept: usize = self
            .layers
            .iter()
            .map(|l| l.weight_mask.iter().filter(|&&m| m != 0.0).count())
            .sum();
        if total == 0 {
            0.0
        } else {
            (total - kept) as f64 / total as f64
        }
    }

    /// Number of gate scalars currently attached.
    pub fn gate_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.gate.as_ref()).map(|g| g.numel()).sum()
    }

    /// Split a flat parameter vector into per-tensor chunks in map order.
    pub fn split_flat(&self, flat: &[f64]) -> Result<Vec<Tensor>> {
        let mut out = Vec::new();
        let mut off = 0;
        for layer in &self.layers {
            for (shape, numel) in [
                (layer.weight.shape().to_vec(), layer.weight.numel()),
                (layer.bias.shape().to_vec(), layer.bias.numel()),
            ] {
                if off + numel > flat.len() {
                    return Err(CoreError::Contract("flat vector too short".into()));
                }
                out.push(Tensor::new(shape, flat[off..off + numel].to_vec())?);
                off += numel;
            }
        }
        if off != flat.len() {
            return Err(CoreError::Contract("flat vector too long".into()));
        }
        Ok(out)
    }

    /// Loss and its flat gradient over all parameters (map order).
    pub fn loss_grad_flat(&self, batch: &Batch) -> Result<LossGrad> {
        let mut tape = Tape::new();
        let (graph, loss) = self.build_loss(&mut tape, batch, GraphOpts::params_only())?;
        let g = tape.grad(loss, &graph.param_ids)?;
        let mut grad = Vec::with_capacity(self.param_count());
        for t in &g.grads {
            grad.extend_from_slice(t.data());
        }
        Ok(LossGrad {
            loss: tape.value(loss)[0],
            grad,
            any_unreachable: g.unreachable.iter().any(|&u| u),
        })
    }

    /// Exact Hessian-vector product over all parameters for a flat `v`.
    pub fn loss_hvp_flat(&self, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        let v_tensors = self.split_flat(v)?;
        let mut tape = Tape::new();
        let (graph, loss) = self.build_loss(&mut tape, batch, GraphOpts::params_only())?;
        let hv = tape.hvp(loss, &graph.param_ids, &v_tensors)?;
        let mut out = Vec::with_capacity(v.len());
        for t in &hv {
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }

    /// Gradient with respect to the auxiliary gates only (weights constant),
    /// concatenated in layer order.
    pub fn gate_grad_flat(&self, batch: &Batch) -> Result<LossGrad> {
        let mut tape = Tape::new();
        let (graph, loss) = self.build_loss(&mut tape, batch, GraphOpts::gates_only())?;
        let g = tape.grad(loss, &graph.gate_ids)?;
        let mut grad = Vec::new();
        for t in &g.grads {
            grad.extend_from_slice(t.data());
        }
        Ok(LossGrad {
            loss: tape.value(loss)[0],
            grad,
            any_unreachable: g.unreachable.iter().any(|&u| u),
        })
    }

    /// Exact HVP with respect to the gates only.
    pub fn gate_hvp_flat(&self, batch: &Batch, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.gate_count() {
            return Err(CoreError::Contract(format!(
                "gate direction has {} entries, model has {} gates",
                v.len(),
                self.gate_count()
            )));
        }
        let mut v_tensors = Vec::new();
        let mut off = 0;
        for layer in &self.layers {
            if let Some(g) = &layer.gate {
                v_tensors.push(Tensor::new(g.shape().to_vec(), v[off..off + g.numel()].to_vec())?);
                off += g.numel();
            }
        }
        let mut tape = Tape::new();
        let (graph, loss) = self.build_loss(&mut tape, batch, GraphOpts::gates_only())?;
        let hv = tape.hvp(loss, &graph.gate_ids, &v_tensors)?;
        let mut out = Vec::with_capacity(v.len());
        for t in &hv {
            out.extend_from_slice(t.data());
        }
        Ok(out)
    }
}

/// Loss value plus flat gradient.
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub any_unreachable: bool,
}

/// Classification accuracy of logits against labels.
pub fn accuracy(outputs: &Tensor, labels: &[usize]) -> f64 {
    let k = outputs.shape()[1];
    let n = outputs.shape()[0];
    let mut correct = 0usize;
    for (s, &label) in labels.iter().enumerate().take(n) {
        let row = &outputs.data()[s * k..(s + 1) * k];
        let mut best = 0;
        for (j, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::PlainMlp;

    fn tiny_mlp(seed: u64) -> Model {
        let mut rng = Rng::seed_from_u64(seed);
        Model::mlp(2, &[3], 2, Activation::Relu, Head::Classification, &mut rng).unwrap()
    }

    #[test]
    fn gate_of_ones_is_bit_exact() {
        let mut model = tiny_mlp(1);
        let inputs = Tensor::new(vec![4, 2], vec![0.3, -0.5, 1.0, 2.0, -1.0, 0.1, 0.7, 0.9]).unwrap();
        let before = model.forward(&inputs).unwrap();
        for layer in model.layers.iter_mut().take(1) {
            layer.gate = Some(Tensor::ones(&[layer.out_dim]));
        }
        let after = model.forward(&inputs).unwrap();
        for (a, b) in before.data().iter().zip(after.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn masked_column_leaves_bias() {
        // Identity activation; zero every weight feeding output node 1.
        let mut rng = Rng::seed_from_u64(3);
        let mut model =
            Model::mlp(2, &[], 2, Activation::Identity, Head::Regression, &mut rng).unwrap();
        model.layers[0].bias.data_mut()[1] = 0.25;
        for i in 0..2 {
            model.layers[0].weight_mask[i * 2 + 1] = 0.0;
        }
        let out = model
            .forward(&Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(out.data()[1], 0.25);
    }

    #[test]
    fn gate_zeroing_example() {
        // dense(2->2), identity weights, gates (1,0), input (3,5) -> (3,0)
        let mut rng = Rng::seed_from_u64(0);
        let mut model =
            Model::mlp(2, &[], 2, Activation::Identity, Head::Regression, &mut rng).unwrap();
        model.layers[0]
            .weight
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        model.layers[0].gate = Some(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let out = model
            .forward(&Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap())
            .unwrap();
        assert_eq!(out.data(), &[3.0, 0.0]);
    }

    #[test]
    fn masked_forward_equals_literal_zeroing() {
        let mut rng = Rng::seed_from_u64(11);
        let mut masked = Model::mlp(3, &[5, 4], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        // Pseudo-random mask pattern.
        let mut bit = 0u32;
        for layer in &mut masked.layers {
            for m in layer.weight_mask.iter_mut() {
                bit = bit.wrapping_mul(1664525).wrapping_add(1013904223);
                if bit & 4 != 0 {
                    *m = 0.0;
                }
            }
        }
        let mut zeroed = masked.clone();
        for layer in &mut zeroed.layers {
            let mask = layer.weight_mask.clone();
            for (v, m) in layer.weight.data_mut().iter_mut().zip(mask) {
                *v *= m;
            }
            layer.weight_mask.fill(1.0);
        }
        let inputs = Tensor::from_fn(&[6, 3], |i| (i as f64) * 0.1 - 0.4);
        let a = masked.forward(&inputs).unwrap();
        let b = zeroed.forward(&inputs).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_perfect_regression_fit_is_zero() {
        let mut rng = Rng::seed_from_u64(5);
        let model = Model::mlp(1, &[], 1, Activation::Identity, Head::Regression, &mut rng).unwrap();
        let inputs = Tensor::new(vec![3, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let targets = Targets::Values(model.forward(&inputs).unwrap());
        let loss = model
            .loss_value(&Batch { inputs: &inputs, targets: &targets })
            .unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn loss_uniform_two_class() {
        let mut rng = Rng::seed_from_u64(5);
        let mut model = Model::mlp(2, &[], 2, Activation::Identity, Head::Classification, &mut rng).unwrap();
        model.layers[0].weight.data_mut().fill(0.0);
        let inputs = Tensor::new(vec![2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let targets = Targets::Labels(vec![0, 1]);
        let loss = model
            .loss_value(&Batch { inputs: &inputs, targets: &targets })
            .unwrap();
        assert!((loss - (2.0f64).ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn loss_matches_straight_line_reimplementation() {
        // Duplicate-path oracle: plain-loop MLP forward + CE, no tape,
        // evaluated on a fixed two-moons batch.
        let mut rng = Rng::seed_from_u64(7);
        let model = Model::mlp(2, &[8, 6], 2, Activation::Tanh, Head::Classification, &mut rng).unwrap();
        let ds = crate::data::two_moons(64, 0.1, 42);
        let (inputs, targets) = ds.train_batch();
        let Targets::Labels(labels) = &targets else { unreachable!() };
        let got = model
            .loss_value(&Batch { inputs: &inputs, targets: &targets })
            .unwrap();
        let plain = PlainMlp { widths: vec![2, 8, 6, 2], tanh_hidden: true };
        let want = plain.cross_entropy_loss(
            &model.flatten_params(),
            inputs.data(),
            labels,
            inputs.shape()[0],
        );
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn param_index_map_counts_and_roundtrip() {
        let mut rng = Rng::seed_from_u64(2);
        let mut model = Model::mlp(2, &[3], 1, Activation::Relu, Head::Regression, &mut rng).unwrap();
        let map = model.param_index_map(false);
        assert_eq!(map.full_len(), 2 * 3 + 3 + 3 + 1);
        assert_eq!(map.rankable_len(), 2 * 3 + 3);

        let flat = model.flatten_params();
        model.set_params(&flat).unwrap();
        let again = model.flatten_params();
        for (a, b) in flat.iter().zip(again.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn param_index_map_stable_under_masking() {
        let mut rng = Rng::seed_from_u64(2);
        let mut model = Model::mlp(2, &[3], 1, Activation::Relu, Head::Regression, &mut rng).unwrap();
        let before = model.param_index_map(false);
        let keep: Vec<u8> = (0..before.rankable_len()).map(|i| (i % 2) as u8).collect();
        model.apply_keep(&before, &keep).unwrap();
        let after = model.param_index_map(false);
        assert_eq!(before.refs, after.refs);
        assert_eq!(before.rankable, after.rankable);
    }

    #[test]
    fn weight_sparsity_exact_fraction() {
        let mut rng = Rng::seed_from_u64(2);
        let mut model = Model::mlp(2, &[3], 1, Activation::Relu, Head::Regression, &mut rng).unwrap();
        let map = model.param_index_map(false);
        let mut keep = vec![1u8; map.rankable_len()];
        keep[0] = 0;
        keep[4] = 0;
        keep[7] = 0;
        model.apply_keep(&map, &keep).unwrap();
        assert_eq!(model.weight_sparsity(), 3.0 / 9.0);
    }

    #[test]
    fn cnn_forward_shapes_and_flatten() {
        let mut rng = Rng::seed_from_u64(13);
        let model = Model::cnn(
            (6, 6, 1),
            &[ConvSpec { out_channels: 3, kernel: 3, stride: 1 }],
            &[5],
            2,
            Activation::Relu,
            Head::Classification,
            &mut rng,
        )
        .unwrap();
        let inputs = Tensor::from_fn(&[2, 36], |i| (i as f64 * 0.01).sin());
        let out = model.forward(&inputs).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
    }

    #[test]
    fn forward_rejects_bad_input_width() {
        let model = tiny_mlp(1);
        let bad = Tensor::zeros(&[4, 3]);
        assert!(matches!(
            model.forward(&bad),
            Err(CoreError::Dimension { .. })
        ));
    }
}
