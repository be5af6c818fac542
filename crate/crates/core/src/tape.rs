//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every forward op appends a node holding its eagerly computed values. The
//! backward pass does not write raw adjoint buffers: it *builds new tape
//! nodes* for every adjoint using the same op set. A gradient is therefore
//! itself a differentiable tape expression, and differentiating the scalar
//! `<g, v>` a second time yields an exact Hessian-vector product — no finite
//! differences anywhere in the scoring path.
//!
//! Piecewise-linear kinks (the relu mask, the row-max shift inside the
//! softmax cross-entropy) enter the backward graph as constant leaves. Their
//! almost-everywhere derivative is zero, which is the standard convention
//! for exact second-order products through relu networks.
//!
//! A tape is single-threaded. Distinct tapes share nothing and may run on
//! distinct threads concurrently; index buffers are held in `Arc` so nodes
//! stay cheap to clone and the tape stays `Send`.

use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::{numel_of, Tensor};

/// Handle to a node on a tape. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Inputs are node ids on the same tape.
#[derive(Clone, Debug)]
enum Op {
    /// Variable or constant input; no inputs of its own.
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [m,k] @ [k,n] -> [m,n]
    Matmul(NodeId, NodeId),
    /// 2-D transpose.
    Transpose(NodeId),
    /// Multiply by a compile-time constant scalar.
    Scale(NodeId, f64),
    Exp(NodeId),
    Ln(NodeId),
    Recip(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Sum of all elements -> scalar [1].
    SumAll(NodeId),
    /// Scalar [1] -> constant-filled tensor of the node's shape.
    Fill(NodeId),
    /// [m,n] -> [m]; sums each row.
    RowSum(NodeId),
    /// [m] -> [m,n]; repeats each entry across its row.
    RowBroadcast(NodeId),
    /// [m,n] -> [n]; sums each column.
    ColSum(NodeId),
    /// [n] -> [m,n]; repeats the vector for every row.
    ColBroadcast(NodeId),
    /// [m,n] with per-row column picks -> [m].
    PickPerRow(NodeId, Arc<Vec<usize>>),
    /// [m] scattered into [m,n] at per-row columns; other entries zero.
    ScatterPerRow(NodeId, Arc<Vec<usize>>),
    /// out[j] = in[idx[j]]; output shape on the node.
    Gather(NodeId, Arc<Vec<usize>>),
    /// out[idx[j]] += in[j]; output shape on the node.
    ScatterAdd(NodeId, Arc<Vec<usize>>),
    /// Same data, new shape.
    Reshape(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

/// Gradient of a scalar with respect to a set of tape variables.
#[derive(Clone, Debug)]
pub struct GradResult {
    pub grads: Vec<Tensor>,
    /// True where the variable was not reachable from the loss; its
    /// gradient entry is a zero tensor.
    pub unreachable: Vec<bool>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(CoreError::Dimension {
            op,
            left: shape.to_vec(),
            right: vec![],
        });
    }
    Ok((shape[0], shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape nodes keep shape/data consistent")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> NodeId {
        debug_assert_eq!(numel_of(&shape), data.len());
        self.nodes.push(Node {
            op,
            shape,
            data,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite { op: op_name });
        }
        Ok(self.push(op, shape, data, requires_grad))
    }

    // ---- leaves ------------------------------------------------------

    /// Differentiable input; the tape copies the tensor's values.
    pub fn var(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), true)
    }

    /// Non-differentiable input (stop-gradient).
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        assert_eq!(numel_of(&shape), data.len(), "constant shape/data mismatch");
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    // ---- elementwise -------------------------------------------------

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(CoreError::Dimension {
                op: name,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(name, op, shape, data, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push_checked(name, op, shape, data, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.unary("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("ln", a, f64::ln, Op::Ln(a))
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("recip", a, |x| 1.0 / x, Op::Recip(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = dim2(&self.nodes[a.0].shape, "matmul")?;
        let (kb, n) = dim2(&self.nodes[b.0].shape, "matmul")?;
        if ka != kb {
            return Err(CoreError::Dimension {
                op: "matmul",
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].data;
            let bv = &self.nodes[b.0].data;
            for i in 0..m {
                for k in 0..ka {
                    let aik = av[i * ka + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * n..(k + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aik * brow[j];
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("matmul", Op::Matmul(a, b), vec![m, n], out, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = dim2(&self.nodes[a.0].shape, "transpose")?;
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("transpose", Op::Transpose(a), vec![n, m], out, rg)
    }

    // ---- reductions and broadcasts -----------------------------------

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("sum_all", Op::SumAll(a), vec![1], vec![s], rg)
    }

    /// Broadcast a scalar node to an arbitrary shape.
    pub fn fill(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.nodes[a.0].data.len() != 1 {
            return Err(CoreError::Dimension {
                op: "fill",
                left: self.nodes[a.0].shape.clone(),
                right: shape.to_vec(),
            });
        }
        let v = self.nodes[a.0].data[0];
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(
            "fill",
            Op::Fill(a),
            shape.to_vec(),
            vec![v; numel_of(shape)],
            rg,
        )
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = dim2(&self.nodes[a.0].shape, "row_sum")?;
        let av = &self.nodes[a.0].data;
        let out: Vec<f64> = (0..m).map(|i| av[i * n..(i + 1) * n].iter().sum()).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("row_sum", Op::RowSum(a), vec![m], out, rg)
    }

    pub fn row_broadcast(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(CoreError::Dimension {
                op: "row_broadcast",
                left: self.nodes[a.0].shape.clone(),
                right: vec![n],
            });
        }
        let m = self.nodes[a.0].shape[0];
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            out[i * n..(i + 1) * n].fill(av[i]);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("row_broadcast", Op::RowBroadcast(a), vec![m, n], out, rg)
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = dim2(&self.nodes[a.0].shape, "col_sum")?;
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += av[i * n + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("col_sum", Op::ColSum(a), vec![n], out, rg)
    }

    pub fn col_broadcast(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        if self.nodes[a.0].shape.len() != 1 {
            return Err(CoreError::Dimension {
                op: "col_broadcast",
                left: self.nodes[a.0].shape.clone(),
                right: vec![m],
            });
        }
        let n = self.nodes[a.0].shape[0];
        let av = self.nodes[a.0].data.clone();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(&av);
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("col_broadcast", Op::ColBroadcast(a), vec![m, n], out, rg)
    }

    // ---- selection ----------------------------------------------------

    /// out[i] = a[i, cols[i]]
    pub fn pick_per_row(&mut self, a: NodeId, cols: Arc<Vec<usize>>) -> Result<NodeId> {
        let (m, n) = dim2(&self.nodes[a.0].shape, "pick_per_row")?;
        if cols.len() != m {
            return Err(CoreError::Dimension {
                op: "pick_per_row",
                left: vec![m, n],
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(CoreError::Data(format!(
                "pick_per_row column {bad} out of range for width {n}"
            )));
        }
        let av = &self.nodes[a.0].data;
        let out: Vec<f64> = cols.iter().enumerate().map(|(i, &c)| av[i * n + c]).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("pick_per_row", Op::PickPerRow(a, cols), vec![m], out, rg)
    }

    /// out[i, cols[i]] = a[i], zero elsewhere.
    pub fn scatter_per_row(&mut self, a: NodeId, cols: Arc<Vec<usize>>, n: usize) -> Result<NodeId> {
        if self.nodes[a.0].shape.len() != 1 || self.nodes[a.0].shape[0] != cols.len() {
            return Err(CoreError::Dimension {
                op: "scatter_per_row",
                left: self.nodes[a.0].shape.clone(),
                right: vec![cols.len()],
            });
        }
        let m = cols.len();
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; m * n];
        for (i, &c) in cols.iter().enumerate() {
            out[i * n + c] = av[i];
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(
            "scatter_per_row",
            Op::ScatterPerRow(a, cols),
            vec![m, n],
            out,
            rg,
        )
    }

    /// out[j] = a[idx[j]] for an arbitrary index map (im2col, flatten reorder).
    pub fn gather(&mut self, a: NodeId, idx: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<NodeId> {
        if numel_of(&out_shape) != idx.len() {
            return Err(CoreError::Dimension {
                op: "gather",
                left: out_shape,
                right: vec![idx.len()],
            });
        }
        let src_len = self.nodes[a.0].data.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src_len) {
            return Err(CoreError::Data(format!(
                "gather index {bad} out of range for {src_len} elements"
            )));
        }
        let av = &self.nodes[a.0].data;
        let out: Vec<f64> = idx.iter().map(|&i| av[i]).collect();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("gather", Op::Gather(a, idx), out_shape, out, rg)
    }

    /// out[idx[j]] += a[j]; adjoint partner of [`Tape::gather`].
    pub fn scatter_add(&mut self, a: NodeId, idx: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<NodeId> {
        if self.nodes[a.0].data.len() != idx.len() {
            return Err(CoreError::Dimension {
                op: "scatter_add",
                left: self.nodes[a.0].shape.clone(),
                right: vec![idx.len()],
            });
        }
        let out_len = numel_of(&out_shape);
        let av = &self.nodes[a.0].data;
        let mut out = vec![0.0; out_len];
        for (j, &i) in idx.iter().enumerate() {
            out[i] += av[j];
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("scatter_add", Op::ScatterAdd(a, idx), out_shape, out, rg)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        if numel_of(&shape) != self.nodes[a.0].data.len() {
            return Err(CoreError::Dimension {
                op: "reshape",
                left: self.nodes[a.0].shape.clone(),
                right: shape,
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::Reshape(a), shape, data, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Build adjoint nodes for `wrt` with respect to a scalar `loss`.
    ///
    /// Returns one entry per requested node: `None` means the node does not
    /// influence the loss (its gradient is identically zero). The adjoints
    /// are ordinary tape nodes, so they can be differentiated again.
    pub fn backward_graph(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Option<NodeId>>> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(CoreError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        let horizon = loss.0 + 1;
        let mut adjoint: Vec<Option<NodeId>> = vec![None; horizon];
        adjoint[loss.0] = Some(self.constant_scalar(1.0));

        for id in (0..horizon).rev() {
            let Some(g) = adjoint[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    self.accumulate(&mut adjoint, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adjoint, a, g)?;
                    let neg = self.scale(g, -1.0)?;
                    self.accumulate(&mut adjoint, b, neg)?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = self.mul(g, b)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = self.mul(g, a)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::Matmul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bt = self.transpose(b)?;
                        let da = self.matmul(g, bt)?;
                        self.accumulate(&mut adjoint, a, da)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        let at = self.transpose(a)?;
                        let db = self.matmul(at, g)?;
                        self.accumulate(&mut adjoint, b, db)?;
                    }
                }
                Op::Transpose(a) => {
                    let da = self.transpose(g)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Scale(a, c) => {
                    let da = self.scale(g, c)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Exp(a) => {
                    let da = self.mul(g, NodeId(id))?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Ln(a) => {
                    let inv = self.recip(a)?;
                    let da = self.mul(g, inv)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Recip(a) => {
                    // d(1/x) = -y^2 dx with y = 1/x already on the tape.
                    let y2 = self.mul(NodeId(id), NodeId(id))?;
                    let gy2 = self.mul(g, y2)?;
                    let da = self.scale(gy2, -1.0)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Tanh(a) => {
                    let y2 = self.mul(NodeId(id), NodeId(id))?;
                    let ones = self.constant_from(
                        self.nodes[id].shape.clone(),
                        vec![1.0; self.nodes[id].data.len()],
                    );
                    let omy2 = self.sub(ones, y2)?;
                    let da = self.mul(g, omy2)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Relu(a) => {
                    // Mask enters as a constant: second derivative is zero a.e.
                    let mask: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect();
                    let mask_id = self.constant_from(self.nodes[a.0].shape.clone(), mask);
                    let da = self.mul(g, mask_id)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let da = self.fill(g, &shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Fill(a) => {
                    let da = self.sum_all(g)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::RowSum(a) => {
                    let n = self.nodes[a.0].shape[1];
                    let da = self.row_broadcast(g, n)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::RowBroadcast(a) => {
                    let da = self.row_sum(g)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::ColSum(a) => {
                    let m = self.nodes[a.0].shape[0];
                    let da = self.col_broadcast(g, m)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::ColBroadcast(a) => {
                    let da = self.col_sum(g)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::PickPerRow(a, cols) => {
                    let n = self.nodes[a.0].shape[1];
                    let da = self.scatter_per_row(g, cols, n)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::ScatterPerRow(a, cols) => {
                    let da = self.pick_per_row(g, cols)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Gather(a, idx) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let da = self.scatter_add(g, idx, shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::ScatterAdd(a, idx) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let da = self.gather(g, idx, shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].shape.clone();
                    let da = self.reshape(g, shape)?;
                    self.accumulate(&mut adjoint, a, da)?;
                }
            }
        }

        Ok(wrt
            .iter()
            .map(|w| if w.0 < horizon { adjoint[w.0] } else { None })
            .collect())
    }

    fn accumulate(&mut self, adjoint: &mut [Option<NodeId>], target: NodeId, contrib: NodeId) -> Result<()> {
        if !self.nodes[target.0].requires_grad {
            return Ok(());
        }
        adjoint[target.0] = Some(match adjoint[target.0] {
            None => contrib,
            Some(prev) => self.add(prev, contrib)?,
        });
        Ok(())
    }

    /// First-order gradient values of a scalar loss.
    ///
    /// Variables the loss does not depend on receive a zero gradient and are
    /// flagged in [`GradResult::unreachable`]. The tape's variables are never
    /// mutated.
    pub fn grad(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<GradResult> {
        let ids = self.backward_graph(loss, wrt)?;
        let mut grads = Vec::with_capacity(wrt.len());
        let mut unreachable = Vec::with_capacity(wrt.len());
        for (w, g) in wrt.iter().zip(ids) {
            match g {
                Some(id) => {
                    grads.push(self.to_tensor(id));
                    unreachable.push(false);
                }
                None => {
                    grads.push(Tensor::zeros(&self.nodes[w.0].shape.clone()));
                    unreachable.push(true);
                }
            }
        }
        Ok(GradResult { grads, unreachable })
    }

    /// Exact Hessian-vector product by nested differentiation.
    ///
    /// Differentiates the scalar `<grad(loss), stop_gradient(v)>` a second
    /// time. Parameters unreachable at second order get zero blocks, which
    /// is exact (their Hessian rows are zero).
    pub fn hvp(&mut self, loss: NodeId, params: &[NodeId], v: &[Tensor]) -> Result<Vec<Tensor>> {
        let grads = self.backward_graph(loss, params)?;
        self.hvp_with_grads(&grads, params, v)
    }

    /// As [`Tape::hvp`] but reusing gradient nodes from an earlier
    /// [`Tape::backward_graph`] call over the same parameters.
    pub fn hvp_with_grads(
        &mut self,
        grads: &[Option<NodeId>],
        params: &[NodeId],
        v: &[Tensor],
    ) -> Result<Vec<Tensor>> {
        if params.len() != v.len() || grads.len() != params.len() {
            return Err(CoreError::Contract(format!(
                "hvp arity mismatch: {} grads, {} params, {} directions",
                grads.len(),
                params.len(),
                v.len()
            )));
        }
        for (p, vi) in params.iter().zip(v) {
            if self.nodes[p.0].shape != vi.shape() {
                return Err(CoreError::Dimension {
                    op: "hvp",
                    left: self.nodes[p.0].shape.clone(),
                    right: vi.shape().to_vec(),
                });
            }
        }
        let mut dot: Option<NodeId> = None;
        for (g, vi) in grads.iter().zip(v) {
            let Some(g) = *g else { continue };
            let v_const = self.constant(vi);
            let prod = self.mul(g, v_const)?;
            let term = self.sum_all(prod)?;
            dot = Some(match dot {
                None => term,
                Some(acc) => self.add(acc, term)?,
            });
        }
        let Some(dot) = dot else {
            // Loss independent of every parameter: Hv = 0 exactly.
            return Ok(params.iter().map(|p| Tensor::zeros(&self.nodes[p.0].shape.clone())).collect());
        };
        let second = self.backward_graph(dot, params)?;
        Ok(params
            .iter()
            .zip(second)
            .map(|(p, h)| match h {
                Some(id) => self.to_tensor(id),
                None => Tensor::zeros(&self.nodes[p.0].shape.clone()),
            })
            .collect())
    }
}

/// Numerically stable softmax cross-entropy, mean over the batch.
///
/// Composed from primitive tape ops so it stays differentiable to second
/// order; the per-row max shift is a constant leaf (piecewise constant in
/// the logits, derivative zero a.e.).
pub fn softmax_cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (m, k) = dim2(tape.shape(logits), "softmax_cross_entropy")?;
    if labels.len() != m {
        return Err(CoreError::Dimension {
            op: "softmax_cross_entropy",
            left: vec![m, k],
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(CoreError::Data(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let row_max: Vec<f64> = (0..m)
        .map(|i| {
            tape.value(logits)[i * k..(i + 1) * k]
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let max_const = tape.constant_from(vec![m], row_max);
    let max_mat = tape.row_broadcast(max_const, k)?;
    let shifted = tape.sub(logits, max_mat)?;
    let exps = tape.exp(shifted)?;
    let sums = tape.row_sum(exps)?;
    let lse = tape.ln(sums)?;
    let cols = Arc::new(labels.to_vec());
    let picked = tape.pick_per_row(shifted, cols)?;
    let per_sample = tape.sub(lse, picked)?;
    let total = tape.sum_all(per_sample)?;
    tape.scale(total, 1.0 / m as f64)
}

/// Mean squared error over all elements.
pub fn mean_squared_error(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum_all(sq)?;
    let n = tape.value(pred).len();
    tape.scale(total, 1.0 / n as f64)
}

/// Column index map for im2col on channel-last images.
///
/// Input layout `[batch, h, w, c]`; output rows iterate `(batch, oy, ox)`,
/// columns iterate `(ky, kx, c)`. Valid padding.
pub fn im2col_indices(
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
) -> Result<(Vec<usize>, usize, usize)> {
    if kernel == 0 || stride == 0 || kernel > h || kernel > w {
        return Err(CoreError::Dimension {
            op: "im2col",
            left: vec![h, w, c],
            right: vec![kernel, stride],
        });
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let rows = batch * oh * ow;
    let cols = kernel * kernel * c;
    let mut idx = Vec::with_capacity(rows * cols);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        for ci in 0..c {
                            let y = oy * stride + ky;
                            let x = ox * stride + kx;
                            idx.push(((b * h + y) * w + x) * c + ci);
                        }
                    }
                }
            }
        }
    }
    Ok((idx, oh, ow))
}
