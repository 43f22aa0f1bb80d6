//! Define-by-run reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] is rebuilt for every training step. Nodes are appended in
//! evaluation order, so parents always have smaller ids and a single reverse
//! sweep accumulates every gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::matrix::{self, Matrix, LOG_FLOOR, NORM_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable operations recorded on the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Scale(f64),
    ConcatCols,
    Relu,
    Sigmoid,
    RowSoftmax,
    MeanAll,
    /// Column sums: `r × c → 1 × c`.
    SumRows,
    L2Normalize,
    Square,
    Huber(f64),
    /// `‖a/‖a‖ − b/‖b‖‖²`, zero when either norm is below [`NORM_FLOOR`].
    CosineDistance,
    /// Mean squared difference of two equally shaped inputs.
    Mse,
    Transpose,
    /// Natural log with inputs floored at [`LOG_FLOOR`].
    Log,
    /// Forward value `hard + (x − anchor)`, identity backward.
    StraightThrough { hard: Matrix, anchor: Matrix },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatCols => "concat-cols",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::RowSoftmax => "row-softmax",
            OpKind::MeanAll => "mean-all",
            OpKind::SumRows => "sum-rows",
            OpKind::L2Normalize => "l2-normalize-vector",
            OpKind::Square => "elementwise-square",
            OpKind::Huber(_) => "huber",
            OpKind::CosineDistance => "cosine-distance",
            OpKind::Mse => "mse",
            OpKind::Transpose => "transpose",
            OpKind::Log => "log",
            OpKind::StraightThrough { .. } => "straight-through",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::Add
            | OpKind::ConcatCols
            | OpKind::CosineDistance
            | OpKind::Mse => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses parameter-free op names; `scale`, `huber` and `straight-through`
/// need arguments and must be constructed directly.
impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => OpKind::MatMul,
            "add" => OpKind::Add,
            "concat-cols" => OpKind::ConcatCols,
            "relu" => OpKind::Relu,
            "sigmoid" => OpKind::Sigmoid,
            "row-softmax" => OpKind::RowSoftmax,
            "mean-all" => OpKind::MeanAll,
            "sum-rows" => OpKind::SumRows,
            "l2-normalize-vector" => OpKind::L2Normalize,
            "elementwise-square" => OpKind::Square,
            "cosine-distance" => OpKind::CosineDistance,
            "mse" => OpKind::Mse,
            "transpose" => OpKind::Transpose,
            "log" => OpKind::Log,
            other => return Err(Error::Usage(format!("unknown op kind `{other}`"))),
        })
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Param,
    Constant,
    Op(OpKind),
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    kind: NodeKind,
    parents: Vec<NodeId>,
    value: Matrix,
    grad: Matrix,
    requires_grad: bool,
}

impl TapeNode {
    pub fn op(&self) -> Option<&OpKind> {
        match &self.kind {
            NodeKind::Op(op) => Some(op),
            _ => None,
        }
    }

    pub fn parents(&self) -> &[NodeId] {
        &self.parents
    }

    pub fn value(&self) -> &Matrix {
        &self.value
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_node: BTreeMap<NodeId, Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.by_node.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.by_node.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Matrix)> {
        self.by_node.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
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

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(NodeKind::Param, Vec::new(), value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(NodeKind::Constant, Vec::new(), value, false)
    }

    fn push(
        &mut self,
        kind: NodeKind,
        parents: Vec<NodeId>,
        value: Matrix,
        requires_grad: bool,
    ) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(TapeNode {
            kind,
            parents,
            value,
            grad,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Appends `op` applied to `inputs` and returns the new node.
    pub fn apply(&mut self, op: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != op.arity() {
            return Err(Error::Usage(format!(
                "{op} takes {} input(s), got {}",
                op.arity(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(Error::Usage(format!("node {} is not on this tape", bad.0)));
        }
        let value = self.evaluate(&op, inputs)?;
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(NodeKind::Op(op), inputs.to_vec(), value, requires_grad))
    }

    fn evaluate(&self, op: &OpKind, inputs: &[NodeId]) -> Result<Matrix> {
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|id| &self.nodes[id.0].value);
        Ok(match op {
            OpKind::MatMul => a.matmul(b.unwrap())?,
            OpKind::Add => a.add(b.unwrap())?,
            OpKind::Scale(c) => a.scale(*c),
            OpKind::ConcatCols => a.concat_cols(b.unwrap())?,
            OpKind::Relu => a.map(matrix::relu),
            OpKind::Sigmoid => a.map(matrix::sigmoid),
            OpKind::RowSoftmax => a.softmax_rows(),
            OpKind::MeanAll => {
                if a.is_empty() {
                    return Err(Error::dim("mean-all", "empty input"));
                }
                Matrix::scalar(a.mean())
            }
            OpKind::SumRows => a.sum_rows(),
            OpKind::L2Normalize => {
                require_vector(a, "l2-normalize-vector")?;
                let n = a.norm();
                if n <= NORM_FLOOR {
                    Matrix::zeros(a.rows(), a.cols())
                } else {
                    a.scale(1.0 / n)
                }
            }
            OpKind::Square => a.map(|v| v * v),
            OpKind::Huber(delta) => {
                if !(*delta > 0.0) || !delta.is_finite() {
                    return Err(Error::Usage(format!("huber threshold must be positive, got {delta}")));
                }
                a.map(|r| matrix::huber(r, *delta))
            }
            OpKind::CosineDistance => {
                let b = b.unwrap();
                require_vector(a, "cosine-distance")?;
                if a.len() != b.len() || !b.is_vector() {
                    return Err(Error::dim(
                        "cosine-distance",
                        format!("{:?} vs {:?}", a.shape(), b.shape()),
                    ));
                }
                let (na, nb) = (a.norm(), b.norm());
                if na <= NORM_FLOOR || nb <= NORM_FLOOR {
                    Matrix::scalar(0.0)
                } else {
                    let d: f64 = a
                        .data()
                        .iter()
                        .zip(b.data())
                        .map(|(x, y)| {
                            let diff = x / na - y / nb;
                            diff * diff
                        })
                        .sum();
                    Matrix::scalar(d)
                }
            }
            OpKind::Mse => {
                let b = b.unwrap();
                if !a.same_shape(b) {
                    return Err(Error::dim("mse", format!("{:?} vs {:?}", a.shape(), b.shape())));
                }
                if a.is_empty() {
                    return Err(Error::dim("mse", "empty input"));
                }
                Matrix::scalar(a.sub(b)?.map(|v| v * v).mean())
            }
            OpKind::Transpose => a.transpose(),
            OpKind::Log => a.map(matrix::log_floored),
            OpKind::StraightThrough { hard, anchor } => {
                if !a.same_shape(hard) || !a.same_shape(anchor) {
                    return Err(Error::dim(
                        "straight-through",
                        format!(
                            "input {:?}, hard {:?}, anchor {:?}",
                            a.shape(),
                            hard.shape(),
                            anchor.shape()
                        ),
                    ));
                }
                hard.add(&a.sub(anchor)?)?
            }
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::ConcatCols, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::RowSoftmax, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MeanAll, &[a])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SumRows, &[a])
    }

    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::L2Normalize, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Square, &[a])
    }

    pub fn huber(&mut self, a: NodeId, delta: f64) -> Result<NodeId> {
        self.apply(OpKind::Huber(delta), &[a])
    }

    pub fn cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::CosineDistance, &[a, b])
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mse, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn straight_through(&mut self, a: NodeId, hard: Matrix, anchor: Matrix) -> Result<NodeId> {
        self.apply(OpKind::StraightThrough { hard, anchor }, &[a])
    }

    /// Reverse sweep from a scalar `loss`. Gradients of every node are reset
    /// first, so repeated calls on one tape give identical results.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} is not on this tape", loss.0)));
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad.data_mut().fill(0.0);
        }
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let NodeKind::Op(op) = &self.nodes[i].kind else {
                continue;
            };
            let upstream = &self.nodes[i].grad;
            if upstream.data().iter().all(|&g| g == 0.0) {
                continue;
            }
            let contributions = self.local_grads(i, op, upstream)?;
            for (parent, g) in contributions {
                self.nodes[parent.0].grad.add_assign(&g)?;
            }
        }

        let mut by_node = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.kind, NodeKind::Param) {
                by_node.insert(NodeId(i), node.grad.clone());
            }
        }
        Ok(Gradients { by_node })
    }

    /// Gradient contributions of node `i` to each of its parents that
    /// requires a gradient.
    fn local_grads(&self, i: usize, op: &OpKind, up: &Matrix) -> Result<Vec<(NodeId, Matrix)>> {
        let node = &self.nodes[i];
        let pid = &node.parents;
        let wants = |k: usize| self.nodes[pid[k].0].requires_grad;
        let x = &self.nodes[pid[0].0].value;
        let y = &node.value;
        let mut out = Vec::with_capacity(2);
        match op {
            OpKind::MatMul => {
                let b = &self.nodes[pid[1].0].value;
                if wants(0) {
                    out.push((pid[0], up.matmul_t(b)?));
                }
                if wants(1) {
                    out.push((pid[1], x.t_matmul(up)?));
                }
            }
            OpKind::Add => {
                for k in 0..2 {
                    if wants(k) {
                        out.push((pid[k], up.clone()));
                    }
                }
            }
            OpKind::Scale(c) => out.push((pid[0], up.scale(*c))),
            OpKind::ConcatCols => {
                let (l, r) = up.split_cols(x.cols());
                if wants(0) {
                    out.push((pid[0], l));
                }
                if wants(1) {
                    out.push((pid[1], r));
                }
            }
            OpKind::Relu => {
                let g = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                        .collect(),
                )?;
                out.push((pid[0], g));
            }
            OpKind::Sigmoid => {
                let g = y.map(|s| s * (1.0 - s)).hadamard(up)?;
                out.push((pid[0], g));
            }
            OpKind::RowSoftmax => {
                let mut g = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let ur = up.row(r);
                    let inner: f64 = yr.iter().zip(ur).map(|(a, b)| a * b).sum();
                    for (j, gv) in g.row_mut(r).iter_mut().enumerate() {
                        *gv = yr[j] * (ur[j] - inner);
                    }
                }
                out.push((pid[0], g));
            }
            OpKind::MeanAll => {
                let u = up.data()[0] / x.len() as f64;
                out.push((pid[0], Matrix::filled(x.rows(), x.cols(), u)));
            }
            OpKind::SumRows => {
                let mut g = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    g.row_mut(r).copy_from_slice(up.data());
                }
                out.push((pid[0], g));
            }
            OpKind::L2Normalize => {
                let n = x.norm();
                let g = if n <= NORM_FLOOR {
                    Matrix::zeros(x.rows(), x.cols())
                } else {
                    let yu = y.dot(up)?;
                    Matrix::from_vec(
                        x.rows(),
                        x.cols(),
                        y.data()
                            .iter()
                            .zip(up.data())
                            .map(|(&yv, &u)| (u - yv * yu) / n)
                            .collect(),
                    )?
                };
                out.push((pid[0], g));
            }
            OpKind::Square => {
                out.push((pid[0], x.scale(2.0).hadamard(up)?));
            }
            OpKind::Huber(delta) => {
                let g = x.map(|r| matrix::huber_grad(r, *delta)).hadamard(up)?;
                out.push((pid[0], g));
            }
            OpKind::CosineDistance => {
                let b = &self.nodes[pid[1].0].value;
                let (na, nb) = (x.norm(), b.norm());
                let s = up.data()[0];
                if na <= NORM_FLOOR || nb <= NORM_FLOOR {
                    for k in 0..2 {
                        if wants(k) {
                            let v = &self.nodes[pid[k].0].value;
                            out.push((pid[k], Matrix::zeros(v.rows(), v.cols())));
                        }
                    }
                } else {
                    let u = x.scale(1.0 / na);
                    let v = b.scale(1.0 / nb);
                    let cos = u.dot(&v)?;
                    // d/da ‖u − v‖² = 2(u·cos − v)/‖a‖, symmetric in b.
                    if wants(0) {
                        let g = Matrix::from_vec(
                            x.rows(),
                            x.cols(),
                            u.data()
                                .iter()
                                .zip(v.data())
                                .map(|(&ui, &vi)| s * 2.0 * (ui * cos - vi) / na)
                                .collect(),
                        )?;
                        out.push((pid[0], g));
                    }
                    if wants(1) {
                        let g = Matrix::from_vec(
                            b.rows(),
                            b.cols(),
                            v.data()
                                .iter()
                                .zip(u.data())
                                .map(|(&vi, &ui)| s * 2.0 * (vi * cos - ui) / nb)
                                .collect(),
                        )?;
                        out.push((pid[1], g));
                    }
                }
            }
            OpKind::Mse => {
                let b = &self.nodes[pid[1].0].value;
                let c = 2.0 * up.data()[0] / x.len() as f64;
                let diff = x.sub(b)?.scale(c);
                if wants(1) {
                    out.push((pid[1], diff.scale(-1.0)));
                }
                if wants(0) {
                    out.push((pid[0], diff));
                }
            }
            OpKind::Transpose => out.push((pid[0], up.transpose())),
            OpKind::Log => {
                let g = Matrix::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(up.data())
                        .map(|(&v, &u)| if v > LOG_FLOOR { u / v } else { 0.0 })
                        .collect(),
                )?;
                out.push((pid[0], g));
            }
            OpKind::StraightThrough { .. } => out.push((pid[0], up.clone())),
        }
        out.retain(|(p, _)| self.nodes[p.0].requires_grad);
        Ok(out)
    }
}

fn require_vector(m: &Matrix, op: &'static str) -> Result<()> {
    if m.is_vector() {
        Ok(())
    } else {
        Err(Error::dim(op, format!("expected a vector, got {:?}", m.shape())))
    }
}
