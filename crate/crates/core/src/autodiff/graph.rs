//! Functional computation graph with eager evaluation and reverse-mode
//! differentiation. Gradients are themselves built as graph nodes, so a
//! gradient can be differentiated again (needed for unrolled inner loops).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag of a node, without operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Affine,
    MatMul,
    Transpose,
    Reshape,
    Tanh,
    Relu,
    Step,
    Exp,
    Log,
    Sqrt,
    SumAll,
    SumRows,
    SumCols,
    Expand,
    RepeatRows,
    RepeatCols,
    LogSoftmaxRows,
    GatherRows,
    ScatterRows,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Affine => "affine",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Tanh => "tanh",
            OpKind::Relu => "relu",
            OpKind::Step => "step",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::SumAll => "sum_all",
            OpKind::SumRows => "sum_rows",
            OpKind::SumCols => "sum_cols",
            OpKind::Expand => "expand",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::RepeatCols => "repeat_cols",
            OpKind::LogSoftmaxRows => "log_softmax_rows",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        ALL_OPS.iter().copied().find(|k| k.name() == name)
    }
}

pub const ALL_OPS: [OpKind; 25] = [
    OpKind::Leaf,
    OpKind::Constant,
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Affine,
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Reshape,
    OpKind::Tanh,
    OpKind::Relu,
    OpKind::Step,
    OpKind::Exp,
    OpKind::Log,
    OpKind::Sqrt,
    OpKind::SumAll,
    OpKind::SumRows,
    OpKind::SumCols,
    OpKind::Expand,
    OpKind::RepeatRows,
    OpKind::RepeatCols,
    OpKind::LogSoftmaxRows,
    OpKind::GatherRows,
    OpKind::ScatterRows,
];

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Affine { x: NodeId, scale: F, shift: F },
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Step(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    Expand(NodeId),
    RepeatRows(NodeId),
    RepeatCols(NodeId),
    LogSoftmaxRows(NodeId),
    GatherRows { table: NodeId, ids: Arc<[usize]> },
    ScatterRows { src: NodeId, ids: Arc<[usize]> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Affine { .. } => OpKind::Affine,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Step(_) => OpKind::Step,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::SumAll(_) => OpKind::SumAll,
            Op::SumRows(_) => OpKind::SumRows,
            Op::SumCols(_) => OpKind::SumCols,
            Op::Expand(_) => OpKind::Expand,
            Op::RepeatRows(_) => OpKind::RepeatRows,
            Op::RepeatCols(_) => OpKind::RepeatCols,
            Op::LogSoftmaxRows(_) => OpKind::LogSoftmaxRows,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ScatterRows { .. } => OpKind::ScatterRows,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Affine { x, .. } => vec![*x],
            Op::GatherRows { table, .. } => vec![*table],
            Op::ScatterRows { src, .. } => vec![*src],
            Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Step(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::SumAll(x)
            | Op::SumRows(x)
            | Op::SumCols(x)
            | Op::Expand(x)
            | Op::RepeatRows(x)
            | Op::RepeatCols(x)
            | Op::LogSoftmaxRows(x) => vec![*x],
        }
    }
}

#[derive(Debug, Clone)]
struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand matches the left operand's trailing dims and is
    /// repeated over the leading batch dimension.
    Rows,
    /// Right operand has a single element.
    Scalar,
}

fn bcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if !a.is_empty() && &a[1..] == b {
        Ok(Bcast::Rows)
    } else if b.iter().product::<usize>() == 1 && b.len() <= 1 {
        Ok(Bcast::Scalar)
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn require_matrix(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            lhs: t.to_vec(),
            rhs: vec![],
        }),
    }
}

fn binary<F: Scalar>(
    op: &'static str,
    a: &Tensor<F>,
    b: &Tensor<F>,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    let kind = bcast_kind(op, a.shape(), b.shape())?;
    let bd = b.data();
    let data: Vec<F> = match kind {
        Bcast::Same => a.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Rows => {
            let m = bd.len();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % m]))
                .collect()
        }
        Bcast::Scalar => a.data().iter().map(|&x| f(x, bd[0])).collect(),
    };
    Tensor::new(a.shape().to_vec(), data)
}

fn matmul_kernel<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, k) = require_matrix("matmul", a.shape())?;
    let (k2, m) = require_matrix("matmul", b.shape())?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![F::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

fn transpose_kernel<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, m) = require_matrix("transpose", a.shape())?;
    let ad = a.data();
    let mut out = Vec::with_capacity(n * m);
    for j in 0..m {
        for i in 0..n {
            out.push(ad[i * m + j]);
        }
    }
    Tensor::new(vec![m, n], out)
}

fn log_softmax_kernel<F: Scalar>(a: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, m) = require_matrix("log_softmax_rows", a.shape())?;
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let row = a.row(i);
        let mx = row.iter().fold(F::neg_infinity(), |acc, &v| acc.max(v));
        let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::new(vec![n, m], out)
}

/// Arena of nodes in creation order. Every node's parents have smaller ids,
/// so creation order is a topological order.
#[derive(Debug, Clone)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    sign_fault: Option<OpKind>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            sign_fault: None,
        }
    }

    /// Fault injection for the gradient-check harness: every vector-Jacobian
    /// product of `kind` is negated. Forward values are unaffected.
    #[doc(hidden)]
    pub fn with_sign_fault(mut self, kind: Option<OpKind>) -> Self {
        self.sign_fault = kind;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => true,
            Op::Constant | Op::Step(_) => false,
            _ => op.parents().iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn create(&mut self, op: Op<F>, target: &[usize]) -> Result<NodeId> {
        let value = self.compute(&op, target)?;
        Ok(self.push(op, value))
    }

    /// Differentiable input (a parameter).
    pub fn leaf(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, v: F) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Copy of `x`'s current value with no connection to its history.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    /// Replaces the value of a leaf or constant. Call [`Graph::forward`]
    /// afterwards to refresh dependent nodes.
    pub fn set_value(&mut self, id: NodeId, value: Tensor<F>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf | Op::Constant) {
            return Err(Error::invalid("set_value on a non-input node"));
        }
        if node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: node.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every node up to and including `root` from the current
    /// input values and returns the root value.
    pub fn forward(&mut self, root: NodeId) -> Result<Tensor<F>> {
        for i in 0..=root.0 {
            if matches!(self.nodes[i].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let target = self.nodes[i].value.shape().to_vec();
            let v = self.compute(&op, &target)?;
            self.nodes[i].value = v;
        }
        Ok(self.value(root).clone())
    }

    fn compute(&self, op: &Op<F>, target: &[usize]) -> Result<Tensor<F>> {
        let v = |id: &NodeId| &self.nodes[id.0].value;
        match op {
            Op::Leaf | Op::Constant => unreachable!("inputs are not computed"),
            Op::Add(a, b) => binary("add", v(a), v(b), |x, y| x + y),
            Op::Sub(a, b) => binary("sub", v(a), v(b), |x, y| x - y),
            Op::Mul(a, b) => binary("mul", v(a), v(b), |x, y| x * y),
            Op::Div(a, b) => {
                if v(b).data().iter().any(|d| d.is_zero()) {
                    return Err(Error::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
                binary("div", v(a), v(b), |x, y| x / y)
            }
            Op::Affine { x, scale, shift } => Ok(v(x).map(|e| *scale * e + *shift)),
            Op::MatMul(a, b) => matmul_kernel(v(a), v(b)),
            Op::Transpose(x) => transpose_kernel(v(x)),
            Op::Reshape(x) => Tensor::new(target.to_vec(), v(x).data().to_vec()),
            Op::Tanh(x) => Ok(v(x).map(|e| e.tanh())),
            Op::Relu(x) => Ok(v(x).map(|e| e.max(F::zero()))),
            Op::Step(x) => Ok(v(x).map(|e| if e > F::zero() { F::one() } else { F::zero() })),
            Op::Exp(x) => Ok(v(x).map(|e| e.exp())),
            Op::Log(x) => {
                if v(x).data().iter().any(|&e| e <= F::zero()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: "logarithm of a non-positive value".into(),
                    });
                }
                Ok(v(x).map(|e| e.ln()))
            }
            Op::Sqrt(x) => {
                if v(x).data().iter().any(|&e| e < F::zero()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: "square root of a negative value".into(),
                    });
                }
                Ok(v(x).map(|e| e.sqrt()))
            }
            Op::SumAll(x) => Ok(Tensor::scalar(v(x).data().iter().copied().sum())),
            Op::SumRows(x) => {
                let t = v(x);
                let (n, m) = require_matrix("sum_rows", t.shape())?;
                let mut out = vec![F::zero(); m];
                for i in 0..n {
                    for (o, &e) in out.iter_mut().zip(t.row(i)) {
                        *o = *o + e;
                    }
                }
                Tensor::new(vec![m], out)
            }
            Op::SumCols(x) => {
                let t = v(x);
                let (n, _) = require_matrix("sum_cols", t.shape())?;
                let out = (0..n).map(|i| t.row(i).iter().copied().sum()).collect();
                Tensor::new(vec![n, 1], out)
            }
            Op::Expand(x) => {
                let t = v(x);
                if t.numel() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "expand",
                        lhs: t.shape().to_vec(),
                        rhs: target.to_vec(),
                    });
                }
                Ok(Tensor::full(target, t.item()))
            }
            Op::RepeatRows(x) => {
                let t = v(x);
                let (n, m) = require_matrix("repeat_rows", target)?;
                if t.shape() != [m] {
                    return Err(Error::ShapeMismatch {
                        op: "repeat_rows",
                        lhs: t.shape().to_vec(),
                        rhs: target.to_vec(),
                    });
                }
                Tensor::new(vec![n, m], t.data().repeat(n))
            }
            Op::RepeatCols(x) => {
                let t = v(x);
                let (n, m) = require_matrix("repeat_cols", target)?;
                if t.shape() != [n, 1] {
                    return Err(Error::ShapeMismatch {
                        op: "repeat_cols",
                        lhs: t.shape().to_vec(),
                        rhs: target.to_vec(),
                    });
                }
                let data = t
                    .data()
                    .iter()
                    .flat_map(|&e| std::iter::repeat_n(e, m))
                    .collect();
                Tensor::new(vec![n, m], data)
            }
            Op::LogSoftmaxRows(x) => log_softmax_kernel(v(x)),
            Op::GatherRows { table, ids } => {
                let t = v(table);
                let (rows, _) = require_matrix("gather_rows", t.shape())?;
                if let Some(bad) = ids.iter().find(|&&i| i >= rows) {
                    return Err(Error::Domain {
                        op: "gather_rows",
                        detail: format!("row index {bad} out of range for {rows} rows"),
                    });
                }
                Ok(t.select_rows(ids))
            }
            Op::ScatterRows { src, ids } => {
                let t = v(src);
                let (n, m) = require_matrix("scatter_rows", t.shape())?;
                let (rows, m2) = require_matrix("scatter_rows", target)?;
                if n != ids.len() || m != m2 || ids.iter().any(|&i| i >= rows) {
                    return Err(Error::ShapeMismatch {
                        op: "scatter_rows",
                        lhs: t.shape().to_vec(),
                        rhs: target.to_vec(),
                    });
                }
                let mut out = Tensor::zeros(target);
                let od = out.data_mut();
                for (r, &dst) in ids.iter().enumerate() {
                    for (o, &e) in od[dst * m..(dst + 1) * m].iter_mut().zip(t.row(r)) {
                        *o = *o + e;
                    }
                }
                Ok(out)
            }
        }
    }

    // ---- primitive constructors -------------------------------------------

    /// Elementwise `a + b`; `b` may broadcast over the leading dim of `a` or be a single value.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.create(Op::Add(a, b), &[])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.create(Op::Sub(a, b), &[])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.create(Op::Mul(a, b), &[])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.create(Op::Div(a, b), &[])
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: F, shift: F) -> Result<NodeId> {
        self.create(Op::Affine { x, scale, shift }, &[])
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> Result<NodeId> {
        self.affine(x, s, F::zero())
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.affine(x, -F::one(), F::zero())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.create(Op::MatMul(a, b), &[])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Transpose(x), &[])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        if self.value(x).numel() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.create(Op::Reshape(x), shape)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Tanh(x), &[])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Relu(x), &[])
    }

    /// Indicator `x > 0`. Carries no gradient.
    pub fn step(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Step(x), &[])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Exp(x), &[])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Log(x), &[])
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::Sqrt(x), &[])
    }

    /// Sum of every element, as a scalar of shape `[]`.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::SumAll(x), &[])
    }

    /// `[n, m] -> [m]`, summing over the batch axis.
    pub fn sum_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::SumRows(x), &[])
    }

    /// `[n, m] -> [n, 1]`, summing along each row.
    pub fn sum_cols(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::SumCols(x), &[])
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.create(Op::Expand(x), shape)
    }

    /// `[m] -> [n, m]`.
    pub fn repeat_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let m = self.value(x).numel();
        self.create(Op::RepeatRows(x), &[n, m])
    }

    /// `[n, 1] -> [n, m]`.
    pub fn repeat_cols(&mut self, x: NodeId, m: usize) -> Result<NodeId> {
        let n = self.shape(x).first().copied().unwrap_or(1);
        self.create(Op::RepeatCols(x), &[n, m])
    }

    /// Numerically stable row-wise log-softmax of a matrix.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        self.create(Op::LogSoftmaxRows(x), &[])
    }

    /// Embedding lookup: output row `r` is `table[ids[r]]`. The gradient
    /// scatter-adds back into the table, so repeated ids accumulate.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.create(
            Op::GatherRows {
                table,
                ids: ids.into(),
            },
            &[],
        )
    }

    /// Adds row `r` of `src` into row `ids[r]` of a zero `[rows, m]` matrix.
    pub fn scatter_rows(&mut self, src: NodeId, ids: &[usize], rows: usize) -> Result<NodeId> {
        let m = self.shape(src).get(1).copied().unwrap_or(1);
        self.create(
            Op::ScatterRows {
                src,
                ids: ids.into(),
            },
            &[rows, m],
        )
    }

    // ---- reverse mode ------------------------------------------------------

    /// Gradient of the scalar `root` with respect to each node in `wrt`,
    /// returned as graph nodes. The returned nodes stay connected to the
    /// graph, so they can be differentiated again. Nodes that `root` does not
    /// depend on get a zero constant.
    pub fn grad(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
        let root_shape = self.shape(root).to_vec();
        if self.value(root).numel() != 1 || root_shape.len() > 1 {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<NodeId>> = vec![None; n];
        let seed = self.constant(Tensor::ones(&root_shape));
        grads[root.0] = Some(seed);

        for i in (0..n).rev() {
            let Some(gy) = grads[i] else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let kind = op.kind();
            for (parent, mut contrib) in self.vjp(NodeId(i), &op, gy)? {
                if self.sign_fault == Some(kind) {
                    contrib = self.neg(contrib)?;
                }
                debug_assert_eq!(self.shape(contrib), self.shape(parent));
                grads[parent.0] = Some(match grads[parent.0] {
                    None => contrib,
                    Some(acc) => self.add(acc, contrib)?,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(&shape)))
                }
            })
            .collect()
    }

    /// Reduces a gradient flowing into a broadcast right operand back to its shape.
    fn unbroadcast(&mut self, g: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        match bcast_kind("unbroadcast", &sa, &sb)? {
            Bcast::Same => Ok(g),
            Bcast::Rows => {
                if sa.len() == 2 {
                    self.sum_rows(g)
                } else {
                    let flat = self.reshape(g, &[sa[0], sb.iter().product()])?;
                    let s = self.sum_rows(flat)?;
                    self.reshape(s, &sb)
                }
            }
            Bcast::Scalar => {
                let s = self.sum_all(g)?;
                if sb.is_empty() {
                    Ok(s)
                } else {
                    self.reshape(s, &sb)
                }
            }
        }
    }

    fn vjp(&mut self, y: NodeId, op: &Op<F>, gy: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let rg = |g: &Self, id: NodeId| g.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf | Op::Constant | Op::Step(_) => {}
            Op::Add(a, b) => {
                if rg(self, a) {
                    out.push((a, gy));
                }
                if rg(self, b) {
                    out.push((b, self.unbroadcast(gy, a, b)?));
                }
            }
            Op::Sub(a, b) => {
                if rg(self, a) {
                    out.push((a, gy));
                }
                if rg(self, b) {
                    let r = self.unbroadcast(gy, a, b)?;
                    out.push((b, self.neg(r)?));
                }
            }
            Op::Mul(a, b) => {
                if rg(self, a) {
                    out.push((a, self.mul(gy, b)?));
                }
                if rg(self, b) {
                    let t = self.mul(gy, a)?;
                    out.push((b, self.unbroadcast(t, a, b)?));
                }
            }
            Op::Div(a, b) => {
                if rg(self, a) {
                    out.push((a, self.div(gy, b)?));
                }
                if rg(self, b) {
                    // d(a/b)/db = -y / b
                    let t = self.mul(gy, y)?;
                    let t = self.div(t, b)?;
                    let t = self.neg(t)?;
                    out.push((b, self.unbroadcast(t, a, b)?));
                }
            }
            Op::Affine { x, scale, .. } => out.push((x, self.scale(gy, scale)?)),
            Op::MatMul(a, b) => {
                if rg(self, a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(gy, bt)?));
                }
                if rg(self, b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, gy)?));
                }
            }
            Op::Transpose(x) => out.push((x, self.transpose(gy)?)),
            Op::Reshape(x) => {
                let s = self.shape(x).to_vec();
                out.push((x, self.reshape(gy, &s)?));
            }
            Op::Tanh(x) => {
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -F::one(), F::one())?;
                out.push((x, self.mul(gy, d)?));
            }
            Op::Relu(x) => {
                let mask = self.step(x)?;
                out.push((x, self.mul(gy, mask)?));
            }
            Op::Exp(x) => out.push((x, self.mul(gy, y)?)),
            Op::Log(x) => out.push((x, self.div(gy, x)?)),
            Op::Sqrt(x) => {
                let h = self.scale(gy, F::of(0.5))?;
                out.push((x, self.div(h, y)?));
            }
            Op::SumAll(x) => {
                let s = self.shape(x).to_vec();
                out.push((x, self.expand(gy, &s)?));
            }
            Op::SumRows(x) => {
                let n = self.shape(x)[0];
                out.push((x, self.repeat_rows(gy, n)?));
            }
            Op::SumCols(x) => {
                let m = self.shape(x)[1];
                out.push((x, self.repeat_cols(gy, m)?));
            }
            Op::Expand(x) => {
                let s = self.sum_all(gy)?;
                let shape = self.shape(x).to_vec();
                let s = if shape.is_empty() {
                    s
                } else {
                    self.reshape(s, &shape)?
                };
                out.push((x, s));
            }
            Op::RepeatRows(x) => out.push((x, self.sum_rows(gy)?)),
            Op::RepeatCols(x) => out.push((x, self.sum_cols(gy)?)),
            Op::LogSoftmaxRows(x) => {
                // gx = gy - softmax(x) * rowsum(gy)
                let m = self.shape(x)[1];
                let p = self.exp(y)?;
                let s = self.sum_cols(gy)?;
                let s = self.repeat_cols(s, m)?;
                let ps = self.mul(p, s)?;
                out.push((x, self.sub(gy, ps)?));
            }
            Op::GatherRows { table, ref ids } => {
                let rows = self.shape(table)[0];
                let ids = ids.clone();
                out.push((table, self.scatter_rows(gy, &ids, rows)?));
            }
            Op::ScatterRows { src, ref ids } => {
                let ids = ids.clone();
                out.push((src, self.gather_rows(gy, &ids)?));
            }
        }
        Ok(out)
    }
}
