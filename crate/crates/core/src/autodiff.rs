//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs. Because inputs must already exist when a node is pushed, the
//! node order is a topological order and [`Tape::backward`] simply walks the
//! nodes in decreasing index order. Gradients accumulate with `+=`, so a
//! node consumed several times (a shared embedding table, say) receives the
//! sum of all its uses.
//!
//! Parameters live outside the tape. A training pass copies them in as leaf
//! nodes, runs forward and backward, then reads the leaf gradients back out.

use crate::error::{AwiError, Result};
use crate::tensor::{self, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Unary and binary elementwise primitives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast a `1 x n` row onto every row of an `m x n` matrix.
    AddRow(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Lookup {
        table: NodeId,
        index: usize,
    },
    Concat(NodeId, NodeId),
    SliceCols {
        src: NodeId,
        start: usize,
    },
    StackRows(Vec<NodeId>),
    Sum(NodeId),
    Pick {
        src: NodeId,
        index: usize,
    },
}

impl OpKind {
    fn parents(&self) -> Vec<NodeId> {
        use OpKind::*;
        match self {
            Leaf => vec![],
            MatMul(a, b)
            | MatMulT(a, b)
            | Add(a, b)
            | Sub(a, b)
            | Mul(a, b)
            | AddRow(a, b)
            | Concat(a, b) => vec![*a, *b],
            Tanh(a) | Sigmoid(a) | Scale(a, _) | Softmax(a) | LogSoftmax(a) | Sum(a) => vec![*a],
            Lookup { table, .. } => vec![*table],
            SliceCols { src, .. } | Pick { src, .. } => vec![*src],
            StackRows(rows) => rows.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TapeNode {
    value: Tensor,
    grad: Option<Tensor>,
    op: OpKind,
}

impl TapeNode {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn op(&self) -> &OpKind {
        &self.op
    }
}

/// Gradient contribution flowing into one parent.
enum Contribution {
    Dense(Tensor),
    Row { row: usize, data: Vec<f64> },
    Cols { start: usize, data: Tensor },
    Element { index: usize, value: f64 },
}

#[derive(Clone, Debug, Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass; zeros if the node was not reached.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    pub fn grad_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: OpKind) -> NodeId {
        let id = self.nodes.len();
        for p in op.parents() {
            assert!(p.0 < id, "tape parent {} does not precede node {id}", p.0);
        }
        self.nodes.push(TapeNode {
            value,
            grad: None,
            op,
        });
        NodeId(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, OpKind::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, OpKind::MatMul(a, b)))
    }

    /// `a · bᵀ`; used for `x · Wᵀ` with `W` stored as `out x in`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(value, OpKind::MatMulT(a, b)))
    }

    pub fn elementwise(&mut self, kind: Elementwise, args: &[NodeId]) -> Result<NodeId> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul => 2,
            Elementwise::Tanh | Elementwise::Sigmoid => 1,
        };
        if args.len() != arity {
            return Err(AwiError::Dimension(format!(
                "{kind:?} takes {arity} argument(s), got {}",
                args.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(args[0], args[1]),
            Elementwise::Sub => self.sub(args[0], args[1]),
            Elementwise::Mul => self.mul(args[0], args[1]),
            Elementwise::Tanh => Ok(self.tanh(args[0])),
            Elementwise::Sigmoid => Ok(self.sigmoid(args[0])),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, OpKind::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(value, OpKind::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, OpKind::Mul(a, b)))
    }

    pub fn add_row(&mut self, m: NodeId, r: NodeId) -> Result<NodeId> {
        let (mv, rv) = (self.value(m), self.value(r));
        if rv.rows() != 1 || rv.cols() != mv.cols() {
            return Err(AwiError::shapes("add_row", mv.shape(), rv.shape()));
        }
        let mut out = mv.clone();
        let cols = mv.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += rv.data()[i % cols];
        }
        Ok(self.push(out, OpKind::AddRow(m, r)))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, OpKind::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(tensor::sigmoid);
        self.push(value, OpKind::Sigmoid(a))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|x| k * x);
        self.push(value, OpKind::Scale(a, k))
    }

    fn check_vector(&self, a: NodeId, what: &str) -> Result<()> {
        let v = self.value(a);
        if !v.is_vector() {
            return Err(AwiError::Dimension(format!(
                "{what} expects a vector, got {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        if v.is_empty() {
            return Err(AwiError::Domain(format!("{what} of an empty vector")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_vector(a, "softmax")?;
        let v = self.value(a);
        let value = Tensor::from_raw(v.rows(), v.cols(), tensor::softmax_slice(v.data()));
        Ok(self.push(value, OpKind::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_vector(a, "log_softmax")?;
        let v = self.value(a);
        let value = Tensor::from_raw(v.rows(), v.cols(), tensor::log_softmax_slice(v.data()));
        Ok(self.push(value, OpKind::LogSoftmax(a)))
    }

    /// Selects row `index` of `table` as a `1 x cols` node.
    pub fn lookup(&mut self, table: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(table);
        if index >= t.rows() {
            return Err(AwiError::Vocabulary {
                id: index,
                size: t.rows(),
            });
        }
        let value = Tensor::row(t.row_slice(index));
        Ok(self.push(value, OpKind::Lookup { table, index }))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != 1 || bv.rows() != 1 {
            return Err(AwiError::shapes(
                "concat of non-row-vectors",
                av.shape(),
                bv.shape(),
            ));
        }
        let mut data = Vec::with_capacity(av.cols() + bv.cols());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let value = Tensor::from_raw(1, data.len(), data);
        Ok(self.push(value, OpKind::Concat(a, b)))
    }

    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(src);
        if start + len > v.cols() {
            return Err(AwiError::Dimension(format!(
                "column slice {start}..{} of {}x{}",
                start + len,
                v.rows(),
                v.cols()
            )));
        }
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let value = Tensor::from_raw(v.rows(), len, data);
        Ok(self.push(value, OpKind::SliceCols { src, start }))
    }

    /// Stacks `1 x n` rows into an `m x n` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = rows
            .first()
            .ok_or_else(|| AwiError::Domain("stack_rows of no rows".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let v = self.value(*r);
            if v.rows() != 1 || v.cols() != n {
                return Err(AwiError::shapes("stack_rows", (1, n), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::from_raw(rows.len(), n, data);
        Ok(self.push(value, OpKind::StackRows(rows.to_vec())))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::row(&[self.value(a).sum()]);
        self.push(value, OpKind::Sum(a))
    }

    /// Element `index` of a vector as a `1 x 1` node.
    pub fn pick(&mut self, src: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(src);
        if !v.is_vector() || index >= v.len() {
            return Err(AwiError::Dimension(format!(
                "pick index {index} from {}x{}",
                v.rows(),
                v.cols()
            )));
        }
        let value = Tensor::row(&[v.data()[index]]);
        Ok(self.push(value, OpKind::Pick { src, index }))
    }

    /// Resets all gradients, seeds `loss` with 1 and propagates to every
    /// node that `loss` depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(AwiError::Dimension(format!(
                "backward needs a 1x1 loss, got {}x{}",
                shape.0, shape.1
            )));
        }
        self.zero_grads();
        self.nodes[loss.0].grad = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_gradients(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (parent, c) in contributions {
                self.accumulate(parent, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, c: Contribution) {
        let node = &mut self.nodes[id.0];
        let (rows, cols) = node.value.shape();
        let g = node.grad.get_or_insert_with(|| Tensor::zeros(rows, cols));
        match c {
            Contribution::Dense(t) => g.add_assign(&t),
            Contribution::Row { row, data } => {
                let dst = &mut g.data_mut()[row * cols..(row + 1) * cols];
                for (d, s) in dst.iter_mut().zip(&data) {
                    *d += s;
                }
            }
            Contribution::Cols { start, data } => {
                for r in 0..rows {
                    for (j, s) in data.row_slice(r).iter().enumerate() {
                        g.data_mut()[r * cols + start + j] += s;
                    }
                }
            }
            Contribution::Element { index, value } => g.data_mut()[index] += value,
        }
    }

    fn local_gradients(&self, i: usize, g: &Tensor) -> Result<Vec<(NodeId, Contribution)>> {
        use Contribution::*;
        let node = &self.nodes[i];
        let y = &node.value;
        let out = match &node.op {
            OpKind::Leaf => vec![],
            OpKind::MatMul(a, b) => vec![
                (*a, Dense(g.matmul_t(self.value(*b))?)),
                (*b, Dense(self.value(*a).t_matmul(g)?)),
            ],
            OpKind::MatMulT(a, b) => vec![
                (*a, Dense(g.matmul(self.value(*b))?)),
                (*b, Dense(g.t_matmul(self.value(*a))?)),
            ],
            OpKind::Add(a, b) => vec![(*a, Dense(g.clone())), (*b, Dense(g.clone()))],
            OpKind::Sub(a, b) => vec![(*a, Dense(g.clone())), (*b, Dense(g.map(|v| -v)))],
            OpKind::Mul(a, b) => vec![
                (*a, Dense(g.zip_map(self.value(*b), |d, v| d * v)?)),
                (*b, Dense(g.zip_map(self.value(*a), |d, v| d * v)?)),
            ],
            OpKind::AddRow(m, r) => {
                let cols = g.cols();
                let mut col_sums = vec![0.0; cols];
                for (k, v) in g.data().iter().enumerate() {
                    col_sums[k % cols] += v;
                }
                vec![(*m, Dense(g.clone())), (*r, Dense(Tensor::row(&col_sums)))]
            }
            OpKind::Tanh(a) => vec![(*a, Dense(g.zip_map(y, |d, t| d * (1.0 - t * t))?))],
            OpKind::Sigmoid(a) => vec![(*a, Dense(g.zip_map(y, |d, s| d * s * (1.0 - s))?))],
            OpKind::Scale(a, k) => vec![(*a, Dense(g.map(|d| d * k)))],
            OpKind::Softmax(a) => {
                let inner = tensor::dot(g.data(), y.data());
                vec![(*a, Dense(g.zip_map(y, |d, s| s * (d - inner))?))]
            }
            OpKind::LogSoftmax(a) => {
                let total = g.sum();
                vec![(*a, Dense(g.zip_map(y, |d, ls| d - ls.exp() * total)?))]
            }
            OpKind::Lookup { table, index } => vec![(
                *table,
                Row {
                    row: *index,
                    data: g.data().to_vec(),
                },
            )],
            OpKind::Concat(a, b) => {
                let na = self.value(*a).cols();
                vec![
                    (*a, Dense(Tensor::row(&g.data()[..na]))),
                    (*b, Dense(Tensor::row(&g.data()[na..]))),
                ]
            }
            OpKind::SliceCols { src, start } => vec![(
                *src,
                Cols {
                    start: *start,
                    data: g.clone(),
                },
            )],
            OpKind::StackRows(rows) => rows
                .iter()
                .enumerate()
                .map(|(r, id)| (*id, Dense(Tensor::row(g.row_slice(r)))))
                .collect(),
            OpKind::Sum(a) => {
                let (rows, cols) = self.value(*a).shape();
                vec![(*a, Dense(Tensor::filled(rows, cols, g.data()[0])))]
            }
            OpKind::Pick { src, index } => vec![(
                *src,
                Element {
                    index: *index,
                    value: g.data()[0],
                },
            )],
        };
        Ok(out)
    }
}
