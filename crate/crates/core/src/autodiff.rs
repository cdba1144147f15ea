//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Computation is described once as an [`Graph`] of shape-checked nodes and
//! then evaluated many times on a [`Tape`] that owns preallocated value and
//! adjoint buffers. Two differentiation paths are provided:
//!
//! * [`Tape::backward`] — numeric reverse sweep producing adjoints for every
//!   parameter and differentiable input (one backward pass per scalar root).
//! * [`Graph::grad_nodes`] — symbolic adjoint emission: builds the gradient of
//!   a (batched-)scalar node with respect to another node *as new graph nodes*,
//!   so the result can itself be differentiated numerically. This is what the
//!   gradient-penalty term and exact one-step meta-gradients use.
//!
//! Shapes are fixed at construction; mismatches panic at build time.

use ndarray::{Array2, Zip};
use std::collections::HashMap;

use crate::params::ParamStore;

/// Slope of the leaky rectifier used throughout the discriminators.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Tanh,
    /// d/dx tanh(x) = 1 - tanh(x)^2, as a primitive so emitted gradient
    /// graphs stay differentiable one more time.
    TanhGrad,
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Square,
    Cube,
    Recip,
    LeakyRelu,
    /// Derivative of the leaky rectifier (piecewise constant, derivative 0 a.e.).
    LeakyReluGrad,
    Sigmoid,
    SigmoidGrad,
}

impl UnaryKind {
    #[inline]
    fn eval(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -x,
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::TanhGrad => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryKind::Sin => x.sin(),
            UnaryKind::Cos => x.cos(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Square => x * x,
            UnaryKind::Cube => x * x * x,
            UnaryKind::Recip => 1.0 / x,
            UnaryKind::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            UnaryKind::LeakyReluGrad => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            UnaryKind::SigmoidGrad => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
        }
    }

    /// f'(x) for the numeric reverse sweep.
    #[inline]
    fn deriv(self, x: f64) -> f64 {
        match self {
            UnaryKind::Neg => -1.0,
            UnaryKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            UnaryKind::TanhGrad => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            UnaryKind::Sin => x.cos(),
            UnaryKind::Cos => -x.sin(),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => 1.0 / x,
            UnaryKind::Sqrt => 0.5 / x.sqrt(),
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Cube => 3.0 * x * x,
            UnaryKind::Recip => -1.0 / (x * x),
            UnaryKind::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            UnaryKind::LeakyReluGrad => 0.0,
            UnaryKind::Sigmoid => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }
            UnaryKind::SigmoidGrad => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s) * (1.0 - 2.0 * s)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Free input bound at evaluation time; `diff` marks inputs whose
    /// adjoints are wanted.
    Input { name: String, diff: bool },
    /// Trainable parameter, resolved against a [`ParamStore`] slot.
    Param { slot: usize, name: String },
    Const(Array2<f64>),
    Unary(UnaryKind, NodeId),
    /// Elementwise with broadcasting over singleton rows/columns.
    Binary(BinaryKind, NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Sum over columns: (r, c) -> (r, 1).
    RowSum(NodeId),
    /// Sum over rows: (r, c) -> (1, c).
    ColSum(NodeId),
    /// Sum of all entries: -> (1, 1).
    Sum(NodeId),
    /// Mean of all entries: -> (1, 1).
    Mean(NodeId),
    /// Concatenate along columns; 1-row operands broadcast to the batch size.
    ConcatCols(Vec<NodeId>),
    /// Column slice [start, start+len).
    SliceCols(NodeId, usize, usize),
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: (usize, usize),
    needs_grad: bool,
}

/// Acyclic expression graph; node ids are topologically ordered by
/// construction (an operand id is always smaller than its consumer's).
///
/// Inputs and parameters are deduplicated by name, so referencing the same
/// parameter from several subgraphs accumulates into a single adjoint.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    input_cache: HashMap<String, NodeId>,
    param_cache: HashMap<usize, NodeId>,
}

#[derive(thiserror::Error, Debug)]
pub enum EvalError {
    #[error("input `{0}` not bound")]
    UnboundInput(String),
    #[error("input `{name}` bound with shape {got:?}, graph expects {want:?}")]
    InputShape {
        name: String,
        got: (usize, usize),
        want: (usize, usize),
    },
    #[error("non-finite value produced at node {0}")]
    NonFinite(usize),
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let r = if a.0 == b.0 {
        a.0
    } else if a.0 == 1 {
        b.0
    } else if b.0 == 1 {
        a.0
    } else {
        panic!("incompatible row counts {} vs {}", a.0, b.0)
    };
    let c = if a.1 == b.1 {
        a.1
    } else if a.1 == 1 {
        b.1
    } else if b.1 == 1 {
        a.1
    } else {
        panic!("incompatible column counts {} vs {}", a.1, b.1)
    };
    (r, c)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    fn push(&mut self, op: Op, shape: (usize, usize)) -> NodeId {
        let needs_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { diff, .. } => *diff,
            Op::Const(_) => false,
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::RowSum(a)
            | Op::ColSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _, _) => self.nodes[a.0].needs_grad,
            Op::Binary(_, a, b) | Op::MatMul(a, b) => {
                self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
            }
            Op::ConcatCols(list) => list.iter().any(|n| self.nodes[n.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            shape,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn input_impl(&mut self, name: &str, shape: (usize, usize), diff: bool) -> NodeId {
        if let Some(&id) = self.input_cache.get(name) {
            assert_eq!(self.shape(id), shape, "input `{name}` redeclared with new shape");
            let Op::Input { diff: d, .. } = &self.nodes[id.0].op else {
                unreachable!()
            };
            assert_eq!(*d, diff, "input `{name}` redeclared with new differentiability");
            return id;
        }
        let id = self.push(
            Op::Input {
                name: name.to_string(),
                diff,
            },
            shape,
        );
        self.input_cache.insert(name.to_string(), id);
        id
    }

    /// Non-differentiable input (data).
    pub fn input(&mut self, name: &str, shape: (usize, usize)) -> NodeId {
        self.input_impl(name, shape, false)
    }

    /// Input whose adjoint is computed by [`Tape::backward`].
    pub fn input_diff(&mut self, name: &str, shape: (usize, usize)) -> NodeId {
        self.input_impl(name, shape, true)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let slot = store
            .slot(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not in store"));
        if let Some(&id) = self.param_cache.get(&slot) {
            return id;
        }
        let shape = store.shape(slot);
        let id = self.push(
            Op::Param {
                slot,
                name: name.to_string(),
            },
            shape,
        );
        self.param_cache.insert(slot, id);
        id
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        let shape = (value.nrows(), value.ncols());
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn zeros(&mut self, shape: (usize, usize)) -> NodeId {
        self.constant(Array2::zeros(shape))
    }

    pub fn ones(&mut self, shape: (usize, usize)) -> NodeId {
        self.constant(Array2::from_elem(shape, 1.0))
    }

    pub fn unary(&mut self, kind: UnaryKind, a: NodeId) -> NodeId {
        let shape = self.shape(a);
        self.push(Op::Unary(kind, a), shape)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Tanh, a)
    }
    pub fn sin(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sin, a)
    }
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Square, a)
    }
    pub fn cube(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Cube, a)
    }
    pub fn leaky_relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::LeakyRelu, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> NodeId {
        let shape = broadcast_shape(self.shape(a), self.shape(b));
        self.push(Op::Binary(kind, a, b), shape)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k1) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k1, k2, "matmul inner dimensions {k1} vs {k2}");
        self.push(Op::MatMul(a, b), (m, n))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose(a), (c, r))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::RowSum(a), (r, 1))
    }

    pub fn col_sum(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::ColSum(a), (1, c))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), (1, 1))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), (1, 1))
    }

    /// Per-row inner product of equally shaped operands: (r, c) x (r, c) -> (r, 1).
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let p = self.mul(a, b);
        self.row_sum(p)
    }

    /// Per-row Euclidean norm: (r, c) -> (r, 1).
    pub fn row_norm(&mut self, a: NodeId) -> NodeId {
        let sq = self.square(a);
        let s = self.row_sum(sq);
        self.sqrt(s)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero operands");
        let rows = parts
            .iter()
            .map(|p| self.shape(*p).0)
            .fold(1usize, |acc, r| {
                if r == 1 {
                    acc
                } else if acc == 1 || acc == r {
                    r
                } else {
                    panic!("concat row counts {acc} vs {r}")
                }
            });
        let cols = parts.iter().map(|p| self.shape(*p).1).sum();
        self.push(Op::ConcatCols(parts.to_vec()), (rows, cols))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.shape(a);
        assert!(start + len <= c, "slice [{start}, {}) out of {c}", start + len);
        self.push(Op::SliceCols(a, start, len), (r, len))
    }

    /// Central second difference `(plus - 2*center + minus) / h^2`.
    ///
    /// The operands are three evaluations of the same function at `x+h`, `x`,
    /// and `x-h`; the result stays linear in them, so a single backward pass
    /// reaches the parameters behind the evaluations.
    pub fn second_difference(&mut self, plus: NodeId, center: NodeId, minus: NodeId, h: f64) -> NodeId {
        let two_c = self.scale(center, 2.0);
        let s = self.sub(plus, two_c);
        let s = self.add(s, minus);
        self.scale(s, 1.0 / (h * h))
    }

    /// Treat parameters as constants: recomputes which nodes carry
    /// gradients so reverse sweeps skip frozen subtrees. Used by inference,
    /// where only input adjoints (the latent) are wanted.
    pub fn freeze_params(&mut self) {
        for i in 0..self.nodes.len() {
            let ng = match &self.nodes[i].op {
                Op::Param { .. } | Op::Const(_) => false,
                Op::Input { diff, .. } => *diff,
                _ => self
                    .operands(NodeId(i))
                    .iter()
                    .any(|o| self.nodes[o.0].needs_grad),
            };
            self.nodes[i].needs_grad = ng;
        }
    }

    fn operands(&self, id: NodeId) -> Vec<NodeId> {
        match &self.nodes[id.0].op {
            Op::Input { .. } | Op::Param { .. } | Op::Const(_) => vec![],
            Op::Unary(_, a)
            | Op::Transpose(a)
            | Op::RowSum(a)
            | Op::ColSum(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SliceCols(a, _, _) => vec![*a],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::ConcatCols(list) => list.clone(),
        }
    }

    /// Reduce `node` to `target` shape by summing over broadcast dimensions.
    fn reduce_to(&mut self, node: NodeId, target: (usize, usize)) -> NodeId {
        let mut cur = node;
        let shape = self.shape(cur);
        if shape == target {
            return cur;
        }
        if target.0 == 1 && shape.0 != 1 {
            cur = self.col_sum(cur);
        }
        if target.1 == 1 && self.shape(cur).1 != 1 {
            cur = self.row_sum(cur);
        }
        assert_eq!(self.shape(cur), target, "broadcast reduction mismatch");
        cur
    }

    /// Emit graph nodes computing the gradient of `root` with respect to
    /// `wrt`, returned as a node of `wrt`'s shape.
    ///
    /// `root` must be (1,1) or (B,1); a (B,1) root is treated as B
    /// independent per-row scalars (valid whenever no op on the path mixes
    /// rows, as in row-wise network application). The emitted nodes are
    /// ordinary graph nodes, so the result is differentiable in turn.
    pub fn grad_nodes(&mut self, root: NodeId, wrt: NodeId) -> NodeId {
        assert_eq!(self.shape(root).1, 1, "grad root must have one column");

        // Active set: ancestors of root that depend on `wrt`.
        let n = self.nodes.len();
        let mut depends = vec![false; n];
        depends[wrt.0] = true;
        for i in wrt.0 + 1..n {
            depends[i] = self
                .operands(NodeId(i))
                .iter()
                .any(|o| depends[o.0]);
        }
        if !depends[root.0] {
            return self.zeros(self.shape(wrt));
        }
        let mut reaches = vec![false; n];
        reaches[root.0] = true;
        for i in (0..=root.0).rev() {
            if reaches[i] {
                for o in self.operands(NodeId(i)) {
                    reaches[o.0] = true;
                }
            }
        }

        let mut adj: HashMap<usize, NodeId> = HashMap::new();
        let seed = self.ones(self.shape(root));
        adj.insert(root.0, seed);

        for i in (wrt.0..=root.0).rev() {
            if !(depends[i] && reaches[i]) {
                continue;
            }
            let Some(a_i) = adj.get(&i).copied() else {
                continue;
            };
            let contribs: Vec<(NodeId, NodeId)> = match self.nodes[i].op.clone() {
                Op::Input { .. } | Op::Param { .. } | Op::Const(_) => vec![],
                Op::Unary(kind, a) => {
                    let c = self.unary_grad_expr(kind, a, NodeId(i), a_i);
                    vec![(a, c)]
                }
                Op::Binary(kind, a, b) => {
                    let sa = self.shape(a);
                    let sb = self.shape(b);
                    match kind {
                        BinaryKind::Add => {
                            let ca = self.reduce_to(a_i, sa);
                            let cb = self.reduce_to(a_i, sb);
                            vec![(a, ca), (b, cb)]
                        }
                        BinaryKind::Sub => {
                            let ca = self.reduce_to(a_i, sa);
                            let nb = self.neg(a_i);
                            let cb = self.reduce_to(nb, sb);
                            vec![(a, ca), (b, cb)]
                        }
                        BinaryKind::Mul => {
                            let pa = self.mul(a_i, b);
                            let ca = self.reduce_to(pa, sa);
                            let pb = self.mul(a_i, a);
                            let cb = self.reduce_to(pb, sb);
                            vec![(a, ca), (b, cb)]
                        }
                        BinaryKind::Div => {
                            let pa = self.div(a_i, b);
                            let ca = self.reduce_to(pa, sa);
                            let bsq = self.square(b);
                            let q = self.div(a, bsq);
                            let pb = self.mul(a_i, q);
                            let pb = self.neg(pb);
                            let cb = self.reduce_to(pb, sb);
                            vec![(a, ca), (b, cb)]
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let bt = self.transpose(b);
                    let ca = self.matmul(a_i, bt);
                    let at = self.transpose(a);
                    let cb = self.matmul(at, a_i);
                    vec![(a, ca), (b, cb)]
                }
                Op::Transpose(a) => {
                    let c = self.transpose(a_i);
                    vec![(a, c)]
                }
                Op::RowSum(a) => {
                    let ones = self.ones((1, self.shape(a).1));
                    let c = self.mul(a_i, ones);
                    vec![(a, c)]
                }
                Op::ColSum(a) => {
                    let ones = self.ones((self.shape(a).0, 1));
                    let c = self.mul(ones, a_i);
                    vec![(a, c)]
                }
                Op::Sum(a) => {
                    let ones = self.ones(self.shape(a));
                    let c = self.mul(a_i, ones);
                    vec![(a, c)]
                }
                Op::Mean(a) => {
                    let sh = self.shape(a);
                    let w = self.constant(Array2::from_elem(sh, 1.0 / (sh.0 * sh.1) as f64));
                    let c = self.mul(a_i, w);
                    vec![(a, c)]
                }
                Op::ConcatCols(list) => {
                    let mut out = Vec::new();
                    let mut start = 0usize;
                    for part in list {
                        let (pr, pc) = self.shape(part);
                        let mut c = self.slice_cols(a_i, start, pc);
                        if pr == 1 && self.shape(a_i).0 != 1 {
                            c = self.col_sum(c);
                        }
                        out.push((part, c));
                        start += pc;
                    }
                    out
                }
                Op::SliceCols(a, start, len) => {
                    let (ar, ac) = self.shape(a);
                    let mut parts = Vec::new();
                    if start > 0 {
                        parts.push(self.zeros((ar, start)));
                    }
                    parts.push(a_i);
                    if start + len < ac {
                        parts.push(self.zeros((ar, ac - start - len)));
                    }
                    let c = self.concat_cols(&parts);
                    vec![(a, c)]
                }
            };
            for (operand, contrib) in contribs {
                if !depends[operand.0] {
                    continue;
                }
                match adj.get(&operand.0).copied() {
                    Some(acc) => {
                        let s = self.add(acc, contrib);
                        adj.insert(operand.0, s);
                    }
                    None => {
                        adj.insert(operand.0, contrib);
                    }
                }
            }
        }

        adj.get(&wrt.0)
            .copied()
            .unwrap_or_else(|| self.zeros(self.shape(wrt)))
    }

    fn unary_grad_expr(&mut self, kind: UnaryKind, a: NodeId, out: NodeId, adj: NodeId) -> NodeId {
        match kind {
            UnaryKind::Neg => self.neg(adj),
            UnaryKind::Tanh => {
                let f = self.unary(UnaryKind::TanhGrad, a);
                self.mul(adj, f)
            }
            UnaryKind::Sin => {
                let f = self.unary(UnaryKind::Cos, a);
                self.mul(adj, f)
            }
            UnaryKind::Cos => {
                let s = self.unary(UnaryKind::Sin, a);
                let f = self.neg(s);
                self.mul(adj, f)
            }
            UnaryKind::Exp => self.mul(adj, out),
            UnaryKind::Ln => {
                let f = self.unary(UnaryKind::Recip, a);
                self.mul(adj, f)
            }
            UnaryKind::Sqrt => {
                let r = self.unary(UnaryKind::Recip, out);
                let f = self.scale(r, 0.5);
                self.mul(adj, f)
            }
            UnaryKind::Square => {
                let f = self.scale(a, 2.0);
                self.mul(adj, f)
            }
            UnaryKind::Cube => {
                let sq = self.square(a);
                let f = self.scale(sq, 3.0);
                self.mul(adj, f)
            }
            UnaryKind::Recip => {
                let f = self.mul(out, out);
                let f = self.neg(f);
                self.mul(adj, f)
            }
            UnaryKind::LeakyRelu => {
                let f = self.unary(UnaryKind::LeakyReluGrad, a);
                self.mul(adj, f)
            }
            UnaryKind::Sigmoid => {
                let f = self.unary(UnaryKind::SigmoidGrad, a);
                self.mul(adj, f)
            }
            UnaryKind::TanhGrad | UnaryKind::SigmoidGrad | UnaryKind::LeakyReluGrad => {
                panic!("symbolic gradient of a derivative primitive is not supported")
            }
        }
    }
}

/// Input bindings for one evaluation.
pub type Bindings = HashMap<String, Array2<f64>>;

/// Preallocated value/adjoint buffers for repeated evaluation of one graph.
pub struct Tape {
    values: Vec<Array2<f64>>,
    adjoints: Vec<Array2<f64>>,
    depends_input: Vec<bool>,
    cache_static: bool,
    static_ready: bool,
}

impl Tape {
    pub fn new(graph: &Graph) -> Self {
        let values = graph
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.shape))
            .collect::<Vec<_>>();
        let adjoints = values.clone();
        let mut depends_input = vec![false; graph.nodes.len()];
        for i in 0..graph.nodes.len() {
            depends_input[i] = match &graph.nodes[i].op {
                Op::Input { .. } => true,
                Op::Param { .. } | Op::Const(_) => false,
                _ => graph
                    .operands(NodeId(i))
                    .iter()
                    .any(|o| depends_input[o.0]),
            };
        }
        Tape {
            values,
            adjoints,
            depends_input,
            cache_static: false,
            static_ready: false,
        }
    }

    /// Evaluate input-independent nodes once and reuse their values across
    /// later forwards. Only valid while the parameter store is not mutated
    /// between calls (the inference-time setting).
    pub fn freeze_statics(&mut self) {
        self.cache_static = true;
        self.static_ready = false;
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.values[id.0][(0, 0)]
    }

    pub fn adjoint(&self, id: NodeId) -> &Array2<f64> {
        &self.adjoints[id.0]
    }

    /// Evaluate every node in topological order.
    pub fn forward(
        &mut self,
        graph: &Graph,
        store: &ParamStore,
        bindings: &Bindings,
    ) -> Result<(), EvalError> {
        let skip_static = self.cache_static && self.static_ready;
        for i in 0..graph.nodes.len() {
            if skip_static && !self.depends_input[i] {
                continue;
            }
            // Split borrows: operand values live strictly before index i.
            let (done, rest) = self.values.split_at_mut(i);
            let out = &mut rest[0];
            let node = &graph.nodes[i];
            match &node.op {
                Op::Input { name, .. } => {
                    let v = bindings
                        .get(name)
                        .ok_or_else(|| EvalError::UnboundInput(name.clone()))?;
                    if (v.nrows(), v.ncols()) != node.shape {
                        return Err(EvalError::InputShape {
                            name: name.clone(),
                            got: (v.nrows(), v.ncols()),
                            want: node.shape,
                        });
                    }
                    out.assign(v);
                }
                Op::Param { slot, .. } => out.assign(store.value_by_slot(*slot)),
                Op::Const(v) => out.assign(v),
                Op::Unary(kind, a) => {
                    let k = *kind;
                    Zip::from(&mut *out)
                        .and(&done[a.0])
                        .for_each(|o, &x| *o = k.eval(x));
                }
                Op::Binary(kind, a, b) => {
                    let va = done[a.0].broadcast(node.shape).expect("row/col broadcast");
                    let vb = done[b.0].broadcast(node.shape).expect("row/col broadcast");
                    match kind {
                        BinaryKind::Add => Zip::from(&mut *out)
                            .and(&va)
                            .and(&vb)
                            .for_each(|o, &x, &y| *o = x + y),
                        BinaryKind::Sub => Zip::from(&mut *out)
                            .and(&va)
                            .and(&vb)
                            .for_each(|o, &x, &y| *o = x - y),
                        BinaryKind::Mul => Zip::from(&mut *out)
                            .and(&va)
                            .and(&vb)
                            .for_each(|o, &x, &y| *o = x * y),
                        BinaryKind::Div => Zip::from(&mut *out)
                            .and(&va)
                            .and(&vb)
                            .for_each(|o, &x, &y| *o = x / y),
                    }
                }
                Op::MatMul(a, b) => {
                    ndarray::linalg::general_mat_mul(1.0, &done[a.0], &done[b.0], 0.0, out);
                }
                Op::Transpose(a) => out.assign(&done[a.0].t()),
                Op::RowSum(a) => {
                    for (r, row) in done[a.0].rows().into_iter().enumerate() {
                        out[(r, 0)] = row.sum();
                    }
                }
                Op::ColSum(a) => {
                    for (c, col) in done[a.0].columns().into_iter().enumerate() {
                        out[(0, c)] = col.sum();
                    }
                }
                Op::Sum(a) => out[(0, 0)] = done[a.0].sum(),
                Op::Mean(a) => {
                    let v = &done[a.0];
                    out[(0, 0)] = v.sum() / (v.len() as f64);
                }
                Op::ConcatCols(list) => {
                    let rows = node.shape.0;
                    let mut start = 0usize;
                    for part in list {
                        let v = &done[part.0];
                        let pc = v.ncols();
                        let mut dst = out.slice_mut(ndarray::s![.., start..start + pc]);
                        if v.nrows() == rows {
                            dst.assign(v);
                        } else {
                            for mut drow in dst.rows_mut() {
                                drow.assign(&v.row(0));
                            }
                        }
                        start += pc;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    out.assign(&done[a.0].slice(ndarray::s![.., *start..*start + *len]));
                }
            }
        }
        if self.cache_static {
            self.static_ready = true;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar root; adjoints for all parameter nodes and
    /// differentiable inputs become available via [`Tape::adjoint`].
    pub fn backward(&mut self, graph: &Graph, root: NodeId) {
        assert_eq!(graph.shape(root), (1, 1), "backward root must be scalar");
        for a in self.adjoints.iter_mut() {
            a.fill(0.0);
        }
        self.adjoints[root.0][(0, 0)] = 1.0;

        for i in (0..=root.0).rev() {
            let node = &graph.nodes[i];
            if !node.needs_grad {
                continue;
            }
            // Values are read-only here; split adjoints at i so operand
            // adjoints (indices < i) can be written while adj[i] is read.
            let (adj_ops, adj_rest) = self.adjoints.split_at_mut(i);
            let adj_i = &adj_rest[0];
            let values = &self.values;
            match &node.op {
                Op::Input { .. } | Op::Param { .. } | Op::Const(_) => {}
                Op::Unary(kind, a) => {
                    if graph.nodes[a.0].needs_grad {
                        let k = *kind;
                        Zip::from(&mut adj_ops[a.0])
                            .and(adj_i)
                            .and(&values[a.0])
                            .for_each(|da, &g, &x| *da += g * k.deriv(x));
                    }
                }
                Op::Binary(kind, a, b) => {
                    let shape = node.shape;
                    let add_reduced = |dst: &mut Array2<f64>, src: &Array2<f64>| {
                        // src has the broadcast shape; fold into dst's shape.
                        if (dst.nrows(), dst.ncols()) == (src.nrows(), src.ncols()) {
                            *dst += src;
                        } else {
                            for r in 0..src.nrows() {
                                for c in 0..src.ncols() {
                                    let dr = if dst.nrows() == 1 { 0 } else { r };
                                    let dc = if dst.ncols() == 1 { 0 } else { c };
                                    dst[(dr, dc)] += src[(r, c)];
                                }
                            }
                        }
                    };
                    match kind {
                        BinaryKind::Add => {
                            if graph.nodes[a.0].needs_grad {
                                add_reduced(&mut adj_ops[a.0], adj_i);
                            }
                            if graph.nodes[b.0].needs_grad {
                                add_reduced(&mut adj_ops[b.0], adj_i);
                            }
                        }
                        BinaryKind::Sub => {
                            if graph.nodes[a.0].needs_grad {
                                add_reduced(&mut adj_ops[a.0], adj_i);
                            }
                            if graph.nodes[b.0].needs_grad {
                                let neg = adj_i.mapv(|v| -v);
                                add_reduced(&mut adj_ops[b.0], &neg);
                            }
                        }
                        BinaryKind::Mul => {
                            if graph.nodes[a.0].needs_grad {
                                let vb = values[b.0].broadcast(shape).unwrap();
                                let prod = adj_i * &vb;
                                add_reduced(&mut adj_ops[a.0], &prod);
                            }
                            if graph.nodes[b.0].needs_grad {
                                let va = values[a.0].broadcast(shape).unwrap();
                                let prod = adj_i * &va;
                                add_reduced(&mut adj_ops[b.0], &prod);
                            }
                        }
                        BinaryKind::Div => {
                            let vb = values[b.0].broadcast(shape).unwrap();
                            if graph.nodes[a.0].needs_grad {
                                let prod = adj_i / &vb;
                                add_reduced(&mut adj_ops[a.0], &prod);
                            }
                            if graph.nodes[b.0].needs_grad {
                                let va = values[a.0].broadcast(shape).unwrap();
                                let mut prod = adj_i * &va;
                                Zip::from(&mut prod).and(&vb).for_each(|p, &y| *p = -*p / (y * y));
                                add_reduced(&mut adj_ops[b.0], &prod);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if graph.nodes[a.0].needs_grad {
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            adj_i,
                            &values[b.0].t().to_owned(),
                            1.0,
                            &mut adj_ops[a.0],
                        );
                    }
                    if graph.nodes[b.0].needs_grad {
                        ndarray::linalg::general_mat_mul(
                            1.0,
                            &values[a.0].t().to_owned(),
                            adj_i,
                            1.0,
                            &mut adj_ops[b.0],
                        );
                    }
                }
                Op::Transpose(a) => {
                    if graph.nodes[a.0].needs_grad {
                        let t = adj_i.t();
                        adj_ops[a.0] += &t;
                    }
                }
                Op::RowSum(a) => {
                    if graph.nodes[a.0].needs_grad {
                        for (r, mut row) in adj_ops[a.0].rows_mut().into_iter().enumerate() {
                            row += adj_i[(r, 0)];
                        }
                    }
                }
                Op::ColSum(a) => {
                    if graph.nodes[a.0].needs_grad {
                        for (c, mut col) in adj_ops[a.0].columns_mut().into_iter().enumerate() {
                            col += adj_i[(0, c)];
                        }
                    }
                }
                Op::Sum(a) => {
                    if graph.nodes[a.0].needs_grad {
                        adj_ops[a.0] += adj_i[(0, 0)];
                    }
                }
                Op::Mean(a) => {
                    if graph.nodes[a.0].needs_grad {
                        let n = graph.nodes[a.0].shape;
                        adj_ops[a.0] += adj_i[(0, 0)] / (n.0 * n.1) as f64;
                    }
                }
                Op::ConcatCols(list) => {
                    let rows = node.shape.0;
                    let mut start = 0usize;
                    for part in list {
                        let (pr, pc) = graph.nodes[part.0].shape;
                        if graph.nodes[part.0].needs_grad {
                            let slice = adj_i.slice(ndarray::s![.., start..start + pc]);
                            if pr == rows {
                                adj_ops[part.0] += &slice;
                            } else {
                                // operand was row-broadcast: fold rows
                                for r in 0..rows {
                                    for c in 0..pc {
                                        adj_ops[part.0][(0, c)] += slice[(r, c)];
                                    }
                                }
                            }
                        }
                        start += pc;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    if graph.nodes[a.0].needs_grad {
                        let mut dst =
                            adj_ops[a.0].slice_mut(ndarray::s![.., *start..*start + *len]);
                        dst += adj_i;
                    }
                }
            }
        }
    }

    /// Gradient of a scalar root with respect to the named parameters:
    /// forward + backward + adjoint collection in one call.
    pub fn gradient(
        &mut self,
        graph: &Graph,
        store: &ParamStore,
        bindings: &Bindings,
        root: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<Array2<f64>>, EvalError> {
        self.forward(graph, store, bindings)?;
        self.backward(graph, root);
        Ok(wrt.iter().map(|id| self.adjoints[id.0].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn empty_store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn tanh_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.input("x", (1, 1));
        let y = g.tanh(x);
        let mut tape = Tape::new(&g);
        let mut b = Bindings::new();
        b.insert("x".into(), array![[0.0]]);
        tape.forward(&g, &empty_store(), &b).unwrap();
        assert_eq!(tape.scalar_value(y), 0.0);
    }

    #[test]
    fn hand_inner_product() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.constant(array![[3.0, 4.0]]);
        let y = g.row_dot(a, b);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &empty_store(), &Bindings::new()).unwrap();
        assert_eq!(tape.scalar_value(y), 11.0);
    }

    #[test]
    fn leaky_relu_negative_side() {
        let mut g = Graph::new();
        let x = g.constant(array![[-1.0]]);
        let y = g.leaky_relu(x);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &empty_store(), &Bindings::new()).unwrap();
        assert!((tape.scalar_value(y) - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", (1, 1));
        let _ = g.tanh(x);
        let mut tape = Tape::new(&g);
        let err = tape.forward(&g, &empty_store(), &Bindings::new());
        assert!(matches!(err, Err(EvalError::UnboundInput(_))));
    }

    #[test]
    #[should_panic(expected = "matmul inner dimensions")]
    fn matmul_shape_mismatch_panics_at_build() {
        let mut g = Graph::new();
        let a = g.zeros((2, 3));
        let b = g.zeros((4, 2));
        let _ = g.matmul(a, b);
    }

    #[test]
    fn gradient_of_tanh_at_zero() {
        let mut store = ParamStore::new();
        store.insert("x", array![[0.0]]);
        let mut g = Graph::new();
        let x = g.param(&store, "x");
        let y = g.tanh(x);
        let mut tape = Tape::new(&g);
        let grads = tape
            .gradient(&g, &store, &Bindings::new(), y, &[x])
            .unwrap();
        assert!((grads[0][(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradient_of_linear_map() {
        // d/dw (w . x) with x = [1, 2]
        let mut store = ParamStore::new();
        store.insert("w", array![[0.5, -0.3]]);
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let x = g.constant(array![[1.0, 2.0]]);
        let y = g.row_dot(w, x);
        let mut tape = Tape::new(&g);
        let grads = tape
            .gradient(&g, &store, &Bindings::new(), y, &[w])
            .unwrap();
        assert_eq!(grads[0], array![[1.0, 2.0]]);
    }

    #[test]
    fn gradient_of_quadratic() {
        // d/dt (t^2 + 3t) at t = 2 -> 7
        let mut store = ParamStore::new();
        store.insert("t", array![[2.0]]);
        let mut g = Graph::new();
        let t = g.param(&store, "t");
        let t2 = g.square(t);
        let t3 = g.scale(t, 3.0);
        let y = g.add(t2, t3);
        let mut tape = Tape::new(&g);
        let grads = tape
            .gradient(&g, &store, &Bindings::new(), y, &[t])
            .unwrap();
        assert!((grads[0][(0, 0)] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_linear_discriminator() {
        // D(T) = w . T with w = [1.2, 1.6]: grad_T D = w, |grad| = 2
        let mut store = ParamStore::new();
        store.insert("w", array![[1.2, 1.6]]);
        let mut g = Graph::new();
        let t = g.input_diff("t", (1, 2));
        let w = g.param(&store, "w");
        let d = g.row_dot(t, w);
        let grad_t = g.grad_nodes(d, t);
        let norm = g.row_norm(grad_t);
        let mut tape = Tape::new(&g);
        let mut b = Bindings::new();
        b.insert("t".into(), array![[0.7, -0.4]]);
        tape.forward(&g, &store, &b).unwrap();
        assert_eq!(tape.value(grad_t), &array![[1.2, 1.6]]);
        assert!((tape.scalar_value(norm) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn input_gradient_quadratic_form() {
        // D(T) = |T|^2 / 2 at T = [3, 4]: grad = [3, 4]
        let mut g = Graph::new();
        let t = g.input_diff("t", (1, 2));
        let sq = g.square(t);
        let s = g.row_sum(sq);
        let d = g.scale(s, 0.5);
        let grad_t = g.grad_nodes(d, t);
        let mut tape = Tape::new(&g);
        let mut b = Bindings::new();
        b.insert("t".into(), array![[3.0, 4.0]]);
        tape.forward(&g, &ParamStore::new(), &b).unwrap();
        assert_eq!(tape.value(grad_t), &array![[3.0, 4.0]]);
    }

    #[test]
    fn penalty_double_backprop_hand_case() {
        // d/dw of (|grad_T (w.T)| - 1)^2 at w = [1.2, 1.6] is
        // 2(|w|-1) w/|w| = [1.2, 1.6].
        let mut store = ParamStore::new();
        store.insert("w", array![[1.2, 1.6]]);
        let mut g = Graph::new();
        let t = g.input_diff("t", (1, 2));
        let w = g.param(&store, "w");
        let d = g.row_dot(t, w);
        let grad_t = g.grad_nodes(d, t);
        let norm = g.row_norm(grad_t);
        let shifted = g.add_scalar(norm, -1.0);
        let pen = g.square(shifted);
        let mut tape = Tape::new(&g);
        let mut b = Bindings::new();
        b.insert("t".into(), array![[0.1, 0.2]]);
        let grads = tape.gradient(&g, &store, &b, pen, &[w]).unwrap();
        let expect = array![[1.2, 1.6]];
        for (got, want) in grads[0].iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn second_difference_exact_on_quadratic() {
        // f(x) = x^2, central stencil exact: 2
        let h = 1e-3;
        let x0 = 0.37;
        let mut g = Graph::new();
        let p = g.constant(array![[(x0 + h) * (x0 + h)]]);
        let c = g.constant(array![[x0 * x0]]);
        let m = g.constant(array![[(x0 - h) * (x0 - h)]]);
        let dd = g.second_difference(p, c, m, h);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &ParamStore::new(), &Bindings::new())
            .unwrap();
        assert!((tape.scalar_value(dd) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn second_difference_sine() {
        // f = sin(pi x) at x = 0.5 -> -pi^2 with O(h^2) remainder
        let h = 1e-3;
        let x0 = 0.5;
        let f = |x: f64| (std::f64::consts::PI * x).sin();
        let mut g = Graph::new();
        let p = g.constant(array![[f(x0 + h)]]);
        let c = g.constant(array![[f(x0)]]);
        let m = g.constant(array![[f(x0 - h)]]);
        let dd = g.second_difference(p, c, m, h);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &ParamStore::new(), &Bindings::new())
            .unwrap();
        let pi2 = std::f64::consts::PI * std::f64::consts::PI;
        let err = (tape.scalar_value(dd) + pi2).abs();
        assert!(err < 10.0 * h * h * pi2, "remainder {err}");
    }

    #[test]
    fn second_difference_constant_is_zero() {
        let mut g = Graph::new();
        let c5 = g.constant(array![[5.0]]);
        let dd = g.second_difference(c5, c5, c5, 1e-3);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &ParamStore::new(), &Bindings::new())
            .unwrap();
        assert_eq!(tape.scalar_value(dd), 0.0);
    }

    #[test]
    fn broadcast_row_and_col() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let r = g.constant(array![[10.0, 20.0]]); // (1,2)
        let c = g.constant(array![[100.0], [200.0]]); // (2,1)
        let s1 = g.add(a, r);
        let s2 = g.add(s1, c);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &ParamStore::new(), &Bindings::new())
            .unwrap();
        assert_eq!(tape.value(s2), &array![[111.0, 122.0], [213.0, 224.0]]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = g.constant(array![[9.0], [8.0]]);
        let cat = g.concat_cols(&[a, b]);
        let back = g.slice_cols(cat, 2, 1);
        let mut tape = Tape::new(&g);
        tape.forward(&g, &ParamStore::new(), &Bindings::new())
            .unwrap();
        assert_eq!(tape.value(back), &array![[9.0], [8.0]]);
    }

    #[test]
    fn mean_reduction_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", array![[1.0, 2.0], [3.0, 4.0]]);
        let mut g = Graph::new();
        let p = g.param(&store, "p");
        let m = g.mean(p);
        let mut tape = Tape::new(&g);
        let grads = tape
            .gradient(&g, &store, &Bindings::new(), m, &[p])
            .unwrap();
        assert_eq!(grads[0], Array2::from_elem((2, 2), 0.25));
    }
}
