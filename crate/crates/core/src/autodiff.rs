//! Scalar-graph automatic differentiation.
//!
//! A [`Tape`] is a Wengert list of scalar nodes. Every node stores the ids of
//! its operands together with the local partial derivatives evaluated during
//! the forward pass, so the reverse sweep is a single loop of fused
//! multiply-adds regardless of the operation kind.
//!
//! A [`Var`] is a dual number living on the tape: a primal node plus an
//! optional tangent node carrying the directional derivative with respect to
//! a seeded input (the time input, for the physics residuals). Tangents are
//! recorded as ordinary tape nodes, so anything computed from a tangent, for
//! example `(dC/dt)^2` in a residual loss, is itself differentiable with
//! respect to every leaf. This is forward-over-reverse mixed mode.
//!
//! ```
//! use flotapinn::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let w = tape.lift(3.0, 0.0);
//! let t = tape.lift(2.0, 1.0);
//! let u = tape.mul(w, t);
//! let du_dt = tape.tangent_var(u);
//! let loss = tape.mul(du_dt, du_dt);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.value(du_dt), 3.0);
//! assert_eq!(tape.adjoint(w), 6.0);
//! ```

use thiserror::Error;

/// Handle of a node inside a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Operation recorded for a node. The reverse sweep does not dispatch on it;
/// it is kept for diagnostics and tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    /// `c + Σ kᵢ·aᵢ` with constant coefficients.
    Linear,
    Mul,
    Div,
    Tanh,
    Sigmoid,
    Softplus,
    /// `b + Σ wᵢ·xᵢ`.
    Dot,
    /// `g(a)·ȧ`, the tangent of a unary op.
    Chain,
    /// `b + Σ wᵢ·xᵢ` over two contiguous node ranges.
    Dense,
}

/// Operations accepted by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Neg,
    Scale(f64),
}

impl Op {
    pub fn arity(self) -> usize {
        match self {
            Op::Add | Op::Sub | Op::Mul | Op::Div => 2,
            Op::Tanh | Op::Neg | Op::Scale(_) => 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("division by zero at node {node}")]
    DivisionByZero { node: usize },
    #[error("node {node} is not on this tape (tape holds {len} nodes)")]
    NotOnTape { node: usize, len: usize },
    #[error("{op:?} expects {expected} operands, got {got}")]
    Arity { op: Op, expected: usize, got: usize },
}

/// A dual scalar on a tape: primal node and optional tangent node.
///
/// `tangent == None` means the tangent is identically zero, which lets
/// parameters and constants skip tangent bookkeeping entirely.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    node: NodeId,
    tangent: Option<NodeId>,
}

impl Var {
    pub(crate) fn from_parts(node: NodeId, tangent: Option<NodeId>) -> Var {
        Var { node, tangent }
    }

    pub fn node(self) -> NodeId {
        self.node
    }

    pub fn tangent_node(self) -> Option<NodeId> {
        self.tangent
    }

    /// The same primal value with the tangent dropped.
    pub fn detached(self) -> Var {
        Var {
            node: self.node,
            tangent: None,
        }
    }
}

/// Tape length recorded by [`Tape::checkpoint`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    nodes: usize,
    dense: usize,
}

impl Checkpoint {
    pub fn nodes(&self) -> usize {
        self.nodes
    }
}

// Operands of a dense row: weights `w..w+n` and inputs `x..x+n`, so neither
// the ids nor the partials need to be stored per operand.
#[derive(Clone, Copy, Debug)]
struct DenseRow {
    bias: Option<u32>,
    w: u32,
    x: u32,
    n: u32,
}

/// A contiguous run of leaves created by [`Tape::lift_block`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafBlock {
    start: u32,
    len: u32,
}

impl LeafBlock {
    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn node(&self, i: usize) -> NodeId {
        debug_assert!(i < self.len as usize);
        NodeId(self.start + i as u32)
    }

    pub fn var(&self, i: usize) -> Var {
        Var {
            node: self.node(i),
            tangent: None,
        }
    }
}

#[derive(Default, Clone, Debug)]
pub struct Tape {
    values: Vec<f64>,
    kinds: Vec<OpKind>,
    // operands of node i live in args[offsets[i]..offsets[i + 1]]
    offsets: Vec<usize>,
    args: Vec<u32>,
    partials: Vec<f64>,
    dense: Vec<DenseRow>,
    adjoints: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            offsets: vec![0],
            ..Default::default()
        }
    }

    pub fn with_capacity(nodes: usize, operands: usize) -> Self {
        let mut offsets = Vec::with_capacity(nodes + 1);
        offsets.push(0);
        Tape {
            values: Vec::with_capacity(nodes),
            kinds: Vec::with_capacity(nodes),
            offsets,
            args: Vec::with_capacity(operands),
            partials: Vec::with_capacity(operands),
            dense: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of recorded operand references.
    pub fn operand_count(&self) -> usize {
        self.args.len()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            nodes: self.len(),
            dense: self.dense.len(),
        }
    }

    /// Drops every node recorded after `cp` and clears the adjoints.
    pub fn truncate(&mut self, cp: Checkpoint) {
        let n = cp.nodes.min(self.len());
        let ops = self.offsets[n];
        self.values.truncate(n);
        self.kinds.truncate(n);
        self.offsets.truncate(n + 1);
        self.args.truncate(ops);
        self.partials.truncate(ops);
        self.dense.truncate(cp.dense);
        self.adjoints.clear();
    }

    pub fn clear(&mut self) {
        self.truncate(Checkpoint { nodes: 0, dense: 0 });
    }

    pub fn kind(&self, node: NodeId) -> OpKind {
        self.kinds[node.index()]
    }

    pub fn operands(&self, node: NodeId) -> &[u32] {
        let i = node.index();
        &self.args[self.offsets[i]..self.offsets[i + 1]]
    }

    #[inline]
    pub fn node_value(&self, node: NodeId) -> f64 {
        self.values[node.index()]
    }

    #[inline]
    pub fn value(&self, v: Var) -> f64 {
        self.values[v.node.index()]
    }

    #[inline]
    pub fn tangent(&self, v: Var) -> f64 {
        v.tangent.map_or(0.0, |t| self.values[t.index()])
    }

    /// Adjoint left by the last [`Tape::backward`]; zero before any sweep.
    pub fn adjoint(&self, v: Var) -> f64 {
        self.node_adjoint(v.node)
    }

    pub fn node_adjoint(&self, node: NodeId) -> f64 {
        self.adjoints.get(node.index()).copied().unwrap_or(0.0)
    }

    /// Adjoints of a leaf block, in block order.
    pub fn block_adjoints(&self, block: LeafBlock) -> &[f64] {
        let s = block.start as usize;
        let e = s + block.len as usize;
        if self.adjoints.len() >= e {
            &self.adjoints[s..e]
        } else {
            &[]
        }
    }

    // ---- node-level primitives (no tangent handling) ----

    #[inline]
    fn push_node(&mut self, kind: OpKind, value: f64) -> NodeId {
        let id = self.values.len();
        assert!(id < u32::MAX as usize, "tape exceeds u32 node space");
        self.values.push(value);
        self.kinds.push(kind);
        self.offsets.push(self.args.len());
        NodeId(id as u32)
    }

    #[inline]
    fn arg(&mut self, node: NodeId, partial: f64) {
        self.args.push(node.0);
        self.partials.push(partial);
        // keep the end offset of the node being built current
        *self.offsets.last_mut().unwrap() = self.args.len();
    }

    fn leaf_node(&mut self, value: f64) -> NodeId {
        self.push_node(OpKind::Leaf, value)
    }

    fn linear_node(&mut self, terms: &[(NodeId, f64)], constant: f64) -> NodeId {
        let value = terms
            .iter()
            .fold(constant, |acc, &(n, k)| acc + k * self.node_value(n));
        let id = self.push_node(OpKind::Linear, value);
        for &(n, k) in terms {
            self.arg(n, k);
        }
        id
    }

    fn mul_node(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.node_value(a), self.node_value(b));
        let id = self.push_node(OpKind::Mul, av * bv);
        self.arg(a, bv);
        self.arg(b, av);
        id
    }

    fn div_node(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.node_value(a), self.node_value(b));
        if bv == 0.0 {
            return Err(AutodiffError::DivisionByZero { node: self.len() });
        }
        let q = av / bv;
        let id = self.push_node(OpKind::Div, q);
        self.arg(a, 1.0 / bv);
        self.arg(b, -q / bv);
        Ok(id)
    }

    fn unary_node(&mut self, kind: OpKind, a: NodeId, value: f64, deriv: f64) -> NodeId {
        let id = self.push_node(kind, value);
        self.arg(a, deriv);
        id
    }

    /// `g·ȧ` where `g` depends on `base`; `dg` is `∂g/∂base`.
    fn chain_node(&mut self, base: NodeId, dot: NodeId, g: f64, dg: f64) -> NodeId {
        let dv = self.node_value(dot);
        let id = self.push_node(OpKind::Chain, g * dv);
        self.arg(base, dg * dv);
        self.arg(dot, g);
        id
    }

    fn dot_node<I>(&mut self, bias: Option<NodeId>, pairs: I) -> NodeId
    where
        I: IntoIterator<Item = (NodeId, NodeId)>,
    {
        let id = self.push_node(OpKind::Dot, 0.0);
        let mut acc = 0.0;
        if let Some(b) = bias {
            acc += self.node_value(b);
            self.args.push(b.0);
            self.partials.push(1.0);
        }
        for (w, x) in pairs {
            let (wv, xv) = (self.values[w.index()], self.values[x.index()]);
            acc += wv * xv;
            self.args.push(w.0);
            self.partials.push(xv);
            self.args.push(x.0);
            self.partials.push(wv);
        }
        *self.offsets.last_mut().unwrap() = self.args.len();
        self.values[id.index()] = acc;
        id
    }

    /// Dense row over contiguous ranges; `w` and `x` must not overlap.
    fn dense_node(&mut self, bias: Option<NodeId>, w: NodeId, x: NodeId, n: usize) -> NodeId {
        let (wi, xi) = (w.index(), x.index());
        debug_assert!(wi + n <= xi || xi + n <= wi, "dense ranges overlap");
        let acc = self.values[wi..wi + n]
            .iter()
            .zip(&self.values[xi..xi + n])
            .fold(bias.map_or(0.0, |b| self.node_value(b)), |acc, (w, x)| acc + w * x);
        let id = self.push_node(OpKind::Dense, acc);
        let row = self.dense.len() as u32;
        self.dense.push(DenseRow {
            bias: bias.map(|b| b.0),
            w: w.0,
            x: x.0,
            n: n as u32,
        });
        self.arg(NodeId(row), 0.0);
        id
    }

    fn sum_tangents(&mut self, terms: &[(Option<NodeId>, f64)]) -> Option<NodeId> {
        let live: Vec<(NodeId, f64)> = terms
            .iter()
            .filter_map(|&(t, k)| t.map(|n| (n, k)))
            .collect();
        match live.as_slice() {
            [] => None,
            [(n, k)] if *k == 1.0 => Some(*n),
            _ => Some(self.linear_node(&live, 0.0)),
        }
    }

    // ---- dual-number operations ----

    /// Leaf with the given value and seeded tangent.
    pub fn lift(&mut self, value: f64, tangent: f64) -> Var {
        let node = self.leaf_node(value);
        let tangent = if tangent != 0.0 {
            Some(self.leaf_node(tangent))
        } else {
            None
        };
        Var { node, tangent }
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.lift(value, 0.0)
    }

    /// Lifts a slice of parameters as consecutive leaves with zero tangent.
    pub fn lift_block(&mut self, values: &[f64]) -> LeafBlock {
        let start = self.len() as u32;
        self.values.extend_from_slice(values);
        self.kinds.extend(std::iter::repeat(OpKind::Leaf).take(values.len()));
        let end = self.args.len();
        self.offsets.extend(std::iter::repeat(end).take(values.len()));
        assert!(self.len() < u32::MAX as usize, "tape exceeds u32 node space");
        LeafBlock {
            start,
            len: values.len() as u32,
        }
    }

    /// The tangent of `v` as a tape value in its own right.
    pub fn tangent_var(&mut self, v: Var) -> Var {
        match v.tangent {
            Some(t) => Var {
                node: t,
                tangent: None,
            },
            None => self.constant(0.0),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.linear(&[(a, 1.0), (b, 1.0)], 0.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.linear(&[(a, 1.0), (b, -1.0)], 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.linear(&[(a, -1.0)], 0.0)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.linear(&[(a, k)], 0.0)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.linear(&[(a, 1.0)], c)
    }

    /// `c + Σ kᵢ·aᵢ` with constant coefficients, as a single node.
    pub fn linear(&mut self, terms: &[(Var, f64)], constant: f64) -> Var {
        let primal: Vec<(NodeId, f64)> = terms.iter().map(|&(v, k)| (v.node, k)).collect();
        let node = self.linear_node(&primal, constant);
        let tan: Vec<(Option<NodeId>, f64)> = terms.iter().map(|&(v, k)| (v.tangent, k)).collect();
        let tangent = if tan.iter().all(|t| t.0.is_none()) {
            None
        } else {
            // a single unit-coefficient tangent is shared, not copied
            Some(
                self.sum_tangents(&tan)
                    .expect("at least one tangent present"),
            )
        };
        Var { node, tangent }
    }

    /// Mean of `vars`, or a zero constant when empty.
    pub fn mean(&mut self, vars: &[Var]) -> Var {
        if vars.is_empty() {
            return self.constant(0.0);
        }
        let k = 1.0 / vars.len() as f64;
        let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, k)).collect();
        self.linear(&terms, 0.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let node = self.mul_node(a.node, b.node);
        let tangent = match (a.tangent, b.tangent) {
            (None, None) => None,
            (Some(at), None) => Some(self.dot_node(None, [(at, b.node)])),
            (None, Some(bt)) => Some(self.dot_node(None, [(a.node, bt)])),
            (Some(at), Some(bt)) => Some(self.dot_node(None, [(at, b.node), (a.node, bt)])),
        };
        Var { node, tangent }
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let node = self.div_node(a.node, b.node)?;
        // (ȧ − q·ḃ) / b
        let tangent = match (a.tangent, b.tangent) {
            (None, None) => None,
            (at, bt) => {
                let num = match bt {
                    None => at.expect("one tangent present"),
                    Some(bt) => {
                        let qb = self.mul_node(node, bt);
                        match at {
                            Some(at) => self.linear_node(&[(at, 1.0), (qb, -1.0)], 0.0),
                            None => self.linear_node(&[(qb, -1.0)], 0.0),
                        }
                    }
                };
                Some(self.div_node(num, b.node)?)
            }
        };
        Ok(Var { node, tangent })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.node_value(a.node).tanh();
        let g = 1.0 - y * y;
        let node = self.unary_node(OpKind::Tanh, a.node, y, g);
        let tangent = a.tangent.map(|at| self.chain_node(node, at, g, -2.0 * y));
        Var { node, tangent }
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = sigmoid(self.node_value(a.node));
        let g = y * (1.0 - y);
        let node = self.unary_node(OpKind::Sigmoid, a.node, y, g);
        let tangent = a
            .tangent
            .map(|at| self.chain_node(node, at, g, 1.0 - 2.0 * y));
        Var { node, tangent }
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.node_value(a.node);
        let s = sigmoid(x);
        let node = self.unary_node(OpKind::Softplus, a.node, softplus(x), s);
        let tangent = a
            .tangent
            .map(|at| self.chain_node(a.node, at, s, s * (1.0 - s)));
        Var { node, tangent }
    }

    /// `bias + Σ wᵢ·xᵢ` where `w` is the leaf block slice `w_first..w_first+x.len()`.
    ///
    /// The weights are treated as tangent-free parameters.
    pub fn affine(&mut self, bias: NodeId, weights: LeafBlock, w_first: usize, inputs: &[Var]) -> Var {
        debug_assert!(w_first + inputs.len() <= weights.len());
        let base = weights.start + w_first as u32;
        let node = self.dot_node(
            Some(bias),
            inputs
                .iter()
                .enumerate()
                .map(|(k, x)| (NodeId(base + k as u32), x.node)),
        );
        let tangent = if inputs.iter().any(|x| x.tangent.is_some()) {
            Some(self.dot_node(
                None,
                inputs
                    .iter()
                    .enumerate()
                    .filter_map(|(k, x)| x.tangent.map(|t| (NodeId(base + k as u32), t))),
            ))
        } else {
            None
        };
        Var { node, tangent }
    }

    /// One fully connected layer, optionally followed by tanh.
    ///
    /// Weights of output `j` are `w_offset + j·inputs.len() ..` in `params`
    /// and biases start at `b_offset`. Nodes are recorded layer-wise (all
    /// pre-activations, then activations, then their tangents) so that the
    /// next layer sees contiguous operands and can use compact dense rows.
    pub fn dense_layer(
        &mut self,
        params: LeafBlock,
        w_offset: usize,
        b_offset: usize,
        n_out: usize,
        inputs: &[Var],
        tanh: bool,
    ) -> Vec<Var> {
        let n_in = inputs.len();
        let contiguous = |ids: &mut dyn Iterator<Item = Option<NodeId>>| -> Option<NodeId> {
            let first = ids.next()??;
            let mut expect = first.0;
            for id in ids {
                expect += 1;
                if id? != NodeId(expect) {
                    return None;
                }
            }
            Some(first)
        };
        let x_block = contiguous(&mut inputs.iter().map(|v| Some(v.node)));
        let pre: Vec<NodeId> = (0..n_out)
            .map(|j| {
                let bias = params.node(b_offset + j);
                let w0 = params.node(w_offset + j * n_in);
                match x_block {
                    Some(x0) => self.dense_node(Some(bias), w0, x0, n_in),
                    None => self.dot_node(
                        Some(bias),
                        inputs.iter().enumerate().map(|(k, x)| (NodeId(w0.0 + k as u32), x.node)),
                    ),
                }
            })
            .collect();
        let act: Vec<NodeId> = if tanh {
            pre.iter()
                .map(|&z| {
                    let y = self.node_value(z).tanh();
                    self.unary_node(OpKind::Tanh, z, y, 1.0 - y * y)
                })
                .collect()
        } else {
            pre.clone()
        };
        if inputs.iter().all(|v| v.tangent.is_none()) {
            return act.into_iter().map(|n| Var { node: n, tangent: None }).collect();
        }
        let t_block = contiguous(&mut inputs.iter().map(|v| v.tangent));
        let pre_t: Vec<NodeId> = (0..n_out)
            .map(|j| {
                let w0 = params.node(w_offset + j * n_in);
                match t_block {
                    Some(t0) => self.dense_node(None, w0, t0, n_in),
                    None => self.dot_node(
                        None,
                        inputs
                            .iter()
                            .enumerate()
                            .filter_map(|(k, x)| x.tangent.map(|t| (NodeId(w0.0 + k as u32), t))),
                    ),
                }
            })
            .collect();
        let act_t: Vec<NodeId> = if tanh {
            act.iter()
                .zip(&pre_t)
                .map(|(&y, &zt)| {
                    let yv = self.node_value(y);
                    self.chain_node(y, zt, 1.0 - yv * yv, -2.0 * yv)
                })
                .collect()
        } else {
            pre_t
        };
        act.into_iter()
            .zip(act_t)
            .map(|(n, t)| Var {
                node: n,
                tangent: Some(t),
            })
            .collect()
    }

    /// Applies `op` to `operands`, checking arity.
    pub fn apply(&mut self, op: Op, operands: &[Var]) -> Result<Var, AutodiffError> {
        if operands.len() != op.arity() {
            return Err(AutodiffError::Arity {
                op,
                expected: op.arity(),
                got: operands.len(),
            });
        }
        let a = operands[0];
        Ok(match op {
            Op::Add => self.add(a, operands[1]),
            Op::Sub => self.sub(a, operands[1]),
            Op::Mul => self.mul(a, operands[1]),
            Op::Div => self.div(a, operands[1])?,
            Op::Tanh => self.tanh(a),
            Op::Neg => self.neg(a),
            Op::Scale(k) => self.scale(a, k),
        })
    }

    /// Reverse sweep from `loss`. Adjoints of every node are available
    /// afterwards through [`Tape::adjoint`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let root = loss.node.index();
        if root >= self.len() {
            return Err(AutodiffError::NotOnTape {
                node: root,
                len: self.len(),
            });
        }
        self.adjoints.clear();
        self.adjoints.resize(root + 1, 0.0);
        self.adjoints[root] = 1.0;
        for i in (0..=root).rev() {
            let a = self.adjoints[i];
            if a == 0.0 {
                continue;
            }
            let (s, e) = (self.offsets[i], self.offsets[i + 1]);
            if self.kinds[i] == OpKind::Dense {
                let row = self.dense[self.args[s] as usize];
                self.dense_backward(row, a);
                continue;
            }
            for k in s..e {
                let j = self.args[k] as usize;
                self.adjoints[j] += self.partials[k] * a;
            }
        }
        // nodes after the root do not influence it
        self.adjoints.resize(self.len(), 0.0);
        Ok(())
    }
}

impl Tape {
    fn dense_backward(&mut self, row: DenseRow, a: f64) {
        if let Some(b) = row.bias {
            self.adjoints[b as usize] += a;
        }
        let (w, x, n) = (row.w as usize, row.x as usize, row.n as usize);
        let values = &self.values;
        // the two ranges are disjoint, so split the adjoint buffer around them
        let (lo, hi) = if w < x { (w, x) } else { (x, w) };
        let (head, tail) = self.adjoints.split_at_mut(hi);
        let adj_lo = &mut head[lo..lo + n];
        let adj_hi = &mut tail[..n];
        let (val_lo, val_hi) = (&values[lo..lo + n], &values[hi..hi + n]);
        // ∂/∂w = x and ∂/∂x = w: each range takes the other's values
        for k in 0..n {
            adj_lo[k] += a * val_hi[k];
            adj_hi[k] += a * val_lo[k];
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
    }

    #[test]
    fn lift_sets_value_and_tangent() {
        let mut tape = Tape::new();
        let z = tape.lift(0.0, 0.0);
        assert_eq!(tape.value(z), 0.0);
        assert_eq!(tape.tangent(z), 0.0);
        assert_eq!(tape.adjoint(z), 0.0);
        let t = tape.lift(1.5, 1.0);
        assert_eq!(tape.value(t), 1.5);
        assert_eq!(tape.tangent(t), 1.0);
    }

    #[test]
    fn leaf_backward_gives_unit_adjoint() {
        let mut tape = Tape::new();
        let x = tape.lift(4.2, 0.0);
        assert_eq!(tape.adjoint(x), 0.0);
        tape.backward(x).unwrap();
        assert_eq!(tape.adjoint(x), 1.0);
    }

    #[test]
    fn tanh_at_zero() {
        let mut tape = Tape::new();
        let x = tape.lift(0.0, 1.0);
        let y = tape.tanh(x);
        assert_eq!(tape.value(y), 0.0);
        assert_eq!(tape.tangent(y), 1.0);
    }

    #[test]
    fn product_rule_adjoints() {
        let mut tape = Tape::new();
        let a = tape.lift(2.0, 0.0);
        let b = tape.lift(3.0, 0.0);
        let c = tape.mul(a, b);
        tape.backward(c).unwrap();
        assert_eq!(tape.adjoint(a), 3.0);
        assert_eq!(tape.adjoint(b), 2.0);
    }

    #[test]
    fn tanh_tangent_matches_central_difference() {
        let mut tape = Tape::new();
        let x = tape.lift(0.7, 1.0);
        let y = tape.tanh(x);
        let h = 1e-6;
        let fd = ((0.7f64 + h).tanh() - (0.7f64 - h).tanh()) / (2.0 * h);
        assert!(rel_err(tape.tangent(y), fd) < 1e-8);
    }

    #[test]
    fn square_power_rule() {
        let mut tape = Tape::new();
        let x = tape.lift(3.0, 0.0);
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_eq!(tape.adjoint(x), 6.0);
    }

    #[test]
    fn squared_time_derivative_is_differentiable() {
        // u = w·t with t seeded: du/dt = w, loss = w², d loss/dw = 2w
        let mut tape = Tape::new();
        let w = tape.lift(1.7, 0.0);
        let t = tape.lift(0.3, 1.0);
        let u = tape.mul(w, t);
        let du = tape.tangent_var(u);
        let loss = tape.square(du);
        tape.backward(loss).unwrap();
        assert_eq!(tape.value(du), 1.7);
        assert!((tape.adjoint(w) - 3.4).abs() < 1e-15);
        // t enters only through u's primal, which the loss ignores
        assert_eq!(tape.adjoint(t), 0.0);
    }

    #[test]
    fn division_by_zero_names_node() {
        let mut tape = Tape::new();
        let a = tape.lift(1.0, 0.0);
        let b = tape.lift(0.0, 0.0);
        let err = tape.div(a, b).unwrap_err();
        assert_eq!(err, AutodiffError::DivisionByZero { node: 2 });
    }

    #[test]
    fn backward_rejects_foreign_node() {
        let mut big = Tape::new();
        for _ in 0..10 {
            big.lift(1.0, 0.0);
        }
        let far = big.lift(2.0, 0.0);
        let mut small = Tape::new();
        small.lift(1.0, 0.0);
        assert!(matches!(
            small.backward(far),
            Err(AutodiffError::NotOnTape { node: 10, len: 1 })
        ));
    }

    #[test]
    fn apply_checks_arity() {
        let mut tape = Tape::new();
        let a = tape.lift(1.0, 0.0);
        assert!(matches!(
            tape.apply(Op::Mul, &[a]),
            Err(AutodiffError::Arity { expected: 2, got: 1, .. })
        ));
        let y = tape.apply(Op::Scale(2.5), &[a]).unwrap();
        assert_eq!(tape.value(y), 2.5);
    }

    #[test]
    fn tangent_linearity_is_exact() {
        let mut tape = Tape::new();
        let a = tape.lift(0.3, 0.123456789);
        let b = tape.lift(-1.1, 9.87654321);
        let c = tape.add(a, b);
        assert_eq!(tape.tangent(c), 0.123456789 + 9.87654321);
    }

    #[test]
    fn truncate_restores_node_count() {
        let mut tape = Tape::new();
        let x = tape.lift(1.0, 1.0);
        let cp = tape.checkpoint();
        let n = tape.len();
        let y = tape.tanh(x);
        let _ = tape.mul(y, x);
        assert!(tape.len() > n);
        tape.truncate(cp);
        assert_eq!(tape.len(), n);
        assert_eq!(tape.operand_count(), 0);
    }

    #[test]
    fn div_and_sigmoid_tangents() {
        let mut tape = Tape::new();
        let x = tape.lift(0.4, 1.0);
        let c = tape.constant(2.0);
        let d = tape.offset(x, 1.5);
        let q = tape.div(c, d).unwrap();
        // d/dx 2/(x+1.5) = -2/(x+1.5)^2
        assert!(rel_err(tape.tangent(q), -2.0 / (1.9f64 * 1.9)) < 1e-14);
        let s = tape.sigmoid(x);
        let sv = sigmoid(0.4);
        assert!(rel_err(tape.tangent(s), sv * (1.0 - sv)) < 1e-14);
        let p = tape.softplus(x);
        assert!(rel_err(tape.tangent(p), sv) < 1e-14);
    }

    #[test]
    fn softplus_round_trip() {
        for &y in &[1e-6, 0.002, 0.5, 3.0, 40.0] {
            assert!(rel_err(softplus(softplus_inverse(y)), y) < 1e-10);
        }
        assert!(softplus(-800.0) >= 0.0);
        assert_eq!(softplus(800.0), 800.0);
    }

    // two-layer net recorded through dense rows vs through generic dot nodes
    fn two_layer_loss(tape: &mut Tape, dense: bool) -> (f64, Vec<f64>) {
        let params: Vec<f64> = (0..3 * 4 + 4 + 4 * 2 + 2).map(|i| ((i * 7 % 11) as f64 - 5.0) / 9.0).collect();
        let block = tape.lift_block(&params);
        let x = [tape.lift(0.3, 1.0), tape.lift(-0.8, 0.0), tape.lift(1.1, 0.0)];
        let (h, y) = if dense {
            let h = tape.dense_layer(block, 0, 12, 4, &x, true);
            let y = tape.dense_layer(block, 16, 24, 2, &h, false);
            (h, y)
        } else {
            let h: Vec<Var> = (0..4)
                .map(|j| {
                    let z = tape.affine(block.node(12 + j), block, j * 3, &x);
                    tape.tanh(z)
                })
                .collect();
            let y = (0..2).map(|j| tape.affine(block.node(24 + j), block, 16 + j * 4, &h)).collect();
            (h, y)
        };
        assert_eq!(h.len(), 4);
        let mut terms = Vec::new();
        for v in &y {
            let dt = tape.tangent_var(*v);
            terms.push(tape.square(dt));
            terms.push(tape.square(*v));
        }
        let loss = tape.linear(&terms.iter().map(|&v| (v, 1.0)).collect::<Vec<_>>(), 0.0);
        tape.backward(loss).unwrap();
        (tape.value(loss), tape.block_adjoints(block).to_vec())
    }

    #[test]
    fn dense_layer_matches_generic_dot() {
        let (l1, g1) = two_layer_loss(&mut Tape::new(), true);
        let (l2, g2) = two_layer_loss(&mut Tape::new(), false);
        assert_eq!(l1.to_bits(), l2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-14 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}
