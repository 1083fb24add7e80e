//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix operations in evaluation order. Gradients come in
//! two flavours:
//!
//! * [`Tape::grad`] runs a plain numeric backward sweep. This is the fast path
//!   used by the samplers.
//! * [`Tape::grad_graph`] records the backward sweep itself onto the tape, so the
//!   returned gradients are ordinary [`Var`]s that can be differentiated again.
//!   Losses built from input gradients (the flow loss) need this to obtain
//!   parameter gradients.
//!
//! Every op's adjoint is expressed with other ops on the tape, which is what
//! makes the second sweep possible. The op set is exactly what the invariant
//! network needs, nothing more.

use std::borrow::Cow;

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `r×c` plus a `1×c` row broadcast over all rows.
    AddRow(Var, Var),
    /// `1×c` repeated to `r×c`.
    BroadcastRows(Var),
    /// Column sums, `r×c → 1×c`.
    SumRows(Var),
    SumAll(Var),
    /// `1×1` repeated to `r×c`.
    BroadcastScalar(Var),
    Tanh(Var),
    /// `1 − a²`, the tanh derivative written in terms of the tanh output.
    OneMinusSquare(Var),
    /// Pair rows (lexicographic over `n` nodes) summed into the two endpoint rows.
    NodesFromPairs(Var),
    /// Each pair row is the sum of its two endpoint rows.
    PairsFromNodes(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// Embeds `a` at column `start` of a zero matrix with `total` columns.
    PadCols(Var, usize),
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    tracked: bool,
}

/// Operation record. Values borrowed from the caller (parameters) are not copied.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0]
            .value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn var_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Mat) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn unary(&mut self, a: Var, value: Mat, op: Op) -> Var {
        let t = self.tracked(a);
        self.push(Cow::Owned(value), op, t)
    }

    fn binary(&mut self, a: Var, b: Var, value: Mat, op: Op) -> Var {
        let t = self.tracked(a) || self.tracked(b);
        self.push(Cow::Owned(value), op, t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.unary(a, v, Op::Scale(a, k))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        debug_assert_eq!(r.nrows(), 1);
        let v = self.value(a) + r;
        self.binary(a, row, v, Op::AddRow(a, row))
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let r = self.value(a);
        let v = r.broadcast((rows, r.ncols())).expect("row broadcast").to_owned();
        self.unary(a, v, Op::BroadcastRows(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(a, v, Op::SumRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, v, Op::SumAll(a))
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Array2::from_elem((rows, cols), self.scalar(a));
        self.unary(a, v, Op::BroadcastScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn one_minus_square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x * x);
        self.unary(a, v, Op::OneMinusSquare(a))
    }

    pub fn nodes_from_pairs(&mut self, a: Var, n: usize) -> Var {
        let v = nodes_from_pairs(self.value(a), n);
        self.unary(a, v, Op::NodesFromPairs(a))
    }

    pub fn pairs_from_nodes(&mut self, a: Var) -> Var {
        let v = pairs_from_nodes(self.value(a));
        self.unary(a, v, Op::PairsFromNodes(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows must agree");
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.unary(a, v, Op::SliceCols(a, start, len))
    }

    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let src = self.value(a);
        let mut v = Array2::zeros((src.nrows(), total));
        v.slice_mut(s![.., start..start + src.ncols()]).assign(src);
        self.unary(a, v, Op::PadCols(a, start))
    }

    /// Sum of squared entries as a `1×1` node.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let sq = self.mul(a, a);
        self.sum_all(sq)
    }

    /// Numeric reverse sweep from the scalar `out`. Returns one adjoint per
    /// entry of `wrt`; untouched inputs get zeros.
    pub fn grad(&self, out: Var, wrt: &[Var]) -> Vec<Mat> {
        let mut adj: Vec<Option<Mat>> = vec![None; out.0 + 1];
        adj[out.0] = Some(Array2::ones(self.value(out).raw_dim()));
        for k in (0..=out.0).rev() {
            let Some(g) = adj[k].take() else { continue };
            if !self.nodes[k].tracked {
                continue;
            }
            self.backprop_numeric(k, &g, &mut adj);
            adj[k] = Some(g);
        }
        wrt.iter()
            .map(|&w| {
                adj.get(w.0)
                    .and_then(|a| a.clone())
                    .unwrap_or_else(|| Array2::zeros(self.value(w).raw_dim()))
            })
            .collect()
    }

    fn backprop_numeric(&self, k: usize, g: &Mat, adj: &mut [Option<Mat>]) {
        let acc = |adj: &mut [Option<Mat>], v: Var, d: Mat| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut adj[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        let val = |v: Var| self.value(v);
        match &self.nodes[k].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    acc(adj, *a, g.dot(&val(*b).t()));
                }
                if self.tracked(*b) {
                    acc(adj, *b, val(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(adj, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(adj, *a, g.clone());
                acc(adj, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    acc(adj, *a, g * val(*b));
                }
                if self.tracked(*b) {
                    acc(adj, *b, g * val(*a));
                }
            }
            Op::Scale(a, c) => acc(adj, *a, g * *c),
            Op::AddRow(a, r) => {
                acc(adj, *a, g.clone());
                if self.tracked(*r) {
                    acc(adj, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::BroadcastRows(a) => acc(adj, *a, g.sum_axis(Axis(0)).insert_axis(Axis(0))),
            Op::SumRows(a) => {
                let rows = val(*a).nrows();
                acc(adj, *a, g.broadcast((rows, g.ncols())).unwrap().to_owned());
            }
            Op::SumAll(a) => acc(adj, *a, Array2::from_elem(val(*a).raw_dim(), g[[0, 0]])),
            Op::BroadcastScalar(a) => acc(adj, *a, Array2::from_elem((1, 1), g.sum())),
            Op::Tanh(a) => {
                let y = &self.nodes[k].value;
                let d = ndarray::Zip::from(g).and(y.as_ref()).map_collect(|&gi, &yi| gi * (1.0 - yi * yi));
                acc(adj, *a, d);
            }
            Op::OneMinusSquare(a) => acc(adj, *a, g * val(*a) * -2.0),
            Op::NodesFromPairs(a) => acc(adj, *a, pairs_from_nodes(g)),
            Op::PairsFromNodes(a) => {
                let n = val(*a).nrows();
                acc(adj, *a, nodes_from_pairs(g, n));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = val(*p).ncols();
                    acc(adj, *p, g.slice(s![.., start..start + w]).to_owned());
                    start += w;
                }
            }
            Op::SliceCols(a, start, len) => {
                let mut d = Array2::zeros(val(*a).raw_dim());
                d.slice_mut(s![.., *start..*start + *len]).assign(g);
                acc(adj, *a, d);
            }
            Op::PadCols(a, start) => {
                let w = val(*a).ncols();
                acc(adj, *a, g.slice(s![.., *start..*start + w]).to_owned());
            }
        }
    }

    /// Reverse sweep recorded on the tape. The returned adjoints are
    /// differentiable functions of every tracked input.
    pub fn grad_graph(&mut self, out: Var, wrt: &[Var]) -> Vec<Var> {
        let mut adj: Vec<Option<Var>> = vec![None; out.0 + 1];
        let seed = Array2::ones(self.value(out).raw_dim());
        adj[out.0] = Some(self.constant(seed));
        for k in (0..=out.0).rev() {
            let Some(g) = adj[k] else { continue };
            if !self.nodes[k].tracked {
                continue;
            }
            let op = self.nodes[k].op.clone();
            self.backprop_graph(Var(k), &op, g, &mut adj);
        }
        wrt.iter()
            .map(|&w| match adj.get(w.0).copied().flatten() {
                Some(a) => a,
                None => {
                    let z = Array2::zeros(self.value(w).raw_dim());
                    self.constant(z)
                }
            })
            .collect()
    }

    fn backprop_graph(&mut self, node: Var, op: &Op, g: Var, adj: &mut [Option<Var>]) {
        fn acc(t: &mut Tape, adj: &mut [Option<Var>], v: Var, d: Var) {
            if !t.tracked(v) {
                return;
            }
            adj[v.0] = Some(match adj[v.0] {
                Some(existing) => t.add(existing, d),
                None => d,
            });
        }
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(a) {
                    let bt = self.transpose(b);
                    let d = self.matmul(g, bt);
                    acc(self, adj, a, d);
                }
                if self.tracked(b) {
                    let at = self.transpose(a);
                    let d = self.matmul(at, g);
                    acc(self, adj, b, d);
                }
            }
            Op::Transpose(a) => {
                let d = self.transpose(g);
                acc(self, adj, a, d);
            }
            Op::Add(a, b) => {
                acc(self, adj, a, g);
                acc(self, adj, b, g);
            }
            Op::Sub(a, b) => {
                acc(self, adj, a, g);
                if self.tracked(b) {
                    let d = self.scale(g, -1.0);
                    acc(self, adj, b, d);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(a) {
                    let d = self.mul(g, b);
                    acc(self, adj, a, d);
                }
                if self.tracked(b) {
                    let d = self.mul(g, a);
                    acc(self, adj, b, d);
                }
            }
            Op::Scale(a, c) => {
                let d = self.scale(g, c);
                acc(self, adj, a, d);
            }
            Op::AddRow(a, r) => {
                acc(self, adj, a, g);
                if self.tracked(r) {
                    let d = self.sum_rows(g);
                    acc(self, adj, r, d);
                }
            }
            Op::BroadcastRows(a) => {
                let d = self.sum_rows(g);
                acc(self, adj, a, d);
            }
            Op::SumRows(a) => {
                let rows = self.value(a).nrows();
                let d = self.broadcast_rows(g, rows);
                acc(self, adj, a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.value(a).dim();
                let d = self.broadcast_scalar(g, r, c);
                acc(self, adj, a, d);
            }
            Op::BroadcastScalar(a) => {
                let d = self.sum_all(g);
                acc(self, adj, a, d);
            }
            Op::Tanh(a) => {
                let deriv = self.one_minus_square(node);
                let d = self.mul(g, deriv);
                acc(self, adj, a, d);
            }
            Op::OneMinusSquare(a) => {
                let ga = self.mul(g, a);
                let d = self.scale(ga, -2.0);
                acc(self, adj, a, d);
            }
            Op::NodesFromPairs(a) => {
                let d = self.pairs_from_nodes(g);
                acc(self, adj, a, d);
            }
            Op::PairsFromNodes(a) => {
                let n = self.value(a).nrows();
                let d = self.nodes_from_pairs(g, n);
                acc(self, adj, a, d);
            }
            Op::ConcatCols(ref parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.tracked(p) {
                        let d = self.slice_cols(g, start, w);
                        acc(self, adj, p, d);
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start, _) => {
                let total = self.value(a).ncols();
                let d = self.pad_cols(g, start, total);
                acc(self, adj, a, d);
            }
            Op::PadCols(a, start) => {
                let w = self.value(a).ncols();
                let d = self.slice_cols(g, start, w);
                acc(self, adj, a, d);
            }
        }
    }
}

/// `out[i] = Σ_{p ∋ i} pairs[p]` for pairs in lexicographic order over `n` nodes.
fn nodes_from_pairs(pairs: &Mat, n: usize) -> Mat {
    let mut out = Array2::zeros((n, pairs.ncols()));
    let mut p = 0;
    for i in 0..n {
        for j in i + 1..n {
            let row = pairs.row(p);
            out.row_mut(i).scaled_add(1.0, &row);
            out.row_mut(j).scaled_add(1.0, &row);
            p += 1;
        }
    }
    debug_assert_eq!(p, pairs.nrows());
    out
}

/// `out[(i, j)] = nodes[i] + nodes[j]`.
fn pairs_from_nodes(nodes: &Mat) -> Mat {
    let n = nodes.nrows();
    let m = n * n.saturating_sub(1) / 2;
    let mut out = Array2::zeros((m, nodes.ncols()));
    let mut p = 0;
    for i in 0..n {
        for j in i + 1..n {
            let mut row = out.row_mut(p);
            row.assign(&nodes.row(i));
            row += &nodes.row(j);
            p += 1;
        }
    }
    out
}
