//! Reverse-mode gradient tape over small dense matrices.
//!
//! Every node holds a row-major `rows x cols` block in a single value arena;
//! scalars are `1 x 1` blocks. Nodes are appended in evaluation order, so the
//! tape is topologically sorted by construction and [`backward`] walks it
//! once in reverse.
//!
//! Straight-through nodes carry a hard forward value and route their adjoint
//! unchanged into a soft surrogate. Ops with non-differentiable loci (`abs`,
//! `min`/`max`, `clamp`, and whatever the caller reports through
//! [`Tape::note_margin`]) track the distance of the evaluation point to the
//! nearest kink, which [`check_gradients`] uses to exclude points where finite
//! differences are meaningless.

use std::fmt;

use thiserror::Error;

/// Evaluation points closer than this to a kink are excluded from gradient
/// checks (pre-activation units).
pub const BOUNDARY_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum DiffError {
    #[error("malformed tape: {0}")]
    MalformedTape(String),
    #[error("non-finite value encountered: {0}")]
    Numeric(String),
    #[error("finite-difference step {0} outside (0, 1e-2]")]
    InvalidStep(f64),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Raw node index. Mostly useful for diagnostics.
    pub fn index(self) -> usize {
        self.0
    }

    /// Builds a handle from a raw index without checking it against any tape.
    pub fn from_index(index: usize) -> Self {
        Var(index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Ln,
    Logistic,
    Tanh,
    Abs,
    Square,
    Softplus,
    Scale(f64),
    Offset(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

/// A recorded primitive.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// Leaf block: parameter or constant.
    Input,
    Unary(UnaryOp, Var),
    Binary(BinaryOp, Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Slice { src: Var, start: usize },
    Stack(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    /// Forward value is the stored hard block; backward feeds the soft operand.
    StraightThrough(Var),
}

impl Op {
    fn operands(&self) -> Vec<Var> {
        match self {
            Op::Input => Vec::new(),
            Op::Unary(_, a)
            | Op::Sum(a)
            | Op::Slice { src: a, .. }
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::StraightThrough(a) => vec![*a],
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Stack(items) => items.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Shape,
    offset: usize,
}

#[derive(Clone, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<f64>,
    min_margin: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: Shape, b: Shape) -> Option<Shape> {
    let dim = |x: usize, y: usize| {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    Some(Shape::new(dim(a.rows, b.rows)?, dim(a.cols, b.cols)?))
}

#[inline]
fn bidx(s: Shape, r: usize, c: usize) -> usize {
    let rr = if s.rows == 1 { 0 } else { r };
    let cc = if s.cols == 1 { 0 } else { c };
    rr * s.cols + cc
}

#[inline]
fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
            min_margin: f64::INFINITY,
        }
    }

    pub fn with_capacity(nodes: usize, values: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            values: Vec::with_capacity(values),
            min_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let n = &self.nodes[v.0];
        &self.values[n.offset..n.offset + n.shape.len()]
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.shape(v).len(), 1);
        self.values[self.nodes[v.0].offset]
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    /// Smallest distance to a non-differentiable locus seen so far.
    pub fn min_margin(&self) -> f64 {
        self.min_margin
    }

    pub fn note_margin(&mut self, margin: f64) {
        let m = margin.abs();
        if m < self.min_margin {
            self.min_margin = m;
        }
    }

    fn begin(&mut self, op: Op, shape: Shape) -> (usize, usize) {
        let offset = self.values.len();
        let id = self.nodes.len();
        self.nodes.push(Node { op, shape, offset });
        (id, offset)
    }

    fn off(&self, v: Var) -> usize {
        self.nodes[v.0].offset
    }

    pub fn input(&mut self, values: &[f64], rows: usize, cols: usize) -> Var {
        assert_eq!(values.len(), rows * cols, "input block size mismatch");
        let (id, _) = self.begin(Op::Input, Shape::new(rows, cols));
        self.values.extend_from_slice(values);
        Var(id)
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.input(values, 1, values.len())
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.input(&[value], 1, 1)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let shape = self.shape(a);
        let ao = self.off(a);
        if matches!(op, UnaryOp::Abs | UnaryOp::Clamp(..)) {
            let mut m = f64::INFINITY;
            for i in 0..shape.len() {
                let x = self.values[ao + i];
                let d = match op {
                    UnaryOp::Clamp(lo, hi) => (x - lo).abs().min((x - hi).abs()),
                    _ => x.abs(),
                };
                m = m.min(d);
            }
            self.note_margin(m);
        }
        let (id, _) = self.begin(Op::Unary(op, a), shape);
        for i in 0..shape.len() {
            let x = self.values[ao + i];
            let y = match op {
                UnaryOp::Neg => -x,
                UnaryOp::Exp => x.exp(),
                UnaryOp::Ln => x.ln(),
                UnaryOp::Logistic => logistic(x),
                UnaryOp::Tanh => x.tanh(),
                UnaryOp::Abs => x.abs(),
                UnaryOp::Square => x * x,
                UnaryOp::Softplus => softplus(x),
                UnaryOp::Scale(c) => c * x,
                UnaryOp::Offset(c) => x + c,
                UnaryOp::Clamp(lo, hi) => x.max(lo).min(hi),
            };
            self.values.push(y);
        }
        Var(id)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Ln, a)
    }
    pub fn logistic(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Logistic, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Tanh, a)
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Softplus, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Scale(c), a)
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(UnaryOp::Offset(c), a)
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(UnaryOp::Clamp(lo, hi), a)
    }

    /// Elementwise binary op with broadcasting over unit dimensions.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb)
            .unwrap_or_else(|| panic!("cannot broadcast {sa:?} with {sb:?} for {op:?}"));
        let (ao, bo) = (self.off(a), self.off(b));
        if matches!(op, BinaryOp::Min | BinaryOp::Max) {
            let mut m = f64::INFINITY;
            for r in 0..shape.rows {
                for c in 0..shape.cols {
                    let x = self.values[ao + bidx(sa, r, c)];
                    let y = self.values[bo + bidx(sb, r, c)];
                    m = m.min((x - y).abs());
                }
            }
            self.note_margin(m);
        }
        let (id, _) = self.begin(Op::Binary(op, a, b), shape);
        for r in 0..shape.rows {
            for c in 0..shape.cols {
                let x = self.values[ao + bidx(sa, r, c)];
                let y = self.values[bo + bidx(sb, r, c)];
                let z = match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                    BinaryOp::Min => {
                        if x <= y {
                            x
                        } else {
                            y
                        }
                    }
                    BinaryOp::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                };
                self.values.push(z);
            }
        }
        Var(id)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Div, a, b)
    }
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Min, a, b)
    }
    pub fn max(&mut self, a: Var, b: Var) -> Var {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa.cols, sb.rows, "matmul inner dimension mismatch");
        let shape = Shape::new(sa.rows, sb.cols);
        let (ao, bo) = (self.off(a), self.off(b));
        let (id, offset) = self.begin(Op::MatMul(a, b), shape);
        self.values.resize(offset + shape.len(), 0.0);
        let (inputs, out) = self.values.split_at_mut(offset);
        gemm(
            sa.rows,
            sa.cols,
            sb.cols,
            &inputs[ao..],
            (sa.cols as isize, 1),
            &inputs[bo..],
            (sb.cols as isize, 1),
            out,
            0.0,
        );
        Var(id)
    }

    /// Sum of all entries as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum::<f64>();
        let (id, _) = self.begin(Op::Sum(a), Shape::new(1, 1));
        self.values.push(s);
        Var(id)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.shape(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Contiguous window of the flattened block, reshaped to `rows x cols`.
    pub fn slice(&mut self, a: Var, start: usize, rows: usize, cols: usize) -> Var {
        let len = self.shape(a).len();
        assert!(start + rows * cols <= len, "slice out of range");
        let ao = self.off(a);
        let (id, _) = self.begin(Op::Slice { src: a, start }, Shape::new(rows, cols));
        for i in 0..rows * cols {
            let v = self.values[ao + start + i];
            self.values.push(v);
        }
        Var(id)
    }

    pub fn index(&mut self, a: Var, i: usize) -> Var {
        self.slice(a, i, 1, 1)
    }

    /// Packs scalar nodes into a `1 x n` row.
    pub fn stack(&mut self, items: &[Var]) -> Var {
        for &v in items {
            assert_eq!(self.shape(v).len(), 1, "stack expects scalars");
        }
        let vals: Vec<f64> = items.iter().map(|&v| self.scalar(v)).collect();
        let (id, _) = self.begin(Op::Stack(items.to_vec()), Shape::new(1, items.len()));
        self.values.extend_from_slice(&vals);
        Var(id)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let ao = self.off(a);
        let (id, offset) = self.begin(Op::Softmax(a), shape);
        self.values.resize(offset + shape.len(), 0.0);
        for r in 0..shape.rows {
            let (src, dst) = self.values.split_at_mut(offset);
            let row = &src[ao + r * shape.cols..ao + (r + 1) * shape.cols];
            softmax_into(row, &mut dst[r * shape.cols..(r + 1) * shape.cols]);
        }
        Var(id)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a);
        let ao = self.off(a);
        let (id, offset) = self.begin(Op::LogSoftmax(a), shape);
        self.values.resize(offset + shape.len(), 0.0);
        for r in 0..shape.rows {
            let (src, dst) = self.values.split_at_mut(offset);
            let row = &src[ao + r * shape.cols..ao + (r + 1) * shape.cols];
            let lse = log_sum_exp(row);
            for (d, &x) in dst[r * shape.cols..(r + 1) * shape.cols].iter_mut().zip(row) {
                *d = x - lse;
            }
        }
        Var(id)
    }

    /// Hard forward value whose gradient is that of `soft`.
    pub fn straight_through(&mut self, hard: &[f64], soft: Var) -> Var {
        let shape = self.shape(soft);
        assert_eq!(hard.len(), shape.len(), "straight-through shape mismatch");
        let (id, _) = self.begin(Op::StraightThrough(soft), shape);
        self.values.extend_from_slice(hard);
        Var(id)
    }

    /// Appends an already-described primitive, validating that its operands exist.
    ///
    /// `Input` and `StraightThrough` need value blocks and must go through
    /// [`Tape::input`] and [`Tape::straight_through`].
    pub fn push(&mut self, op: Op) -> Result<Var, DiffError> {
        for v in op.operands() {
            if v.0 >= self.nodes.len() {
                return Err(DiffError::MalformedTape(format!(
                    "operand #{} missing (tape has {} nodes)",
                    v.0,
                    self.nodes.len()
                )));
            }
        }
        Ok(match op {
            Op::Input | Op::StraightThrough(_) => {
                return Err(DiffError::MalformedTape(
                    "value-carrying op pushed without values".into(),
                ))
            }
            Op::Unary(u, a) => self.unary(u, a),
            Op::Binary(b, x, y) => self.binary(b, x, y),
            Op::MatMul(a, b) => self.matmul(a, b),
            Op::Sum(a) => self.sum(a),
            Op::Slice { src, start } => self.slice(src, start, 1, 1),
            Op::Stack(items) => self.stack(&items),
            Op::Softmax(a) => self.softmax(a),
            Op::LogSoftmax(a) => self.log_softmax(a),
        })
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// `c = a * b + beta * c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    // SAFETY: strides describe blocks that lie inside the given slices; the
    // output block does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adjoints for every node of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<f64>,
    offsets: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &[f64] {
        let (o, n) = self.offsets[v.0];
        &self.grads[o..o + n]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.get(v)[0]
    }
}

/// Propagates `d output / d node` for every node of the tape.
pub fn backward(tape: &Tape, output: Var) -> Result<Gradients, DiffError> {
    let shape = tape
        .nodes
        .get(output.0)
        .ok_or_else(|| {
            DiffError::MalformedTape(format!(
                "output #{} not on tape ({} nodes)",
                output.0,
                tape.nodes.len()
            ))
        })?
        .shape;
    if shape.len() != 1 {
        return Err(DiffError::MalformedTape(format!(
            "output must be scalar, got {}x{}",
            shape.rows, shape.cols
        )));
    }
    backward_from(tape, output, &[1.0])
}

/// Vector-Jacobian product seeded at an arbitrary node.
pub fn backward_from(tape: &Tape, node: Var, seed: &[f64]) -> Result<Gradients, DiffError> {
    if node.0 >= tape.nodes.len() {
        return Err(DiffError::MalformedTape(format!(
            "seed node #{} not on tape",
            node.0
        )));
    }
    for (i, n) in tape.nodes.iter().enumerate().take(node.0 + 1) {
        for v in n.op.operands() {
            if v.0 >= i {
                return Err(DiffError::MalformedTape(format!(
                    "node #{i} consumes #{} which does not precede it",
                    v.0
                )));
            }
        }
    }
    let seed_shape = tape.nodes[node.0].shape;
    if seed.len() != seed_shape.len() {
        return Err(DiffError::MalformedTape("seed length mismatch".into()));
    }

    let vals = &tape.values;
    let mut grads = vec![0.0; vals.len()];
    let so = tape.nodes[node.0].offset;
    grads[so..so + seed.len()].copy_from_slice(seed);

    for i in (0..=node.0).rev() {
        let n = &tape.nodes[i];
        let (lower, upper) = grads.split_at_mut(n.offset);
        let g = &upper[..n.shape.len()];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let out = &vals[n.offset..n.offset + n.shape.len()];
        match &n.op {
            Op::Input => {}
            Op::Unary(op, a) => {
                let an = &tape.nodes[a.0];
                let x = &vals[an.offset..an.offset + an.shape.len()];
                let ga = &mut lower[an.offset..an.offset + an.shape.len()];
                for j in 0..g.len() {
                    let d = match *op {
                        UnaryOp::Neg => -1.0,
                        UnaryOp::Exp => out[j],
                        UnaryOp::Ln => 1.0 / x[j],
                        UnaryOp::Logistic => out[j] * (1.0 - out[j]),
                        UnaryOp::Tanh => 1.0 - out[j] * out[j],
                        UnaryOp::Abs => {
                            if x[j] > 0.0 {
                                1.0
                            } else if x[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryOp::Square => 2.0 * x[j],
                        UnaryOp::Softplus => logistic(x[j]),
                        UnaryOp::Scale(c) => c,
                        UnaryOp::Offset(_) => 1.0,
                        UnaryOp::Clamp(lo, hi) => {
                            if x[j] >= lo && x[j] <= hi {
                                1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    ga[j] += g[j] * d;
                }
            }
            Op::Binary(op, a, b) => {
                let (an, bn) = (&tape.nodes[a.0], &tape.nodes[b.0]);
                let (sa, sb) = (an.shape, bn.shape);
                for r in 0..n.shape.rows {
                    for c in 0..n.shape.cols {
                        let gj = g[r * n.shape.cols + c];
                        if gj == 0.0 {
                            continue;
                        }
                        let ia = an.offset + bidx(sa, r, c);
                        let ib = bn.offset + bidx(sb, r, c);
                        let (x, y) = (vals[ia], vals[ib]);
                        let (da, db) = match op {
                            BinaryOp::Add => (1.0, 1.0),
                            BinaryOp::Sub => (1.0, -1.0),
                            BinaryOp::Mul => (y, x),
                            BinaryOp::Div => (1.0 / y, -x / (y * y)),
                            BinaryOp::Min => {
                                if x <= y {
                                    (1.0, 0.0)
                                } else {
                                    (0.0, 1.0)
                                }
                            }
                            BinaryOp::Max => {
                                if x >= y {
                                    (1.0, 0.0)
                                } else {
                                    (0.0, 1.0)
                                }
                            }
                        };
                        lower[ia] += gj * da;
                        lower[ib] += gj * db;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (an, bn) = (&tape.nodes[a.0], &tape.nodes[b.0]);
                let (m, k, nn) = (an.shape.rows, an.shape.cols, bn.shape.cols);
                // dA (m x k) += G (m x n) * B^T
                let mut da = vec![0.0; m * k];
                gemm(
                    m,
                    nn,
                    k,
                    g,
                    (nn as isize, 1),
                    &vals[bn.offset..],
                    (1, nn as isize),
                    &mut da,
                    0.0,
                );
                // dB (k x n) += A^T * G
                let mut db = vec![0.0; k * nn];
                gemm(
                    k,
                    m,
                    nn,
                    &vals[an.offset..],
                    (1, k as isize),
                    g,
                    (nn as isize, 1),
                    &mut db,
                    0.0,
                );
                for (dst, v) in lower[an.offset..an.offset + m * k].iter_mut().zip(&da) {
                    *dst += v;
                }
                for (dst, v) in lower[bn.offset..bn.offset + k * nn].iter_mut().zip(&db) {
                    *dst += v;
                }
            }
            Op::Sum(a) => {
                let an = &tape.nodes[a.0];
                for dst in &mut lower[an.offset..an.offset + an.shape.len()] {
                    *dst += g[0];
                }
            }
            Op::Slice { src, start } => {
                let o = tape.nodes[src.0].offset + start;
                for (j, gj) in g.iter().enumerate() {
                    lower[o + j] += gj;
                }
            }
            Op::Stack(items) => {
                for (j, v) in items.iter().enumerate() {
                    lower[tape.nodes[v.0].offset] += g[j];
                }
            }
            Op::Softmax(a) => {
                let an = &tape.nodes[a.0];
                let cols = n.shape.cols;
                for r in 0..n.shape.rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        lower[an.offset + r * cols + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let an = &tape.nodes[a.0];
                let cols = n.shape.cols;
                for r in 0..n.shape.rows {
                    let y = &out[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let total: f64 = gr.iter().sum();
                    for j in 0..cols {
                        lower[an.offset + r * cols + j] += gr[j] - y[j].exp() * total;
                    }
                }
            }
            Op::StraightThrough(soft) => {
                let sn = &tape.nodes[soft.0];
                for (j, gj) in g.iter().enumerate() {
                    lower[sn.offset + j] += gj;
                }
            }
        }
    }

    Ok(Gradients {
        grads,
        offsets: tape
            .nodes
            .iter()
            .map(|n| (n.offset, n.shape.len()))
            .collect(),
    })
}

/// One parameter's analytic vs central-difference derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientReport {
    pub checks: Vec<ParamCheck>,
    pub max_rel_error: f64,
    /// Distance of the evaluation point to the nearest kink.
    pub min_margin: f64,
    /// Set when the point sits within [`BOUNDARY_TOLERANCE`] of a kink.
    pub excluded: bool,
}

pub fn relative_error(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(1e-8)
}

impl fmt::Display for GradientReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>6}  {:>16}  {:>16}  {:>10}",
            "param", "analytic", "numeric", "rel_err"
        )?;
        for c in &self.checks {
            writeln!(
                f,
                "{:>6}  {:>16.9e}  {:>16.9e}  {:>10.3e}",
                c.index, c.analytic, c.numeric, c.rel_error
            )?;
        }
        write!(
            f,
            "max rel error {:.3e}; margin {:.3e}{}",
            self.max_rel_error,
            self.min_margin,
            if self.excluded { " (EXCLUDED: at a kink)" } else { "" }
        )
    }
}

/// Compares tape gradients of `f` at `params` against central differences.
///
/// `f` receives the parameters as a single `1 x n` row and must return a
/// scalar node.
pub fn check_gradients<F>(f: F, params: &[f64], step: f64) -> Result<GradientReport, DiffError>
where
    F: Fn(&mut Tape, Var) -> Var,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(DiffError::InvalidStep(step));
    }
    let eval = |p: &[f64]| -> (Tape, Var, Var) {
        let mut tape = Tape::new();
        let pv = tape.row(p);
        let out = f(&mut tape, pv);
        (tape, pv, out)
    };

    let (tape, pv, out) = eval(params);
    let base = tape.scalar(out);
    if !base.is_finite() {
        return Err(DiffError::Numeric(format!("f(params) = {base}")));
    }
    let min_margin = tape.min_margin();
    let grads = backward(&tape, out)?;
    let analytic = grads.get(pv).to_vec();

    let mut checks = Vec::with_capacity(params.len());
    let mut p = params.to_vec();
    for i in 0..params.len() {
        p[i] = params[i] + step;
        let (t, _, o) = eval(&p);
        let up = t.scalar(o);
        p[i] = params[i] - step;
        let (t, _, o) = eval(&p);
        let down = t.scalar(o);
        p[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(DiffError::Numeric(format!(
                "f(params ± step) non-finite at index {i}"
            )));
        }
        let numeric = (up - down) / (2.0 * step);
        checks.push(ParamCheck {
            index: i,
            analytic: analytic[i],
            numeric,
            rel_error: relative_error(analytic[i], numeric),
        });
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        checks,
        max_rel_error,
        min_margin,
        excluded: min_margin < BOUNDARY_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn product_gradient() {
        let mut t = Tape::new();
        let w = t.constant(3.0);
        let x = t.constant(2.0);
        let f = t.mul(w, x);
        let g = backward(&t, f).unwrap();
        assert_eq!(g.scalar(w), 2.0);
        assert_eq!(g.scalar(x), 3.0);
    }

    #[test]
    fn logistic_slope_at_zero() {
        let mut t = Tape::new();
        let z = t.constant(0.0);
        let s = t.logistic(z);
        assert_eq!(t.scalar(s), 0.5);
        let g = backward(&t, s).unwrap();
        assert_eq!(g.scalar(z), 0.25);
    }

    #[test]
    fn quadratic_check_is_exact() {
        let report = check_gradients(
            |t, p| {
                let sq = t.square(p);
                let s = t.sum(sq);
                t.scale(s, 0.5)
            },
            &[3.0, 4.0],
            1e-4,
        )
        .unwrap();
        assert_relative_eq!(report.checks[0].analytic, 3.0);
        assert_relative_eq!(report.checks[1].analytic, 4.0);
        assert!(report.max_rel_error < 1e-9, "{report}");
        assert!(!report.excluded);
    }

    #[test]
    fn logistic_chain_matches_central_differences() {
        let report = check_gradients(
            |t, p| {
                let a = t.index(p, 0);
                let b = t.index(p, 1);
                let ab = t.mul(a, b);
                let s = t.logistic(ab);
                let e = t.exp(s);
                let l = t.ln(e);
                let s2 = t.logistic(l);
                t.mul(s2, a)
            },
            &[0.7, -1.3],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report}");
    }

    #[test]
    fn kink_points_are_flagged() {
        let report = check_gradients(
            |t, p| {
                let a = t.abs(p);
                t.sum(a)
            },
            &[1e-4, 2.0],
            1e-5,
        )
        .unwrap();
        assert!(report.excluded);

        // Reported hard decisions count as kinks too.
        let report = check_gradients(
            |t, p| {
                let v = t.scalar(p);
                t.note_margin(v);
                t.sum(p)
            },
            &[0.0],
            1e-5,
        )
        .unwrap();
        assert!(report.excluded);
    }

    #[test]
    fn rejects_bad_steps_and_non_finite_values() {
        let f = |t: &mut Tape, p: Var| t.sum(p);
        assert_eq!(
            check_gradients(f, &[1.0], 0.0).unwrap_err(),
            DiffError::InvalidStep(0.0)
        );
        assert!(check_gradients(f, &[1.0], 0.1).is_err());
        let err = check_gradients(|t, p| t.ln(p), &[-1.0], 1e-5).unwrap_err();
        assert!(matches!(err, DiffError::Numeric(_)));
    }

    #[test]
    fn malformed_tapes_are_rejected() {
        let mut t = Tape::new();
        let err = t.push(Op::Unary(UnaryOp::Exp, Var(5))).unwrap_err();
        assert!(matches!(err, DiffError::MalformedTape(_)));
        let x = t.constant(1.0);
        let y = t.push(Op::Unary(UnaryOp::Exp, x)).unwrap();
        assert_relative_eq!(t.scalar(y), std::f64::consts::E);
        assert!(matches!(
            backward(&t, Var(99)),
            Err(DiffError::MalformedTape(_))
        ));
        let v = t.row(&[1.0, 2.0]);
        assert!(matches!(backward(&t, v), Err(DiffError::MalformedTape(_))));
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        // f = sum(tanh(X W + b)) with X 3x4, W 4x2, b 1x2.
        let report = check_gradients(
            |t, p| {
                let x = t.slice(p, 0, 3, 4);
                let w = t.slice(p, 12, 4, 2);
                let b = t.slice(p, 20, 1, 2);
                let xw = t.matmul(x, w);
                let z = t.add(xw, b);
                let h = t.tanh(z);
                t.sum(h)
            },
            &(0..22).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect::<Vec<_>>(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report}");
    }

    #[test]
    fn softmax_family_gradients() {
        let report = check_gradients(
            |t, p| {
                let rows = t.slice(p, 0, 2, 3);
                let sm = t.softmax(rows);
                let lsm = t.log_softmax(rows);
                let w = t.input(&[0.3, -1.0, 2.0, 0.5, 0.1, -0.7], 2, 3);
                let a = t.mul(sm, w);
                let b = t.mul(lsm, w);
                let sa = t.sum(a);
                let sb = t.sum(b);
                let sp = t.softplus(sb);
                t.add(sa, sp)
            },
            &[0.2, -0.4, 1.1, 0.0, 0.9, -1.5],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report}");
    }

    #[test]
    fn straight_through_routes_to_soft() {
        let mut t = Tape::new();
        let z = t.row(&[0.3, -0.2]);
        let soft = t.logistic(z);
        let hard: Vec<f64> = t.value(soft).iter().map(|&s| (s > 0.5) as u8 as f64).collect();
        let st = t.straight_through(&hard, soft);
        assert_eq!(t.value(st), &[1.0, 0.0]);
        let a = backward_from(&t, st, &[1.0, 2.0]).unwrap();
        let b = backward_from(&t, soft, &[1.0, 2.0]).unwrap();
        assert_eq!(a.get(z), b.get(z));
    }

    #[test]
    fn backward_is_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let p = t.row(&[0.1, 0.2, 0.3]);
            let s = t.softmax(p);
            let l = t.ln(s);
            let o = t.sum(l);
            (t, p, o)
        };
        let (t1, p1, o1) = build();
        let (t2, p2, o2) = build();
        let g1 = backward(&t1, o1).unwrap();
        let g2 = backward(&t2, o2).unwrap();
        assert_eq!(g1.get(p1), g2.get(p2));
    }
}
