use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx as usize
    }
}

/// Elementwise functions. `Silu(k)` is the k-th derivative of SiLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu(u8),
    Exp,
    Log,
    Recip,
    Sqrt,
    Cos,
    Sin,
    Abs,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Const,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    AddRow(Var, Var),
    MulCol(Var, Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ExpandScalar(Var),
    ExpandRows(Var),
    ExpandCols(Var),
    Gather(Var, Arc<[usize]>),
    ScatterSum(Var, Arc<[usize]>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Embed(Var, usize),
    Unary(Var, Unary),
    RowNorm(Var),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::SumAll(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::ExpandScalar(..) => "expand_scalar",
            Op::ExpandRows(..) => "expand_rows",
            Op::ExpandCols(..) => "expand_cols",
            Op::Gather(..) => "gather",
            Op::ScatterSum(..) => "scatter_sum",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Embed(..) => "embed",
            Op::Unary(_, u) => match u {
                Unary::Silu(_) => "silu",
                Unary::Exp => "exp",
                Unary::Log => "log",
                Unary::Recip => "recip",
                Unary::Sqrt => "sqrt",
                Unary::Cos => "cos",
                Unary::Sin => "sin",
                Unary::Abs => "abs",
                Unary::Square => "square",
            },
            Op::RowNorm(..) => "row_norm",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Const => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulCol(a, b) => {
                vec![*a, *b]
            }
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::ExpandScalar(a)
            | Op::ExpandRows(a)
            | Op::ExpandCols(a)
            | Op::Gather(a, _)
            | Op::ScatterSum(a, _)
            | Op::Slice(a, _)
            | Op::Embed(a, _)
            | Op::Unary(a, _)
            | Op::RowNorm(a)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
///
/// Every primitive evaluates eagerly and records its inputs, so the node list
/// is topologically ordered by construction. [`Tape::grad`] records the
/// backward pass on the same tape, which makes the returned gradients
/// differentiable in turn (needed when a loss contains gradient-based forces).
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of the recorded primitives in order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => true,
            Op::Const => false,
            other => other.inputs().iter().any(|v| self.nodes[v.index()].requires_grad),
        };
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(())
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Const)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        debug_assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index()].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index()].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.dims(a),
            self.dims(b),
            "{what}: operand shapes {:?} and {:?} differ",
            self.value(a).shape(),
            self.value(b).shape()
        );
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_dims(a, b, "add");
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_dims(a, b, "sub");
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_dims(a, b, "mul");
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = gemm(self.value(a), self.value(b), ta, tb);
        self.push(out, Op::MatMul { a, b, ta, tb })
    }

    /// Adds the row vector `b` (length = cols of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let cols = ta.cols();
        assert_eq!(tb.len(), cols, "add_row: bias length {} vs {cols} columns", tb.len());
        let mut data = ta.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                for (x, y) in row.iter_mut().zip(tb.data()) {
                    *x += y;
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::AddRow(a, b))
    }

    /// Multiplies row `r` of `a` by the scalar `s[r]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let ta = self.value(a);
        let ts = self.value(s);
        let cols = ta.cols();
        assert_eq!(ts.len(), ta.rows(), "mul_col: {} scales for {} rows", ts.len(), ta.rows());
        let mut data = ta.data().to_vec();
        if cols > 0 {
            for (row, &k) in data.chunks_mut(cols).zip(ts.data()) {
                for x in row.iter_mut() {
                    *x *= k;
                }
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, Op::MulCol(a, s))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums, shape `[1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = vec![0.0; cols];
        if cols > 0 {
            for row in ta.data().chunks(cols) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        self.push(Tensor::matrix(1, cols, out), Op::SumRows(a))
    }

    /// Row sums, shape `[rows, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let rows = ta.rows();
        let out = if cols == 0 {
            vec![0.0; rows]
        } else {
            ta.data().chunks(cols).map(|r| r.iter().sum()).collect()
        };
        self.push(Tensor::matrix(rows, 1, out), Op::SumCols(a))
    }

    pub fn expand_scalar(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).item();
        self.push(Tensor::filled(shape, v), Op::ExpandScalar(a))
    }

    /// Repeats a `[1, n]` row `rows` times.
    pub fn expand_rows(&mut self, a: Var, rows: usize) -> Var {
        let ta = self.value(a);
        let cols = ta.len();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(ta.data());
        }
        self.push(Tensor::matrix(rows, cols, data), Op::ExpandRows(a))
    }

    /// Repeats a `[m, 1]` column `cols` times.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Var {
        let ta = self.value(a);
        let rows = ta.len();
        let mut data = Vec::with_capacity(rows * cols);
        for &x in ta.data() {
            data.extend(std::iter::repeat(x).take(cols));
        }
        self.push(Tensor::matrix(rows, cols, data), Op::ExpandCols(a))
    }

    /// Row gather: output row `e` is row `index[e]` of `a`.
    pub fn gather(&mut self, a: Var, index: &Arc<[usize]>) -> Result<Var> {
        let rows = self.value(a).rows();
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange { index: bad, len: rows });
        }
        Ok(self.gather_unchecked(a, index.clone()))
    }

    fn gather_unchecked(&mut self, a: Var, index: Arc<[usize]>) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index.iter() {
            data.extend_from_slice(&ta.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::matrix(index.len(), cols, data);
        self.push(out, Op::Gather(a, index))
    }

    /// Segment sum: output row `i` accumulates every row `e` of `src` with
    /// `index[e] == i`, in increasing `e` order.
    pub fn scatter_sum(&mut self, src: Var, index: &Arc<[usize]>, n_rows: usize) -> Result<Var> {
        let rows = self.value(src).rows();
        if index.len() != rows {
            return Err(Error::ShapeMismatch(format!(
                "scatter_sum: {} indices for {rows} source rows",
                index.len()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_rows) {
            return Err(Error::IndexOutOfRange { index: bad, len: n_rows });
        }
        Ok(self.scatter_unchecked(src, index.clone(), n_rows))
    }

    fn scatter_unchecked(&mut self, src: Var, index: Arc<[usize]>, n_rows: usize) -> Var {
        let ts = self.value(src);
        let cols = ts.cols();
        let mut out = vec![0.0; n_rows * cols];
        for (e, &i) in index.iter().enumerate() {
            let from = &ts.data()[e * cols..(e + 1) * cols];
            for (o, x) in out[i * cols..(i + 1) * cols].iter_mut().zip(from) {
                *o += x;
            }
        }
        self.push(Tensor::matrix(n_rows, cols, out), Op::ScatterSum(src, index))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_cols: row count mismatch");
                t.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::matrix(rows, total, data), Op::Concat(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        assert!(start + len <= cols, "slice_cols out of range");
        let rows = ta.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * cols + start..r * cols + start + len]);
        }
        self.push(Tensor::matrix(rows, len, data), Op::Slice(a, start))
    }

    /// Places `a` at column offset `start` in a zero matrix with `total` columns.
    pub fn embed_cols(&mut self, a: Var, start: usize, total: usize) -> Var {
        let ta = self.value(a);
        let w = ta.cols();
        assert!(start + w <= total, "embed_cols out of range");
        let rows = ta.rows();
        let mut data = vec![0.0; rows * total];
        for r in 0..rows {
            data[r * total + start..r * total + start + w].copy_from_slice(&ta.data()[r * w..(r + 1) * w]);
        }
        self.push(Tensor::matrix(rows, total, data), Op::Embed(a, start))
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.value(a).map(|x| eval_unary(f, x));
        self.push(out, Op::Unary(a, f))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu(0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    /// Euclidean norm of every row, shape `[rows, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let rows = ta.rows();
        let out = if cols == 0 {
            vec![0.0; rows]
        } else {
            ta.data().chunks(cols).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).collect()
        };
        self.push(Tensor::matrix(rows, 1, out), Op::RowNorm(a))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let out = self.value(a).clone().reshaped(shape);
        self.push(out, Op::Reshape(a))
    }

    /// Records the reverse pass of `output` and returns one gradient variable
    /// per entry of `inputs`, each shaped like its input. Inputs the output
    /// does not depend on get a zero gradient.
    pub fn grad(&mut self, output: Var, inputs: &[Var]) -> Result<Vec<Var>> {
        self.check(output)?;
        for &v in inputs {
            self.check(v)?;
        }
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(Error::NonScalarOutput(out_val.shape().to_vec()));
        }
        let out_shape = out_val.shape().to_vec();
        let n = output.index() + 1;

        let mut live = vec![false; n];
        live[output.index()] = self.nodes[output.index()].requires_grad;
        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            for x in self.nodes[i].op.inputs() {
                if self.nodes[x.index()].requires_grad {
                    live[x.index()] = true;
                }
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        let seed = self.constant(Tensor::filled(out_shape, 1.0));
        grads[output.index()] = Some(seed);
        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            let this = Var { tape: self.id, idx: i as u32 };
            self.backprop(this, &op, g, &live, &mut grads);
        }

        Ok(inputs
            .iter()
            .map(|&v| match grads.get(v.index()).copied().flatten() {
                Some(g) => g,
                None => {
                    let shape = self.value(v).shape().to_vec();
                    self.constant(Tensor::zeros(shape))
                }
            })
            .collect())
    }

    /// Gradient values without keeping handles.
    pub fn backward(&mut self, output: Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
        let gs = self.grad(output, inputs)?;
        Ok(gs.into_iter().map(|g| self.value(g).clone()).collect())
    }

    fn accumulate(&mut self, grads: &mut [Option<Var>], live: &[bool], x: Var, contrib: Var) {
        if !live[x.index()] {
            return;
        }
        let want = self.value(x).shape().to_vec();
        let contrib = if self.value(contrib).shape() != want.as_slice() {
            self.reshape(contrib, want)
        } else {
            contrib
        };
        grads[x.index()] = Some(match grads[x.index()] {
            None => contrib,
            Some(prev) => self.add(prev, contrib),
        });
    }

    fn backprop(&mut self, this: Var, op: &Op, g: Var, live: &[bool], grads: &mut [Option<Var>]) {
        let is_live = |v: Var| live[v.index()];
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.accumulate(grads, live, *a, g);
                self.accumulate(grads, live, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, live, *a, g);
                if is_live(*b) {
                    let c = self.neg(g);
                    self.accumulate(grads, live, *b, c);
                }
            }
            Op::Mul(a, b) => {
                if is_live(*a) {
                    let c = self.mul(g, *b);
                    self.accumulate(grads, live, *a, c);
                }
                if is_live(*b) {
                    let c = self.mul(g, *a);
                    self.accumulate(grads, live, *b, c);
                }
            }
            Op::Scale(a, k) => {
                let c = self.scale(g, *k);
                self.accumulate(grads, live, *a, c);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (a, b) = (*a, *b);
                if is_live(a) {
                    let c = match (ta, tb) {
                        (false, false) => self.matmul_t(g, b, false, true),
                        (false, true) => self.matmul_t(g, b, false, false),
                        (true, false) => self.matmul_t(b, g, false, true),
                        (true, true) => self.matmul_t(b, g, true, true),
                    };
                    self.accumulate(grads, live, a, c);
                }
                if is_live(b) {
                    let c = match (ta, tb) {
                        (false, false) => self.matmul_t(a, g, true, false),
                        (false, true) => self.matmul_t(g, a, true, false),
                        (true, false) => self.matmul_t(a, g, false, false),
                        (true, true) => self.matmul_t(g, a, true, true),
                    };
                    self.accumulate(grads, live, b, c);
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, live, *a, g);
                if is_live(*b) {
                    let c = self.sum_rows(g);
                    self.accumulate(grads, live, *b, c);
                }
            }
            Op::MulCol(a, s) => {
                if is_live(*a) {
                    let c = self.mul_col(g, *s);
                    self.accumulate(grads, live, *a, c);
                }
                if is_live(*s) {
                    let ga = self.mul(g, *a);
                    let c = self.sum_cols(ga);
                    self.accumulate(grads, live, *s, c);
                }
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().to_vec();
                let c = self.expand_scalar(g, shape);
                self.accumulate(grads, live, *a, c);
            }
            Op::SumRows(a) => {
                let rows = self.value(*a).rows();
                let c = self.expand_rows(g, rows);
                self.accumulate(grads, live, *a, c);
            }
            Op::SumCols(a) => {
                let cols = self.value(*a).cols();
                let c = self.expand_cols(g, cols);
                self.accumulate(grads, live, *a, c);
            }
            Op::ExpandScalar(a) => {
                let c = self.sum(g);
                self.accumulate(grads, live, *a, c);
            }
            Op::ExpandRows(a) => {
                let c = self.sum_rows(g);
                self.accumulate(grads, live, *a, c);
            }
            Op::ExpandCols(a) => {
                let c = self.sum_cols(g);
                self.accumulate(grads, live, *a, c);
            }
            Op::Gather(a, index) => {
                let rows = self.value(*a).rows();
                let c = self.scatter_unchecked(g, index.clone(), rows);
                self.accumulate(grads, live, *a, c);
            }
            Op::ScatterSum(a, index) => {
                let c = self.gather_unchecked(g, index.clone());
                self.accumulate(grads, live, *a, c);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if is_live(p) {
                        let c = self.slice_cols(g, offset, w);
                        self.accumulate(grads, live, p, c);
                    }
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let total = self.value(*a).cols();
                let c = self.embed_cols(g, *start, total);
                self.accumulate(grads, live, *a, c);
            }
            Op::Embed(a, start) => {
                let w = self.value(*a).cols();
                let c = self.slice_cols(g, *start, w);
                self.accumulate(grads, live, *a, c);
            }
            Op::Unary(a, f) => {
                let a = *a;
                let d = match f {
                    Unary::Silu(k) => {
                        assert!(*k < 3, "SiLU derivatives beyond third order are not recorded");
                        self.unary(a, Unary::Silu(k + 1))
                    }
                    Unary::Exp => this,
                    Unary::Log => self.recip(a),
                    Unary::Recip => {
                        let sq = self.square(this);
                        self.neg(sq)
                    }
                    Unary::Sqrt => {
                        let r = self.recip(this);
                        self.scale(r, 0.5)
                    }
                    Unary::Cos => {
                        let s = self.sin(a);
                        self.neg(s)
                    }
                    Unary::Sin => self.cos(a),
                    Unary::Abs => {
                        let sign = self.value(a).map(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                        self.constant(sign)
                    }
                    Unary::Square => self.scale(a, 2.0),
                };
                let c = self.mul(g, d);
                self.accumulate(grads, live, a, c);
            }
            Op::RowNorm(a) => {
                let r = self.recip(this);
                let k = self.mul(g, r);
                let c = self.mul_col(*a, k);
                self.accumulate(grads, live, *a, c);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let c = self.reshape(g, shape);
                self.accumulate(grads, live, *a, c);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// SiLU and its first three derivatives.
pub fn silu_derivative(order: u8, x: f64) -> f64 {
    let s = sigmoid(x);
    let ds = s * (1.0 - s);
    match order {
        0 => x * s,
        1 => s * (1.0 + x * (1.0 - s)),
        2 => ds * (2.0 + x * (1.0 - 2.0 * s)),
        3 => ds * ((1.0 - 2.0 * s) * (3.0 + x * (1.0 - 2.0 * s)) - 2.0 * x * ds),
        _ => panic!("SiLU derivative of order {order} not available"),
    }
}

fn eval_unary(f: Unary, x: f64) -> f64 {
    match f {
        Unary::Silu(k) => silu_derivative(k, x),
        Unary::Exp => x.exp(),
        Unary::Log => x.ln(),
        Unary::Recip => 1.0 / x,
        Unary::Sqrt => x.sqrt(),
        Unary::Cos => x.cos(),
        Unary::Sin => x.sin(),
        Unary::Abs => x.abs(),
        Unary::Square => x * x,
    }
}

pub(crate) fn gemm(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, k2, "matmul: inner dimensions {k} and {k2} differ");
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return Tensor::matrix(m, n, out);
    }
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    // SAFETY: strides describe in-bounds row-major views of the owned buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data().as_ptr(),
            rsa,
            csa,
            b.data().as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::matrix(m, n, out)
}
