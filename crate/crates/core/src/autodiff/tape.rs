use std::rc::Rc;

use super::tensor::{matmul, Tensor};
use super::{AutodiffError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Square(Var),
    Recip(Var),
    /// Heaviside step; its derivative is zero almost everywhere.
    Step(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    BroadcastScalar(Var),
    Reshape(Var),
    SelectCols(Var, Rc<[usize]>),
    ScatterCols(Var, Rc<[usize]>),
}

impl Op {
    fn parents(&self) -> [Option<Var>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul { a, b, .. } => [Some(a), Some(b)],
            Neg(a) | Scale(a, _) | Shift(a) | Tanh(a) | Sigmoid(a) | Exp(a) | Log(a) | Relu(a)
            | Square(a) | Recip(a) | Step(a) | SumAll(a) | SumRows(a) | SumCols(a)
            | BroadcastRows(a) | BroadcastCols(a) | BroadcastScalar(a) | Reshape(a) => {
                [Some(a), None]
            }
            SelectCols(a, _) | ScatterCols(a, _) => [Some(a), None],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only computation graph.
///
/// Node indices are a topological order, so the reverse sweep in [`Tape::grad`]
/// is a plain descending loop. Gradients are themselves recorded as nodes,
/// which is what makes nested differentiation work: the input gradient of a
/// network can appear inside a loss that is differentiated again.
///
/// All reductions sum in ascending index order, so results are reproducible.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf (input, parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::Shift(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn step(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        self.push(v, Op::Step(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(mismatch("sum_rows", t, t));
        }
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(t.row_slice(i)) {
                *o += x;
            }
        }
        Ok(self.push(Tensor::row(out), Op::SumRows(a)))
    }

    /// `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(mismatch("sum_cols", t, t));
        }
        let out = t.iter_rows().map(|r| r.iter().sum()).collect();
        Ok(self.push(Tensor::column(out), Op::SumCols(a)))
    }

    /// `[1, n] -> [m, n]`.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.rows() != 1 {
            return Err(mismatch("broadcast_rows", t, t));
        }
        let n = t.cols();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::BroadcastRows(a)))
    }

    /// `[m, 1] -> [m, n]`.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.cols() != 1 {
            return Err(mismatch("broadcast_cols", t, t));
        }
        let m = t.rows();
        let mut data = Vec::with_capacity(m * n);
        for &x in t.data() {
            data.extend(std::iter::repeat_n(x, n));
        }
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push(v, Op::BroadcastCols(a)))
    }

    /// Single-element tensor broadcast to `shape`.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).item()?;
        let v = Tensor::full(shape, x);
        Ok(self.push(v, Op::BroadcastScalar(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Columns `idx` of a rank-2 tensor, in order.
    pub fn select_cols(&mut self, a: Var, idx: &Rc<[usize]>) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || idx.iter().any(|&j| j >= t.cols()) {
            return Err(mismatch("select_cols", t, t));
        }
        let m = t.rows();
        let mut data = Vec::with_capacity(m * idx.len());
        for r in t.iter_rows() {
            data.extend(idx.iter().map(|&j| r[j]));
        }
        let v = Tensor::new(vec![m, idx.len()], data)?;
        Ok(self.push(v, Op::SelectCols(a, idx.clone())))
    }

    /// Places the columns of `a` at positions `idx` of a zero `[m, width]` tensor.
    pub fn scatter_cols(&mut self, a: Var, idx: &Rc<[usize]>, width: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.cols() != idx.len() || idx.iter().any(|&j| j >= width) {
            return Err(mismatch("scatter_cols", t, t));
        }
        let m = t.rows();
        let mut data = vec![0.0; m * width];
        for (i, r) in t.iter_rows().enumerate() {
            for (&j, &x) in idx.iter().zip(r) {
                data[i * width + j] = x;
            }
        }
        let v = Tensor::new(vec![m, width], data)?;
        Ok(self.push(v, Op::ScatterCols(a, idx.clone())))
    }

    // ----- composites -----

    /// `x W + b` with `x: [m, in]`, `W: [in, out]`, `b: [1, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        let m = self.value(xw).rows();
        let bb = self.broadcast_rows(b, m)?;
        self.add(xw, bb)
    }

    /// `[m, n] * [m, 1]` with the column broadcast across `n`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let n = self.value(x).cols();
        let c = self.broadcast_cols(col, n)?;
        self.mul(x, c)
    }

    pub fn swish(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a);
        self.mul(a, s)
    }

    fn ones_like(&mut self, a: Var) -> Var {
        let shape = self.value(a).shape().to_vec();
        self.constant(Tensor::ones(&shape))
    }

    // ----- differentiation -----

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The returned nodes live on this tape and can be differentiated again.
    /// A `wrt` node that `output` does not depend on gets a zero constant.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let out_shape = self.value(output).shape().to_vec();
        if self.value(output).numel() != 1 {
            return Err(AutodiffError::NotScalar { shape: out_shape });
        }
        let n = output.0 + 1;
        // reach[i]: node i depends on some wrt node (or is one)
        let mut reach = vec![false; n];
        for w in wrt {
            if w.0 < n {
                reach[w.0] = true;
            }
        }
        for i in 0..n {
            if !reach[i] {
                reach[i] = self.nodes[i]
                    .op
                    .parents()
                    .iter()
                    .flatten()
                    .any(|p| reach[p.0]);
            }
        }
        let mut adj: Vec<Option<Var>> = vec![None; n];
        if reach[output.0] {
            adj[output.0] = Some(self.ones_like(output));
        }
        for i in (0..n).rev() {
            let Some(g) = adj[i] else { continue };
            if !reach[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contribs = self.vjp(Var(i), &op, g, &reach)?;
            for (p, c) in contribs {
                adj[p.0] = Some(match adj[p.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }
        let mut res = Vec::with_capacity(wrt.len());
        for w in wrt {
            match adj.get(w.0).copied().flatten() {
                Some(g) => res.push(g),
                None => {
                    let shape = self.value(*w).shape().to_vec();
                    res.push(self.constant(Tensor::zeros(&shape)));
                }
            }
        }
        Ok(res)
    }

    /// Like [`Tape::grad`] but returns plain values.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let g = self.grad(output, wrt)?;
        Ok(g.into_iter().map(|v| self.value(v).clone()).collect())
    }

    fn vjp(&mut self, y: Var, op: &Op, g: Var, reach: &[bool]) -> Result<Vec<(Var, Var)>> {
        use Op::*;
        let need = |v: Var| reach[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Leaf => {}
            Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    let ng = self.neg(g);
                    out.push((b, ng));
                }
            }
            Mul(a, b) => {
                if need(a) {
                    let ga = self.mul(g, b)?;
                    out.push((a, ga));
                }
                if need(b) {
                    let gb = self.mul(g, a)?;
                    out.push((b, gb));
                }
            }
            Neg(a) => out.push((a, self.neg(g))),
            Scale(a, c) => out.push((a, self.scale(g, c))),
            Shift(a) => out.push((a, g)),
            MatMul { a, b, ta, tb } => {
                if need(a) {
                    let ga = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, ga));
                }
                if need(b) {
                    let gb = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, gb));
                }
            }
            Tanh(a) => {
                // 1 - y^2
                let y2 = self.square(y);
                let d = self.neg(y2);
                let d = self.shift(d, 1.0);
                out.push((a, self.mul(g, d)?));
            }
            Sigmoid(a) => {
                // y - y^2
                let y2 = self.square(y);
                let d = self.sub(y, y2)?;
                out.push((a, self.mul(g, d)?));
            }
            Exp(a) => out.push((a, self.mul(g, y)?)),
            Log(a) => {
                let r = self.recip(a);
                out.push((a, self.mul(g, r)?));
            }
            Relu(a) => {
                let s = self.step(a);
                out.push((a, self.mul(g, s)?));
            }
            Square(a) => {
                let two_a = self.scale(a, 2.0);
                out.push((a, self.mul(g, two_a)?));
            }
            Recip(a) => {
                let y2 = self.square(y);
                let d = self.neg(y2);
                out.push((a, self.mul(g, d)?));
            }
            Step(_) => {}
            SumAll(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.broadcast_scalar(g, &shape)?));
            }
            SumRows(a) => {
                let m = self.value(a).rows();
                out.push((a, self.broadcast_rows(g, m)?));
            }
            SumCols(a) => {
                let n = self.value(a).cols();
                out.push((a, self.broadcast_cols(g, n)?));
            }
            BroadcastRows(a) => out.push((a, self.sum_rows(g)?)),
            BroadcastCols(a) => out.push((a, self.sum_cols(g)?)),
            BroadcastScalar(a) => {
                let shape = self.value(a).shape().to_vec();
                let s = self.sum(g);
                out.push((a, self.reshape(s, &shape)?));
            }
            Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            SelectCols(a, ref idx) => {
                let width = self.value(a).cols();
                out.push((a, self.scatter_cols(g, idx, width)?));
            }
            ScatterCols(a, ref idx) => out.push((a, self.select_cols(g, idx)?)),
        }
        Ok(out)
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
