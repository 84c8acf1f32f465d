//! Reverse-mode automatic differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its value and the handles of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and returns a fresh
//! set of gradients; nothing accumulates across calls.

use super::tensor::{matmul_into, sigmoid, softplus, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MaxRows(Var, Vec<usize>),
    LogSoftmaxRows(Var),
    SoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    Column(Var, usize),
    Row(Var, usize),
    ConcatCols(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` for untracked nodes.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradients for `vars`, zero-filled where the loss does not depend on a var.
    pub fn collect(&self, vars: &[Var], tape: &Tape) -> Vec<Tensor> {
        vars.iter()
            .map(|&v| match self.get(v) {
                Some(g) => g.clone(),
                None => {
                    let val = tape.value(v);
                    Tensor::zeros(val.rows(), val.cols())
                }
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| Error::shape(op, format!("operand has shape {:?}", self.value(v).shape())))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let tracked = self.tracked(&[a]);
        self.push(value, op, tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (r, c) = self.dims(a, name)?;
        let (rr, rc) = self.dims(row, name)?;
        if rr != 1 || rc != c {
            return Err(Error::shape(name, format!("[{r}, {c}] with row [{rr}, {rc}]")));
        }
        let av = self.value(a);
        let bv = self.value(row).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(av.row(i).iter().zip(bv).map(|(&x, &y)| f(x, y)));
        }
        Tensor::matrix(r, c, data)
    }

    /// `a[i, j] + row[0, j]`, the bias broadcast.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(value, Op::AddRow(a, row), tracked))
    }

    /// `a[i, j] * row[0, j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let value = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        let tracked = self.tracked(&[a, row]);
        Ok(self.push(value, Op::MulRow(a, row), tracked))
    }

    fn col_broadcast(&mut self, a: Var, col: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (r, c) = self.dims(a, name)?;
        let (cr, cc) = self.dims(col, name)?;
        if cc != 1 || cr != r {
            return Err(Error::shape(name, format!("[{r}, {c}] with column [{cr}, {cc}]")));
        }
        let av = self.value(a);
        let cv = self.value(col).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(av.row(i).iter().map(|&x| f(x, cv[i])));
        }
        Tensor::matrix(r, c, data)
    }

    /// `a[i, j] * col[i, 0]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let value = self.col_broadcast(a, col, "mul_col", |x, y| x * y)?;
        let tracked = self.tracked(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), tracked))
    }

    /// `a[i, j] / col[i, 0]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let value = self.col_broadcast(a, col, "div_col", |x, y| x / y)?;
        let tracked = self.tracked(&[a, col]);
        Ok(self.push(value, Op::DivCol(a, col), tracked))
    }

    /// Divides every element of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let value = self.value(a).map(|x| x / sv);
        let tracked = self.tracked(&[a, s]);
        Ok(self.push(value, Op::DivScalar(a, s), tracked))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Sum of all elements, as a `[1, 1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / v.len().max(1) as f64;
        let tracked = self.tracked(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), tracked)
    }

    /// Row sums as a `[rows, 1]` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, _) = self.dims(a, "sum_rows")?;
        let v = self.value(a);
        let data = (0..r).map(|i| v.row(i).iter().sum()).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, data)?, Op::SumRows(a), tracked))
    }

    /// Row maxima as a `[rows, 1]` column; the gradient goes to the first maximum.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "max_rows")?;
        if c == 0 {
            return Err(Error::shape("max_rows", "zero columns"));
        }
        let v = self.value(a);
        let arg: Vec<usize> = (0..r).map(|i| super::tensor::argmax(v.row(i))).collect();
        let data = arg.iter().enumerate().map(|(i, &j)| v.get(i, j)).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, data)?, Op::MaxRows(a, arg), tracked))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "log_softmax_rows")?;
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(super::tensor::log_softmax(v.row(i)));
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::LogSoftmaxRows(a), tracked))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a, "softmax_rows")?;
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(super::tensor::softmax(v.row(i)));
        }
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, c, data)?, Op::SoftmaxRows(a), tracked))
    }

    /// Gathers `a[i, idx[i]]` into a `[rows, 1]` column.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(a, "pick")?;
        if idx.len() != r {
            return Err(Error::shape("pick", format!("{} indices for {r} rows", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::invalid(format!("pick index {bad} out of range for {c} columns")));
        }
        let v = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| v.get(i, j)).collect();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, data)?, Op::Pick(a, idx.to_vec()), tracked))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.dims(a, "column")?;
        if j >= c {
            return Err(Error::shape("column", format!("column {j} of {c}")));
        }
        let data = self.value(a).column(j);
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, data)?, Op::Column(a, j), tracked))
    }

    /// Row `i` of `a` as a `[1, cols]` node.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (r, c) = self.dims(a, "row")?;
        if i >= r {
            return Err(Error::shape("row", format!("row {i} of {r}")));
        }
        let data = self.value(a).row(i).to_vec();
        let tracked = self.tracked(&[a]);
        Ok(self.push(Tensor::matrix(1, c, data)?, Op::Row(a, i), tracked))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no operands"));
        };
        let (r, _) = self.dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::matrix(r, total, data)?, Op::ConcatCols(parts.to_vec()), tracked))
    }

    /// Computes gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", format!("loss must be a scalar, got shape {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite(format!("loss value {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.rows(), lv.cols(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if self.nodes[a.0].tracked {
                    // dA = G · Bᵀ
                    let bt = bv.transpose();
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da)?);
                }
                if self.nodes[b.0].tracked {
                    // dB = Aᵀ · G
                    let at = av.transpose();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?);
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                let c = g.cols();
                let mut dr = vec![0.0; c];
                for i in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(i)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *row, Tensor::matrix(1, c, dr)?);
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row).data();
                let (r, c) = g.dims2()?;
                let mut da = Vec::with_capacity(r * c);
                let mut dr = vec![0.0; c];
                for i in 0..r {
                    let gi = g.row(i);
                    let ai = av.row(i);
                    for j in 0..c {
                        da.push(gi[j] * rv[j]);
                        dr[j] += gi[j] * ai[j];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
                self.accumulate(grads, *row, Tensor::matrix(1, c, dr)?);
            }
            Op::MulCol(a, col) => {
                let av = self.value(*a);
                let cv = self.value(*col).data();
                let (r, c) = g.dims2()?;
                let mut da = Vec::with_capacity(r * c);
                let mut dc = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        da.push(g.get(i, j) * cv[i]);
                        dc[i] += g.get(i, j) * av.get(i, j);
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
                self.accumulate(grads, *col, Tensor::matrix(r, 1, dc)?);
            }
            Op::DivCol(a, col) => {
                let cv = self.value(*col).data();
                let (r, c) = g.dims2()?;
                let mut da = Vec::with_capacity(r * c);
                let mut dc = vec![0.0; r];
                for i in 0..r {
                    for j in 0..c {
                        da.push(g.get(i, j) / cv[i]);
                        // d(a/c)/dc = -(a/c)/c
                        dc[i] -= g.get(i, j) * out.get(i, j) / cv[i];
                    }
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
                self.accumulate(grads, *col, Tensor::matrix(r, 1, dc)?);
            }
            Op::DivScalar(a, s) => {
                let sv = self.value(*s).item()?;
                self.accumulate(grads, *a, g.map(|x| x / sv));
                let ds: f64 = g.data().iter().zip(out.data()).map(|(gi, oi)| -gi * oi / sv).sum();
                self.accumulate(grads, *s, Tensor::scalar(ds));
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.map(|x| k * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| if x > 0.0 { gi } else { 0.0 })?);
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |gi, s| gi * s * (1.0 - s))?);
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| gi * sigmoid(x))?);
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |gi, e| gi * e)?),
            Op::Ln(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| gi / x)?);
            }
            Op::Square(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |gi, x| 2.0 * gi * x)?);
            }
            Op::Sum(a) => {
                let gv = g.item()?;
                let av = self.value(*a);
                self.accumulate(grads, *a, av.map(|_| gv));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let gv = g.item()? / av.len().max(1) as f64;
                self.accumulate(grads, *a, av.map(|_| gv));
            }
            Op::SumRows(a) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    da.extend(std::iter::repeat_n(g.data()[i], c));
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
            }
            Op::MaxRows(a, arg) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = Tensor::zeros(r, c);
                for (i, &j) in arg.iter().enumerate() {
                    da.set(i, j, g.data()[i]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g - softmax(x) * sum(g)
                let (r, c) = out.dims2()?;
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gi = g.row(i);
                    let total: f64 = gi.iter().sum();
                    da.extend(out.row(i).iter().zip(gi).map(|(lp, gv)| gv - lp.exp() * total));
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
            }
            Op::SoftmaxRows(a) => {
                // dx = s * (g - <g, s>)
                let (r, c) = out.dims2()?;
                let mut da = Vec::with_capacity(r * c);
                for i in 0..r {
                    let gi = g.row(i);
                    let si = out.row(i);
                    let dot: f64 = gi.iter().zip(si).map(|(x, y)| x * y).sum();
                    da.extend(si.iter().zip(gi).map(|(s, gv)| s * (gv - dot)));
                }
                self.accumulate(grads, *a, Tensor::matrix(r, c, da)?);
            }
            Op::Pick(a, idx) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = Tensor::zeros(r, c);
                for (i, &j) in idx.iter().enumerate() {
                    da.set(i, j, g.data()[i]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Column(a, j) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = Tensor::zeros(r, c);
                for i in 0..r {
                    da.set(i, *j, g.data()[i]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::Row(a, i) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut da = Tensor::zeros(r, c);
                for j in 0..c {
                    da.set(*i, j, g.data()[j]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let mut dp = Vec::with_capacity(r * pc);
                    for i in 0..r {
                        dp.extend_from_slice(&g.row(i)[offset..offset + pc]);
                    }
                    self.accumulate(grads, p, Tensor::matrix(r, pc, dp)?);
                    offset += pc;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_sum_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let w = tape.param(Tensor::matrix(1, 3, vec![0.3, 0.1, -0.7]).unwrap());
        let prod = tape.mul(w, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn sigmoid_squared_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        let loss = tape.square(s);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(2, 2));
        let r = tape.relu(w);
        assert!(matches!(tape.backward(r), Err(Error::Shape { .. })));
    }

    #[test]
    fn repeated_backward_does_not_accumulate() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let loss = tape.square(w);
        let g1 = tape.backward(loss).unwrap().get(w).unwrap().item().unwrap();
        let g2 = tape.backward(loss).unwrap().get(w).unwrap().item().unwrap();
        assert_eq!(g1, 6.0);
        assert_eq!(g1, g2);
    }

    #[test]
    fn shared_operand_accumulates_within_one_pass() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0));
        let p = tape.mul(w, w).unwrap();
        let loss = tape.add(p, w).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(-1.0));
        let loss = tape.ln(w);
        assert!(matches!(tape.backward(loss), Err(Error::NonFinite(_))));
    }
}
