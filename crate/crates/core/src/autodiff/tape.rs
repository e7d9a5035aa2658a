use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(self) -> usize {
        self.rows
    }

    pub fn cols(self) -> usize {
        self.cols
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Relu(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Sum(usize),
    Mean(usize),
    RowSums(usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    PermuteCols(usize, Vec<usize>),
    StopGradient,
    LogSoftmax(usize),
    Householder(usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Reverse-mode differentiation over matrix operations.
///
/// Nodes are appended in evaluation order, so ids are a topological order and
/// the backward pass is a single reverse scan. A tape supports exactly one
/// backward pass; build a fresh tape for the next iteration.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Matrix {
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads.get_mut(v.id).and_then(Option::take) {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.id];
                Matrix::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{op}: {a:?} vs {b:?}"))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> Var {
        let (rows, cols) = value.shape();
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.id].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a.id, b.id), v, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a.id, b.id), v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a.id, b.id), v, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a.id, b.id), v, rg))
    }

    /// `a + row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(shape_err("add_row", a.shape(), row.shape()));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(&r).for_each(|(x, y)| *x += y);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::AddRow(a.id, row.id), v, rg))
    }

    /// `a ⊙ row`, broadcasting a `1 × n` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        if row.rows != 1 || row.cols != a.cols {
            return Err(shape_err("mul_row", a.shape(), row.shape()));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).as_slice().to_vec();
        for i in 0..v.rows() {
            v.row_mut(i).iter_mut().zip(&r).for_each(|(x, y)| *x *= y);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Op::MulRow(a.id, row.id), v, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(Op::Scale(a.id, s), v, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(Op::AddScalar(a.id), v, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, v, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.id), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a.id), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a.id), softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.id), f64::exp)
    }

    /// Natural log; the input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).as_slice().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        Ok(self.unary(a, Op::Log(a.id), f64::ln))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a.id), |x| x * x)
    }

    /// Sum of all entries, as `1 × 1`.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a.id), v, rg)
    }

    /// Mean of all entries, as `1 × 1`.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let v = Matrix::scalar(m.sum() / n);
        let rg = self.rg(a);
        self.push(Op::Mean(a.id), v, rg)
    }

    /// Per-row sums, `B × n → B × 1`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let sums: Vec<f64> = (0..m.rows()).map(|r| m.row(r).iter().sum()).collect();
        let v = Matrix::column_vector(&sums);
        let rg = self.rg(a);
        self.push(Op::RowSums(a.id), v, rg)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a.id, start), v, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Matrix::hcat(&mats)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            v,
            rg,
        ))
    }

    /// Output column `j` is input column `perm[j]`.
    pub fn permute_cols(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let m = self.value(a);
        let mut seen = vec![false; m.cols()];
        if perm.len() != m.cols() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "permute_cols: {:?} is not a permutation of {} columns",
                perm,
                m.cols()
            )));
        }
        let v = m.select_cols(perm);
        let rg = self.rg(a);
        Ok(self.push(Op::PermuteCols(a.id, perm.to_vec()), v, rg))
    }

    /// Forwards the value of `a` and contributes no gradient to it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(Op::StopGradient, v, false)
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(*x));
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let rg = self.rg(a);
        self.push(Op::LogSoftmax(a.id), v, rg)
    }

    /// Reflects every row of `x` across the hyperplane orthogonal to the
    /// `1 × n` vector `v`: `x (I − 2 vᵀv / ‖v‖²)`.
    pub fn householder(&mut self, x: Var, v: Var) -> Result<Var> {
        if v.rows != 1 || v.cols != x.cols {
            return Err(shape_err("householder", x.shape(), v.shape()));
        }
        let vv = self.value(v).as_slice().to_vec();
        let s: f64 = vv.iter().map(|a| a * a).sum();
        if s.sqrt() <= 1e-12 {
            return Err(Error::Degenerate("householder vector near zero".into()));
        }
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let p: f64 = row.iter().zip(&vv).map(|(a, b)| a * b).sum();
            let k = 2.0 * p / s;
            row.iter_mut().zip(&vv).for_each(|(a, b)| *a -= k * b);
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(Op::Householder(x.id, v.id), out, rg))
    }

    /// Reverse pass from a `1 × 1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        if loss.id >= self.nodes.len() {
            return Err(Error::Usage(
                "backward on a variable that was never computed on this tape".into(),
            ));
        }
        if loss.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                loss.shape()
            )));
        }
        self.backward_done = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = vec![None; n];
        grads[loss.id] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        let acc = |i: usize, delta: Matrix, grads: &mut [Option<Matrix>]| -> Result<()> {
            if !self.nodes[i].requires_grad {
                return Ok(());
            }
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.matmul_nt(val(*b))?, grads)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, val(*a).matmul_tn(g)?, grads)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.clone(), grads)?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads)?;
                acc(*b, g.scale(-1.0), grads)?;
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    acc(*a, g.hadamard(val(*b))?, grads)?;
                }
                if self.nodes[*b].requires_grad {
                    acc(*b, g.hadamard(val(*a))?, grads)?;
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone(), grads)?;
                if self.nodes[*r].requires_grad {
                    acc(*r, Matrix::row_vector(&g.column_sums()), grads)?;
                }
            }
            Op::MulRow(a, r) => {
                let row = val(*r).as_slice();
                if self.nodes[*a].requires_grad {
                    let mut ga = g.clone();
                    for i in 0..ga.rows() {
                        ga.row_mut(i).iter_mut().zip(row).for_each(|(x, y)| *x *= y);
                    }
                    acc(*a, ga, grads)?;
                }
                if self.nodes[*r].requires_grad {
                    let gr = g.hadamard(val(*a))?;
                    acc(*r, Matrix::row_vector(&gr.column_sums()), grads)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s), grads)?,
            Op::AddScalar(a) => acc(*a, g.clone(), grads)?,
            Op::Tanh(a) => {
                let d = g.hadamard(&node.value.map(|y| 1.0 - y * y))?;
                acc(*a, d, grads)?;
            }
            Op::Relu(a) => {
                let d = g.hadamard(&val(*a).map(|x| if x > 0.0 { 1.0 } else { 0.0 }))?;
                acc(*a, d, grads)?;
            }
            Op::Softplus(a) => {
                let d = g.hadamard(&val(*a).map(sigmoid))?;
                acc(*a, d, grads)?;
            }
            Op::Exp(a) => acc(*a, g.hadamard(&node.value)?, grads)?,
            Op::Log(a) => {
                let d = g.hadamard(&val(*a).map(|x| 1.0 / x))?;
                acc(*a, d, grads)?;
            }
            Op::Square(a) => {
                let d = g.hadamard(&val(*a).map(|x| 2.0 * x))?;
                acc(*a, d, grads)?;
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()), grads)?;
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                let n = (r * c).max(1) as f64;
                acc(*a, Matrix::filled(r, c, g.item() / n), grads)?;
            }
            Op::RowSums(a) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g[(i, 0)];
                    d.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                acc(*a, d, grads)?;
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                let w = g.cols();
                for i in 0..r {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                acc(*a, d, grads)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, g.slice_cols(offset, offset + w)?, grads)?;
                    offset += w;
                }
            }
            Op::PermuteCols(a, perm) => {
                let mut d = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let (src, dst) = (g.row(i), d.row_mut(i));
                    for (j, &p) in perm.iter().enumerate() {
                        dst[p] = src[j];
                    }
                }
                acc(*a, d, grads)?;
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for i in 0..d.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    let y = node.value.row(i);
                    d.row_mut(i)
                        .iter_mut()
                        .zip(y)
                        .for_each(|(di, yi)| *di -= yi.exp() * gsum);
                }
                acc(*a, d, grads)?;
            }
            Op::Householder(x, v) => {
                let xv = val(*x);
                let vv = val(*v).as_slice();
                let s: f64 = vv.iter().map(|a| a * a).sum();
                // q = G v, p = X v
                let q: Vec<f64> = (0..g.rows())
                    .map(|i| g.row(i).iter().zip(vv).map(|(a, b)| a * b).sum())
                    .collect();
                if self.nodes[*x].requires_grad {
                    let mut gx = g.clone();
                    for i in 0..gx.rows() {
                        let k = 2.0 * q[i] / s;
                        gx.row_mut(i).iter_mut().zip(vv).for_each(|(a, b)| *a -= k * b);
                    }
                    acc(*x, gx, grads)?;
                }
                if self.nodes[*v].requires_grad {
                    let p: Vec<f64> = (0..xv.rows())
                        .map(|i| xv.row(i).iter().zip(vv).map(|(a, b)| a * b).sum())
                        .collect();
                    let pq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
                    let n = vv.len();
                    let mut gv = vec![0.0; n];
                    for i in 0..xv.rows() {
                        let (xr, gr) = (xv.row(i), g.row(i));
                        for k in 0..n {
                            gv[k] += q[i] * xr[k] + p[i] * gr[k];
                        }
                    }
                    for k in 0..n {
                        gv[k] = -2.0 / s * gv[k] + 4.0 / (s * s) * pq * vv[k];
                    }
                    acc(*v, Matrix::row_vector(&gv), grads)?;
                }
            }
        }
        Ok(())
    }
}
