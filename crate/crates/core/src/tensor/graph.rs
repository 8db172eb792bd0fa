use std::collections::HashMap;

use super::{gemm, sigmoid, softplus, GemmView, GradientStore, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Param(ParamId),
    Input,
    Constant,
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Abs(Var),
    Sqrt(Var),
    Powf(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    MaxCols(Var, Vec<usize>),
    MaxStack(Vec<Var>, Vec<u32>),
    RowNorm(Var),
    Cross(Var, Var),
    CumsumExclCols(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Param(_) | Input | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Cross(a, b) => {
                vec![*a, *b]
            }
            Neg(a) | Scale(a, _) | AddScalar(a) | Sin(a) | Cos(a) | Exp(a) | Sigmoid(a)
            | Relu(a) | Softplus(a) | Abs(a) | Sqrt(a) | Powf(a, _) | Transpose(a)
            | Reshape(a) | SliceCols(a, _) | SliceRows(a, _) | SumAll(a) | SumRows(a)
            | SumCols(a) | MaxCols(a, _) | RowNorm(a) | CumsumExclCols(a)
            | GatherRows(a, _) | ScatterRows(a, _) => vec![*a],
            Linear(x, w, b) => vec![*x, *w, *b],
            ConcatCols(v) | ConcatRows(v) | MaxStack(v, _) => v.clone(),
        }
    }
}

struct Node {
    op: Op,
    /// `None` for parameter leaves, which read from the store.
    value: Option<Tensor>,
    needs_grad: bool,
}

/// A dynamic computation tape over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// valid topological order.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, _) => Some(b),
        (_, 1) => Some(a),
        _ => None,
    }
}

/// Row `i` of `t` under row broadcasting.
#[inline]
fn brow(t: &Tensor, i: usize) -> &[f64] {
    t.row_slice(if t.rows() == 1 { 0 } else { i })
}

/// Fills `out` (`rows × cols`) with `f` applied to broadcast rows of `a`
/// and `b`.
fn broadcast_into(out: &mut [f64], cols: usize, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) {
    for (i, o) in out.chunks_exact_mut(cols).enumerate() {
        let (ra, rb) = (brow(a, i), brow(b, i));
        match (ra.len() == cols, rb.len() == cols) {
            (true, true) => o.iter_mut().zip(ra.iter().zip(rb)).for_each(|(o, (&x, &y))| *o = f(x, y)),
            (true, false) => o.iter_mut().zip(ra).for_each(|(o, &x)| *o = f(x, rb[0])),
            (false, true) => o.iter_mut().zip(rb).for_each(|(o, &y)| *o = f(ra[0], y)),
            (false, false) => o.iter_mut().for_each(|o| *o = f(ra[0], rb[0])),
        }
    }
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let rows = broadcast_dim(a.rows(), b.rows()).ok_or_else(|| shape_err(op, a, b))?;
    let cols = broadcast_dim(a.cols(), b.cols()).ok_or_else(|| shape_err(op, a, b))?;
    let mut out = vec![0.0; rows * cols];
    broadcast_into(&mut out, cols, a, b, f);
    Ok(Tensor::matrix(rows, cols, out))
}

/// Sums a broadcast gradient back down to `rows × cols`.
fn reduce_to(g: Tensor, rows: usize, cols: usize) -> Tensor {
    if g.rows() == rows && g.cols() == cols {
        return g;
    }
    let gc = g.cols();
    let mut out = vec![0.0; rows * cols];
    for (i, gr) in g.data().chunks_exact(gc).enumerate() {
        let oi = if rows == 1 { 0 } else { i };
        let o = &mut out[oi * cols..(oi + 1) * cols];
        if cols == gc {
            o.iter_mut().zip(gr).for_each(|(o, &v)| *o += v);
        } else {
            o[0] += gr.iter().sum::<f64>();
        }
    }
    Tensor::matrix(rows, cols, out)
}

/// `g ⊙ t` with `t` broadcast to the shape of `g`.
fn mul_broadcast(g: &Tensor, t: &Tensor) -> Tensor {
    if g.shape() == t.shape() {
        return zip_map(g, t, |x, y| x * y);
    }
    let mut out = vec![0.0; g.numel()];
    broadcast_into(&mut out, g.cols(), g, t, |x, y| x * y);
    Tensor::matrix(g.rows(), g.cols(), out)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

fn zip3_map(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::matrix(a.rows(), a.cols(), data)
}

/// Materializes `t` broadcast to `rows × cols`.
fn expand(t: &Tensor, rows: usize, cols: usize) -> Tensor {
    if t.rows() == rows && t.cols() == cols {
        return t.clone();
    }
    let mut out = vec![0.0; rows * cols];
    for (i, o) in out.chunks_exact_mut(cols).enumerate() {
        let r = brow(t, i);
        if r.len() == cols {
            o.copy_from_slice(r);
        } else {
            o.fill(r[0]);
        }
    }
    Tensor::matrix(rows, cols, out)
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let needs_grad = op.inputs().iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, op: Op, value: Option<Tensor>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let trainable = self.params.is_trainable(id);
        let v = self.leaf(Op::Param(id), None, trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    /// Differentiable input; its gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(Op::Input, Some(t), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Op::Constant, Some(t), false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = binary("div", self.value(a), self.value(b), |x, y| x / y)?;
        self.push(Op::Div(a, b), out, "div")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| -x);
        self.push(Op::Neg(a), out, "neg")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a), out, "add_scalar")
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sin);
        self.push(Op::Sin(a), out, "sin")
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::cos);
        self.push(Op::Cos(a), out, "cos")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out, "exp")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out, "sigmoid")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), out, "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(Op::Softplus(a), out, "softplus")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::abs);
        self.push(Op::Abs(a), out, "abs")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), out, "sqrt")
    }

    /// Elementwise `x^p`.
    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x.powf(p));
        self.push(Op::Powf(a, p), out, "powf")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out, "transpose")
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let t = self.value(a);
        if t.numel() != rows * cols {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: vec![rows, cols],
            });
        }
        let out = Tensor::matrix(rows, cols, t.data().to_vec());
        self.push(Op::Reshape(a), out, "reshape")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::matrix(rows, total, out),
            "concat_cols",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::matrix(rows, cols, out),
            "concat_rows",
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(t.rows() * len);
        for i in 0..t.rows() {
            out.extend_from_slice(&t.row_slice(i)[start..start + len]);
        }
        let out = Tensor::matrix(t.rows(), len, out);
        self.push(Op::SliceCols(a, start), out, "slice_cols")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = t.cols();
        let out = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec());
        self.push(Op::SliceRows(a, start), out, "slice_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s), "sum")
    }

    /// Sums over rows, `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
                *o += v;
            }
        }
        let out = Tensor::matrix(1, t.cols(), out);
        self.push(Op::SumRows(a), out, "sum_rows")
    }

    /// Sums over columns, `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
        let out = Tensor::matrix(t.rows(), 1, out);
        self.push(Op::SumCols(a), out, "sum_cols")
    }

    /// Row-wise maximum, `[m, n] -> [m, 1]`; ties go to the lowest index.
    pub fn max_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.rows());
        let mut arg = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let (k, v) = t
                .row_slice(i)
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best });
            out.push(v);
            arg.push(k);
        }
        let out = Tensor::matrix(t.rows(), 1, out);
        self.push(Op::MaxCols(a, arg), out, "max_cols")
    }

    /// Elementwise maximum across same-shape tensors; ties go to the
    /// earliest tensor in `parts`.
    pub fn max_stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (rows, cols) = (first.rows(), first.cols());
        let mut out = first.data().to_vec();
        let mut arg = vec![0u32; out.len()];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            let t = self.value(p);
            if t.rows() != rows || t.cols() != cols {
                return Err(shape_err("max_stack", self.value(parts[0]), t));
            }
            for (idx, &v) in t.data().iter().enumerate() {
                if v > out[idx] {
                    out[idx] = v;
                    arg[idx] = k as u32;
                }
            }
        }
        self.push(
            Op::MaxStack(parts.to_vec(), arg),
            Tensor::matrix(rows, cols, out),
            "max_stack",
        )
    }

    /// Row-wise Euclidean norm, `[m, n] -> [m, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = (0..t.rows())
            .map(|i| t.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::matrix(t.rows(), 1, out);
        self.push(Op::RowNorm(a), out, "row_norm")
    }

    /// Row-wise cross product of two `[m, 3]` tensors.
    pub fn cross(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != 3 || ta.shape() != tb.shape() {
            return Err(shape_err("cross", ta, tb));
        }
        let mut out = Vec::with_capacity(ta.numel());
        for i in 0..ta.rows() {
            out.extend_from_slice(&cross3(ta.row_slice(i), tb.row_slice(i)));
        }
        let out = Tensor::matrix(ta.rows(), 3, out);
        self.push(Op::Cross(a, b), out, "cross")
    }

    /// Exclusive prefix sum along each row: `y[i, j] = sum_{k<j} x[i, k]`.
    pub fn cumsum_excl_cols(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(t.numel());
        for i in 0..t.rows() {
            let mut acc = 0.0;
            for &v in t.row_slice(i) {
                out.push(acc);
                acc += v;
            }
        }
        let out = Tensor::matrix(t.rows(), t.cols(), out);
        self.push(Op::CumsumExclCols(a), out, "cumsum_excl_cols")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &r in idx {
            if r >= t.rows() {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            out.extend_from_slice(t.row_slice(r));
        }
        let out = Tensor::matrix(idx.len(), c, out);
        self.push(Op::GatherRows(a, idx.to_vec()), out, "gather_rows")
    }

    /// Places row `k` of `a` at row `idx[k]` of a zero `[total, n]` tensor.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], total: usize) -> Result<Var> {
        let t = self.value(a);
        if idx.len() != t.rows() || idx.iter().any(|&r| r >= total) {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len(), total],
            });
        }
        let c = t.cols();
        let mut out = Tensor::zeros(total, c);
        for (k, &r) in idx.iter().enumerate() {
            out.data_mut()[r * c..(r + 1) * c].copy_from_slice(t.row_slice(k));
        }
        self.push(Op::ScatterRows(a, idx.to_vec()), out, "scatter_rows")
    }

    /// Affine map `x · w + b` with `b` broadcast over rows.
    /// `x·w + b` with a `[1, n]` bias, fused into one product.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tb.rows() != 1 || tb.cols() != tw.cols() || tx.cols() != tw.rows() {
            let h = self.matmul(x, w)?;
            return self.add(h, b);
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.cols());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(tb.data());
        }
        gemm(
            m,
            k,
            n,
            GemmView::new(tx.data(), k as isize, 1),
            GemmView::new(tw.data(), n as isize, 1),
            &mut out,
            1.0,
        );
        self.push(Op::Linear(x, w, b), Tensor::matrix(m, n, out), "linear")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::matrix(lt.rows(), lt.cols(), vec![1.0]));
        let mut leaves: Vec<Option<Tensor>> = vec![None; n];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            for inp in node.op.inputs() {
                if inp.0 >= i {
                    return Err(TensorError::Cycle(i));
                }
            }
            match &node.op {
                Op::Param(_) | Op::Input | Op::Constant => {
                    leaves[i] = Some(g);
                }
                op => self.backward_op(op, Var(i), g, &mut grads)?,
            }
        }

        let mut params = GradientStore::new(self.params.len());
        for (&id, &v) in &self.param_vars {
            if !self.params.is_trainable(id) {
                continue;
            }
            match &leaves[..].get(v.0).and_then(Option::as_ref) {
                Some(g) => params.accumulate(id, g),
                None => {
                    let t = self.params.get(id);
                    params.accumulate(id, &Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()])?);
                }
            }
        }
        Ok(Gradients { leaves, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        if self.needs(a) {
            // g[m,n] · bᵀ[n,k]
            let mut ga = vec![0.0; m * k];
            gemm(
                m,
                n,
                k,
                GemmView::new(g.data(), n as isize, 1),
                GemmView::new(tb.data(), 1, n as isize),
                &mut ga,
                0.0,
            );
            self.accum(grads, a, Tensor::matrix(m, k, ga));
        }
        if self.needs(b) {
            // aᵀ[k,m] · g[m,n]
            let mut gb = vec![0.0; k * n];
            gemm(
                k,
                m,
                n,
                GemmView::new(ta.data(), 1, k as isize),
                GemmView::new(g.data(), n as isize, 1),
                &mut gb,
                0.0,
            );
            self.accum(grads, b, Tensor::matrix(k, n, gb));
        }
    }

    fn backward_op(&self, op: &Op, out: Var, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = self.value(out);
        match op {
            Op::Param(_) | Op::Input | Op::Constant => {}
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, &g, grads),
            Op::Linear(x, w, b) => {
                self.matmul_backward(*x, *w, &g, grads);
                if self.needs(*b) {
                    let n = g.cols();
                    self.accum(grads, *b, reduce_to(g, 1, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*b) {
                    let tb = self.value(*b);
                    let gb = reduce_to(g.map(|v| sign * v), tb.rows(), tb.cols());
                    self.accum(grads, *b, gb);
                }
                if self.needs(*a) {
                    let ta = self.value(*a);
                    self.accum(grads, *a, reduce_to(g, ta.rows(), ta.cols()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let gb = mul_broadcast(&g, tb);
                    self.accum(grads, *a, reduce_to(gb, ta.rows(), ta.cols()));
                }
                if self.needs(*b) {
                    let ga = mul_broadcast(&g, ta);
                    self.accum(grads, *b, reduce_to(ga, tb.rows(), tb.cols()));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = (g.rows(), g.cols());
                let eb = expand(tb, r, c);
                if self.needs(*a) {
                    let ga = zip_map(&g, &eb, |x, y| x / y);
                    self.accum(grads, *a, reduce_to(ga, ta.rows(), ta.cols()));
                }
                if self.needs(*b) {
                    let ea = expand(ta, r, c);
                    let gb = zip3_map(&g, &ea, &eb, |gv, x, y| -gv * x / (y * y));
                    self.accum(grads, *b, reduce_to(gb, tb.rows(), tb.cols()));
                }
            }
            Op::Neg(a) => self.accum(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => self.accum(grads, *a, g.map(|v| c * v)),
            Op::AddScalar(a) => self.accum(grads, *a, g),
            Op::Sin(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| gv * x.cos());
                self.accum(grads, *a, ga);
            }
            Op::Cos(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| -gv * x.sin());
                self.accum(grads, *a, ga);
            }
            Op::Exp(a) => self.accum(grads, *a, zip_map(&g, y, |gv, yv| gv * yv)),
            Op::Sigmoid(a) => {
                self.accum(grads, *a, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Relu(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accum(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| gv * sigmoid(x));
                self.accum(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accum(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let ga = zip_map(&g, y, |gv, yv| if yv > 0.0 { 0.5 * gv / yv } else { 0.0 });
                self.accum(grads, *a, ga);
            }
            Op::Powf(a, p) => {
                let p = *p;
                let ga = zip_map(&g, self.value(*a), |gv, x| {
                    if x == 0.0 && p < 1.0 {
                        0.0
                    } else {
                        gv * p * x.powf(p - 1.0)
                    }
                });
                self.accum(grads, *a, ga);
            }
            Op::Transpose(a) => self.accum(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let t = self.value(*a);
                let gt = Tensor::new(t.shape().to_vec(), g.into_data())?;
                self.accum(grads, *a, gt);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(g.rows() * c);
                        for i in 0..g.rows() {
                            gp.extend_from_slice(&g.row_slice(i)[start..start + c]);
                        }
                        self.accum(grads, p, Tensor::matrix(g.rows(), c, gp));
                    }
                    start += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut start = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.needs(p) {
                        let gp = g.data()[start * c..(start + r) * c].to_vec();
                        self.accum(grads, p, Tensor::matrix(r, c, gp));
                    }
                    start += r;
                }
            }
            Op::SliceCols(a, start) => {
                if !self.needs(*a) {
                    return Ok(());
                }
                let t = self.value(*a);
                let (cols, len) = (t.cols(), g.cols());
                // accumulate in place: slices of one wide tensor are common
                let ga = grads[a.0].get_or_insert_with(|| Tensor::zeros(t.rows(), cols));
                for (row, gr) in ga.data_mut().chunks_exact_mut(cols).zip(g.data().chunks_exact(len)) {
                    row[*start..*start + len]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(o, &v)| *o += v);
                }
            }
            Op::SliceRows(a, start) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                let c = t.cols();
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                self.accum(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let t = self.value(*a);
                self.accum(grads, *a, Tensor::full(t.rows(), t.cols(), g.item()));
            }
            Op::SumRows(a) => {
                let t = self.value(*a);
                self.accum(grads, *a, expand(&g, t.rows(), t.cols()));
            }
            Op::SumCols(a) => {
                let t = self.value(*a);
                self.accum(grads, *a, expand(&g, t.rows(), t.cols()));
            }
            Op::MaxCols(a, arg) => {
                let t = self.value(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for (i, &k) in arg.iter().enumerate() {
                    ga.set(i, k, g.data()[i]);
                }
                self.accum(grads, *a, ga);
            }
            Op::MaxStack(parts, arg) => {
                for (k, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let data = g
                        .data()
                        .iter()
                        .zip(arg)
                        .map(|(&gv, &owner)| if owner as usize == k { gv } else { 0.0 })
                        .collect();
                    self.accum(grads, p, Tensor::matrix(g.rows(), g.cols(), data));
                }
            }
            Op::RowNorm(a) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.rows(), c);
                for i in 0..t.rows() {
                    let nrm = y.data()[i];
                    if nrm > 0.0 {
                        let s = g.data()[i] / nrm;
                        for j in 0..c {
                            ga.data_mut()[i * c + j] = s * t.data()[i * c + j];
                        }
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::Cross(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let rows = ta.rows();
                if self.needs(*a) {
                    let mut ga = Vec::with_capacity(rows * 3);
                    for i in 0..rows {
                        ga.extend_from_slice(&cross3(tb.row_slice(i), g.row_slice(i)));
                    }
                    self.accum(grads, *a, Tensor::matrix(rows, 3, ga));
                }
                if self.needs(*b) {
                    let mut gb = Vec::with_capacity(rows * 3);
                    for i in 0..rows {
                        gb.extend_from_slice(&cross3(g.row_slice(i), ta.row_slice(i)));
                    }
                    self.accum(grads, *b, Tensor::matrix(rows, 3, gb));
                }
            }
            Op::CumsumExclCols(a) => {
                let mut ga = Vec::with_capacity(g.numel());
                for i in 0..g.rows() {
                    let row = g.row_slice(i);
                    let mut tail = vec![0.0; row.len()];
                    let mut acc = 0.0;
                    for k in (0..row.len()).rev() {
                        tail[k] = acc;
                        acc += row[k];
                    }
                    ga.extend(tail);
                }
                self.accum(grads, *a, Tensor::matrix(g.rows(), g.cols(), ga));
            }
            Op::GatherRows(a, idx) => {
                let t = self.value(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.rows(), c);
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga.data_mut()[r * c + j] += g.data()[k * c + j];
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::ScatterRows(a, idx) => {
                let c = g.cols();
                let mut ga = Vec::with_capacity(idx.len() * c);
                for &r in idx {
                    ga.extend_from_slice(g.row_slice(r));
                }
                self.accum(grads, *a, Tensor::matrix(idx.len(), c, ga));
            }
        }
        Ok(())
    }
}

fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: GradientStore,
}

impl Gradients {
    /// Gradient for an input or parameter leaf, if it influenced the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &GradientStore {
        &self.params
    }

    pub fn into_params(self) -> GradientStore {
        self.params
    }
}
