//! Forward constructors and vector-Jacobian products for every primitive.

use super::kernels::{add_assign, axpy, dot, gemm_acc, gemm_tn_acc, transpose};
use super::{accumulate, Graph, Node, OpKind, Var};
use crate::tensor::{Real, Result, Tensor, TensorError};

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;
/// Lower clamp on the norm product in the cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

/// How the right-hand operand of a binary op is expanded to the left-hand shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Identical shapes.
    Same,
    /// Right operand is a vector matching the trailing dimension of a grid;
    /// it is repeated for every row.
    Row,
    /// Right operand is an `N×1` column; each row of the grid is combined
    /// with its own scalar.
    Col,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Axis {
    Rows,
    Cols,
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Affine(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>, Axis),
    SliceCols(Var, usize),
    SelectRow(Var, usize),
    Reshape(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm { src: Var, rstd: Vec<T> },
    Softmax(Var),
    MeanPool(Var),
    MaxPool { src: Var, argmax: Vec<usize> },
    Sum(Var),
    Cosine { a: Var, b: Var, denom: T, clamped: bool },
    CrossEntropy { logits: Var, target: usize, probs: Vec<T> },
}

impl<T: Real> Op<T> {
    pub(crate) fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Affine(..) => OpKind::Affine,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols(..) => OpKind::SliceCols,
            Op::SelectRow(..) => OpKind::SelectRow,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Relu(..) => OpKind::Relu,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax(..) => OpKind::Softmax,
            Op::MeanPool(..) => OpKind::MeanPool,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Sum(..) => OpKind::Sum,
            Op::Cosine { .. } => OpKind::Cosine,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    /// Propagates the upstream gradient `g` of node `me` to its inputs.
    pub(crate) fn backward(&self, nodes: &[Node<T>], me: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &nodes[me].value;
        let val = |v: Var| &nodes[v.0].value;
        match self {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                accumulate(nodes, grads, *a, |s| add_assign(s, g));
                let cols = out.cols();
                accumulate(nodes, grads, *b, |s| match bc {
                    Broadcast::Same => add_assign(s, g),
                    Broadcast::Row => g.chunks(cols).for_each(|row| add_assign(s, row)),
                    Broadcast::Col => {
                        for (si, row) in s.iter_mut().zip(g.chunks(cols)) {
                            *si = *si + row.iter().copied().sum::<T>();
                        }
                    }
                });
            }
            Op::Mul(a, b, bc) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let cols = out.cols();
                accumulate(nodes, grads, *a, |s| match bc {
                    Broadcast::Same => {
                        for ((si, &gi), &bi) in s.iter_mut().zip(g).zip(bv) {
                            *si = *si + gi * bi;
                        }
                    }
                    Broadcast::Row => {
                        for (srow, grow) in s.chunks_mut(cols).zip(g.chunks(cols)) {
                            for ((si, &gi), &bi) in srow.iter_mut().zip(grow).zip(bv) {
                                *si = *si + gi * bi;
                            }
                        }
                    }
                    Broadcast::Col => {
                        for ((srow, grow), &bi) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(bv) {
                            axpy(bi, grow, srow);
                        }
                    }
                });
                accumulate(nodes, grads, *b, |s| match bc {
                    Broadcast::Same => {
                        for ((si, &gi), &ai) in s.iter_mut().zip(g).zip(av) {
                            *si = *si + gi * ai;
                        }
                    }
                    Broadcast::Row => {
                        for (grow, arow) in g.chunks(cols).zip(av.chunks(cols)) {
                            for ((si, &gi), &ai) in s.iter_mut().zip(grow).zip(arow) {
                                *si = *si + gi * ai;
                            }
                        }
                    }
                    Broadcast::Col => {
                        for ((si, grow), arow) in s.iter_mut().zip(g.chunks(cols)).zip(av.chunks(cols)) {
                            *si = *si + dot(grow, arow);
                        }
                    }
                });
            }
            Op::Affine(a, scale) => {
                accumulate(nodes, grads, *a, |s| axpy(*scale, g, s));
            }
            Op::MatMul(a, b) => {
                let (at, bt) = (val(*a), val(*b));
                let (m, k, n) = (at.rows(), bt.rows(), bt.cols());
                accumulate(nodes, grads, *a, |s| {
                    let b_t = transpose(bt.data(), k, n);
                    gemm_acc(g, &b_t, s, m, n, k);
                });
                accumulate(nodes, grads, *b, |s| gemm_tn_acc(at.data(), g, s, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                accumulate(nodes, grads, *a, |s| add_assign(s, &transpose(g, r, c)));
            }
            Op::Concat(parts, axis) => match axis {
                Axis::Rows => {
                    let mut offset = 0;
                    for p in parts {
                        let len = val(*p).numel();
                        accumulate(nodes, grads, *p, |s| add_assign(s, &g[offset..offset + len]));
                        offset += len;
                    }
                }
                Axis::Cols => {
                    let cols = out.cols();
                    let mut col0 = 0;
                    for p in parts {
                        let pc = val(*p).cols();
                        accumulate(nodes, grads, *p, |s| {
                            for (srow, grow) in s.chunks_mut(pc).zip(g.chunks(cols)) {
                                add_assign(srow, &grow[col0..col0 + pc]);
                            }
                        });
                        col0 += pc;
                    }
                }
            },
            Op::SliceCols(a, start) => {
                let src_cols = val(*a).cols();
                let w = out.cols();
                accumulate(nodes, grads, *a, |s| {
                    for (srow, grow) in s.chunks_mut(src_cols).zip(g.chunks(w)) {
                        add_assign(&mut srow[*start..*start + w], grow);
                    }
                });
            }
            Op::SelectRow(a, row) => {
                let (w, row) = (out.numel(), *row);
                accumulate(nodes, grads, *a, |s| add_assign(&mut s[row * w..(row + 1) * w], g));
            }
            Op::Reshape(a) => accumulate(nodes, grads, *a, |s| add_assign(s, g)),
            Op::Tanh(a) => accumulate(nodes, grads, *a, |s| {
                for ((si, &gi), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *si = *si + gi * (T::one() - y * y);
                }
            }),
            Op::Sigmoid(a) => accumulate(nodes, grads, *a, |s| {
                for ((si, &gi), &y) in s.iter_mut().zip(g).zip(out.data()) {
                    *si = *si + gi * y * (T::one() - y);
                }
            }),
            Op::Relu(a) => accumulate(nodes, grads, *a, |s| {
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a).data()) {
                    if x > T::zero() {
                        *si = *si + gi;
                    }
                }
            }),
            Op::Gelu(a) => accumulate(nodes, grads, *a, |s| {
                for ((si, &gi), &x) in s.iter_mut().zip(g).zip(val(*a).data()) {
                    *si = *si + gi * gelu_grad(x);
                }
            }),
            Op::LayerNorm { src, rstd } => {
                let cols = out.cols();
                let inv_n = T::one() / T::lit(cols as f64);
                accumulate(nodes, grads, *src, |s| {
                    for (((srow, grow), yrow), &r) in s
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(out.data().chunks(cols))
                        .zip(rstd)
                    {
                        let mean_g = grow.iter().copied().sum::<T>() * inv_n;
                        let mean_gy = dot(grow, yrow) * inv_n;
                        for ((si, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *si = *si + r * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = out.cols();
                accumulate(nodes, grads, *a, |s| {
                    for ((srow, grow), yrow) in s.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                        let inner = dot(grow, yrow);
                        for ((si, &gi), &yi) in srow.iter_mut().zip(grow).zip(yrow) {
                            *si = *si + yi * (gi - inner);
                        }
                    }
                });
            }
            Op::MeanPool(a) => {
                let n = val(*a).rows();
                let inv = T::one() / T::lit(n as f64);
                accumulate(nodes, grads, *a, |s| {
                    for srow in s.chunks_mut(g.len()) {
                        axpy(inv, g, srow);
                    }
                });
            }
            Op::MaxPool { src, argmax } => {
                let cols = out.cols();
                accumulate(nodes, grads, *src, |s| {
                    for (j, (&row, &gj)) in argmax.iter().zip(g).enumerate() {
                        s[row * cols + j] = s[row * cols + j] + gj;
                    }
                });
            }
            Op::Sum(a) => accumulate(nodes, grads, *a, |s| {
                s.iter_mut().for_each(|si| *si = *si + g[0]);
            }),
            Op::Cosine { a, b, denom, clamped } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let cos = out.item();
                let na2 = dot(av, av);
                let nb2 = dot(bv, bv);
                let scale = g[0] / *denom;
                // d cos/da = b/denom - cos·a/|a|² when the norm product is not clamped.
                let grad_for = |s: &mut [T], own: &[T], other: &[T], own_n2: T| {
                    for ((si, &o), &x) in s.iter_mut().zip(other).zip(own) {
                        let mut d = scale * o;
                        if !*clamped && own_n2 > T::zero() {
                            d = d - g[0] * cos * x / own_n2;
                        }
                        *si = *si + d;
                    }
                };
                accumulate(nodes, grads, *a, |s| grad_for(s, av, bv, na2));
                accumulate(nodes, grads, *b, |s| grad_for(s, bv, av, nb2));
            }
            Op::CrossEntropy { logits, target, probs } => accumulate(nodes, grads, *logits, |s| {
                for (k, (si, &p)) in s.iter_mut().zip(probs).enumerate() {
                    let onehot = if k == *target { T::one() } else { T::zero() };
                    *si = *si + g[0] * (p - onehot);
                }
            }),
        }
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let u = c * (x + k * x * x * x);
    let th = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    (th, du)
}

fn gelu<T: Real>(x: T) -> T {
    let (th, _) = gelu_parts(x);
    T::lit(0.5) * x * (T::one() + th)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (th, du) = gelu_parts(x);
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: &str) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.to_string(),
    }
}

impl<T: Real> Graph<T> {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn unary(&mut self, a: Var, op: Op<T>, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        let rg = self.requires_grad(a);
        self.push(value, op, rg, name)
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Broadcast::Same);
        }
        if sa.len() == 2 && sb.len() == 1 && sb[0] == sa[1] {
            return Ok(Broadcast::Row);
        }
        if sa.len() == 2 && sb.len() == 2 && sb[1] == 1 && sb[0] == sa[0] {
            return Ok(Broadcast::Col);
        }
        Err(mismatch(op, sa, sb))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let bc = self.broadcast_kind(name, a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let cols = at.cols();
        let data: Vec<T> = match bc {
            Broadcast::Same => at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Row => at
                .data()
                .chunks(cols)
                .flat_map(|row| row.iter().zip(bt.data()).map(|(&x, &y)| f(x, y)))
                .collect::<Vec<_>>(),
            Broadcast::Col => at
                .data()
                .chunks(cols)
                .zip(bt.data())
                .flat_map(|(row, &y)| row.iter().map(move |&x| (x, y)))
                .map(|(x, y)| f(x, y))
                .collect(),
        };
        let value = Tensor::from_parts(at.shape().to_vec(), data);
        let rg = self.any_grad(&[a, b]);
        self.push(value, make(a, b, bc), rg, name)
    }

    /// Elementwise sum. `b` may be a row vector or an `N×1` column broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    /// Elementwise product with the same broadcasting rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// `a·scale + shift` elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::lit(scale), T::lit(shift));
        self.unary(a, Op::Affine(a, s), "affine", move |x| x * s + t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.affine(a, k, 0.0)
    }

    /// `a[m×k] · b[k×n]`. A vector `a[k]` is treated as a single row and
    /// yields a vector `[n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || sa.len() > 2 || *sa.last().unwrap() != sb[0] {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (self.value(a).rows(), sb[0], sb[1]);
        let mut data = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut data, m, k, n);
        let shape = if sa.len() == 1 { vec![n] } else { vec![m, n] };
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_parts(shape, data), Op::MatMul(a, b), rg, "matmul")
    }

    /// `x · w + b` for a weight `w[in×out]` and bias `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(invalid("transpose", &s, "expected a matrix"));
        }
        let data = transpose(self.value(a).data(), s[0], s[1]);
        let rg = self.requires_grad(a);
        self.push(
            Tensor::from_parts(vec![s[1], s[0]], data),
            Op::Transpose(a),
            rg,
            "transpose",
        )
    }

    /// Concatenates along the trailing (feature) dimension. All parts must
    /// share rank and row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat", &[], "no inputs"))?)
            .to_vec();
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.is_empty() || self.value(p).rows() != rows {
                return Err(mismatch("concat", &first, s));
            }
            cols += self.value(p).cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = cols;
        let rg = self.any_grad(parts);
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec(), Axis::Cols),
            rg,
            "concat",
        )
    }

    /// Stacks rows. Vectors count as one row; every part must have the same
    /// feature width. The result is always a matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| invalid("concat_rows", &[], "no inputs"))?)
            .to_vec();
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.rank() > 2 || t.cols() != cols {
                return Err(mismatch("concat_rows", &first, t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = self.any_grad(parts);
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::Concat(parts.to_vec(), Axis::Rows),
            rg,
            "concat_rows",
        )
    }

    /// Columns `start..start + len` of a matrix or vector.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let cols = t.cols();
        if t.rank() == 0 || len == 0 || start + len > cols {
            return Err(invalid(
                "slice_cols",
                t.shape(),
                &format!("cannot take {start}..{}", start + len),
            ));
        }
        let data: Vec<T> = t
            .data()
            .chunks(cols)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.requires_grad(a);
        self.push(
            Tensor::from_parts(shape, data),
            Op::SliceCols(a, start),
            rg,
            "slice_cols",
        )
    }

    /// Row `row` of a matrix as a vector.
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(invalid("select_row", t.shape(), "expected a matrix"));
        }
        if row >= t.rows() {
            return Err(TensorError::IndexOutOfRange {
                op: "select_row",
                index: row,
                len: t.rows(),
            });
        }
        let value = Tensor::vector(t.row(row).to_vec());
        let rg = self.requires_grad(a);
        self.push(value, Op::SelectRow(a, row), rg, "select_row")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        self.push(value, Op::Reshape(a), rg, "reshape")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a), "tanh", |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sigmoid(a), "sigmoid", sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| if x > T::zero() { x } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu(a), "gelu", gelu)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine).
    /// Variance is biased and regularised by `1e-5`; a constant row maps to zeros.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(invalid("layer_norm", t.shape(), "expected a vector or matrix"));
        }
        let cols = t.cols();
        let n = T::lit(cols as f64);
        let eps = T::lit(LN_EPS);
        let mut data = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.rows());
        for row in t.data().chunks(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            data.extend(row.iter().map(|&x| (x - mean) * r));
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(value, Op::LayerNorm { src: a, rstd }, rg, "layer_norm")
    }

    /// Layer norm followed by a learnable per-feature scale and shift.
    pub fn layer_norm_affine(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.layer_norm(a)?;
        let scaled = self.mul(n, gamma)?;
        self.add(scaled, beta)
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(invalid("softmax", t.shape(), "expected a vector or matrix"));
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&x| (x - max).exp()));
            let z = data[start..].iter().copied().sum::<T>();
            data[start..].iter_mut().for_each(|x| *x = *x / z);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.requires_grad(a);
        self.push(value, Op::Softmax(a), rg, "softmax")
    }

    fn grid_rows(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(invalid(op, s, "expected an N×D token grid"));
        }
        Ok((s[0], s[1]))
    }

    /// Mean over rows: `N×D → D`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.grid_rows("mean_pool", a)?;
        let mut data = vec![T::zero(); d];
        for row in self.value(a).data().chunks(d) {
            add_assign(&mut data, row);
        }
        let inv = T::one() / T::lit(n as f64);
        data.iter_mut().for_each(|x| *x = *x * inv);
        let rg = self.requires_grad(a);
        self.push(Tensor::vector(data), Op::MeanPool(a), rg, "mean_pool")
    }

    /// Max over rows: `N×D → D`. Ties resolve to the first maximal row.
    pub fn max_pool(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.grid_rows("max_pool", a)?;
        let t = self.value(a);
        let mut data = t.row(0).to_vec();
        let mut argmax = vec![0usize; d];
        for (r, row) in t.data().chunks(d).enumerate().skip(1) {
            for j in 0..d {
                if row[j] > data[j] {
                    data[j] = row[j];
                    argmax[j] = r;
                }
            }
        }
        let rg = self.requires_grad(a);
        self.push(Tensor::vector(data), Op::MaxPool { src: a, argmax }, rg, "max_pool")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    /// Cosine similarity of two equal-length vectors. The norm product in the
    /// denominator is clamped below at `1e-8`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(mismatch("cosine", ta.shape(), tb.shape()));
        }
        let prod = dot(ta.data(), ta.data()).sqrt() * dot(tb.data(), tb.data()).sqrt();
        let eps = T::lit(COSINE_EPS);
        let (denom, clamped) = if prod > eps { (prod, false) } else { (eps, true) };
        let cos = dot(ta.data(), tb.data()) / denom;
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(cos), Op::Cosine { a, b, denom, clamped }, rg, "cosine")
    }

    /// `-log softmax(logits)[target]` for a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 1 {
            return Err(invalid("cross_entropy", t.shape(), "expected a logit vector"));
        }
        if target >= t.numel() {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: target,
                len: t.numel(),
            });
        }
        let max = t.data().iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = t.data().iter().map(|&x| (x - max).exp()).collect();
        let z = exps.iter().copied().sum::<T>();
        let loss = z.ln() + max - t.data()[target];
        let probs = exps.into_iter().map(|e| e / z).collect();
        let rg = self.requires_grad(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target, probs },
            rg,
            "cross_entropy",
        )
    }
}
