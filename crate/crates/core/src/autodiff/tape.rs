use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{leaky_relu, sigmoid, silu, silu_grad, Matrix, Real};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// How the right operand of a binary elementwise op is stretched to the left shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// `n×1` against `n×m`.
    Col,
    /// `1×m` against `n×m`.
    Row,
    /// `1×1` against anything.
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Result<Self> {
        if left == right {
            Ok(Bcast::Same)
        } else if right == (1, 1) {
            Ok(Bcast::Scalar)
        } else if right == (left.0, 1) {
            Ok(Bcast::Col)
        } else if right == (1, left.1) {
            Ok(Bcast::Row)
        } else {
            Err(Error::shape(op, left, right))
        }
    }

    #[inline]
    fn at(self, i: usize, j: usize, cols: usize) -> usize {
        match self {
            Bcast::Same => i * cols + j,
            Bcast::Col => i,
            Bcast::Row => j,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind<T> {
    Silu,
    LeakyRelu(T),
    Sigmoid,
    Ln,
    Sqrt,
    Clamp(T, T),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Binary(BinKind, usize, usize, Bcast),
    Affine(usize, T),
    Unary(UnaryKind<T>, usize),
    SoftmaxRows(usize),
    GatherRows(usize, Arc<[usize]>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SegmentSum(usize, Arc<[usize]>),
    SegmentMean(usize, Arc<[usize]>, Vec<usize>),
    /// Source row chosen for every output entry, `usize::MAX` for empty segments.
    SegmentMax(usize, Vec<usize>),
    SegmentSoftmax(usize, Arc<[usize]>),
    SumAll(usize),
    MeanAll(usize),
    SumRows(usize),
    Dropout(usize, Vec<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run recording of a computation; rebuilt for every forward pass.
///
/// Nodes are appended in evaluation order, so inputs always precede the nodes
/// that consume them and the backward sweep is a single reverse scan.
#[derive(Debug)]
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
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

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Const };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Trainable input; receives a gradient in [`Tape::backward`].
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad && v.tape == self.id
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let value = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.transpose();
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Transpose(ia), rg))
    }

    fn binary(&mut self, kind: BinKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bc = Bcast::resolve(name, va.shape(), vb.shape())?;
        let (rows, cols) = va.shape();
        let (da, db) = (va.data(), vb.data());
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = da[i * cols + j];
                let y = db[bc.at(i, j, cols)];
                out.push(match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                });
            }
        }
        let value = Matrix::from_vec(rows, cols, out)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(value, Op::Binary(kind, ia, ib, bc), rg))
    }

    /// `a + b`; `b` may be `n×1`, `1×m` or `1×1` and is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, "div", a, b)
    }

    /// `scale·a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(|v| scale * v + shift);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Affine(ia, scale), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    fn unary(&mut self, kind: UnaryKind<T>, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let f = |x: T| match kind {
            UnaryKind::Silu => silu(x),
            UnaryKind::LeakyRelu(s) => leaky_relu(x, s),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Clamp(lo, hi) => x.max(lo).min(hi),
        };
        let value = self.nodes[ia].value.map(f);
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Unary(kind, ia), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Ln, a)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, a)
    }

    /// Gradient passes only where `lo ≤ x ≤ hi`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    /// Max-subtracted softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if v.cols() == 0 {
            return Err(Error::InvalidArgument("softmax over zero columns".into()));
        }
        let mut out = v.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                total = total + *x;
            }
            row.iter_mut().for_each(|x| *x = *x / total);
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SoftmaxRows(ia), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let cols = v.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows.iter() {
            if r >= v.rows() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: v.rows(),
                });
            }
            data.extend_from_slice(v.row(r));
        }
        let value = Matrix::from_vec(rows.len(), cols, data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::GatherRows(ia, rows), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        let rows = self.nodes[first].value.rows();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.0 != rows {
                return Err(Error::shape("concat_cols", self.nodes[first].value.shape(), s));
            }
        }
        let cols: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::ConcatCols(idx), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let first = *idx
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero parts".into()))?;
        let cols = self.nodes[first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(Error::shape("concat_rows", self.nodes[first].value.shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let value = Matrix::from_vec(rows, cols, data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(value, Op::ConcatRows(idx), rg))
    }

    fn check_segments(&self, ia: usize, seg: &[usize], count: usize) -> Result<()> {
        let rows = self.nodes[ia].value.rows();
        if seg.len() != rows {
            return Err(Error::shape(
                "segment",
                self.nodes[ia].value.shape(),
                (seg.len(), 1),
            ));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= count) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: count,
            });
        }
        Ok(())
    }

    /// Row `r` of `a` is added into output row `seg[r]`.
    pub fn segment_sum(&mut self, a: Var, seg: Arc<[usize]>, count: usize) -> Result<Var> {
        let ia = self.check(a)?;
        self.check_segments(ia, &seg, count)?;
        let v = &self.nodes[ia].value;
        let mut out = Matrix::zeros(count, v.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (o, &x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                *o = *o + x;
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SegmentSum(ia, seg), rg))
    }

    /// Mean of the rows in each segment; empty segments yield zeros.
    pub fn segment_mean(&mut self, a: Var, seg: Arc<[usize]>, count: usize) -> Result<Var> {
        let ia = self.check(a)?;
        self.check_segments(ia, &seg, count)?;
        let v = &self.nodes[ia].value;
        let mut sizes = vec![0usize; count];
        seg.iter().for_each(|&s| sizes[s] += 1);
        let mut out = Matrix::zeros(count, v.cols());
        for (r, &s) in seg.iter().enumerate() {
            for (o, &x) in out.row_mut(s).iter_mut().zip(v.row(r)) {
                *o = *o + x;
            }
        }
        for (s, &n) in sizes.iter().enumerate() {
            if n > 0 {
                let d = T::c(n as f64);
                out.row_mut(s).iter_mut().for_each(|o| *o = *o / d);
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SegmentMean(ia, seg, sizes), rg))
    }

    /// Columnwise max of the rows in each segment. Ties resolve to the lowest row.
    pub fn segment_max(&mut self, a: Var, seg: Arc<[usize]>, count: usize) -> Result<Var> {
        let ia = self.check(a)?;
        self.check_segments(ia, &seg, count)?;
        let v = &self.nodes[ia].value;
        let cols = v.cols();
        let mut out = Matrix::zeros(count, cols);
        let mut arg = vec![usize::MAX; count * cols];
        for (r, &s) in seg.iter().enumerate() {
            for (j, &x) in v.row(r).iter().enumerate() {
                let k = s * cols + j;
                if arg[k] == usize::MAX || x > out.data()[k] {
                    arg[k] = r;
                    out.data_mut()[k] = x;
                }
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SegmentMax(ia, arg), rg))
    }

    /// Softmax over the rows sharing a segment, independently per column.
    pub fn segment_softmax(&mut self, a: Var, seg: Arc<[usize]>, count: usize) -> Result<Var> {
        let ia = self.check(a)?;
        self.check_segments(ia, &seg, count)?;
        let v = &self.nodes[ia].value;
        let cols = v.cols();
        let mut mx = vec![T::neg_infinity(); count * cols];
        for (r, &s) in seg.iter().enumerate() {
            for (j, &x) in v.row(r).iter().enumerate() {
                let m = &mut mx[s * cols + j];
                *m = m.max(x);
            }
        }
        let mut out = v.clone();
        let mut total = vec![T::zero(); count * cols];
        for (r, &s) in seg.iter().enumerate() {
            for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = (*x - mx[s * cols + j]).exp();
                total[s * cols + j] = total[s * cols + j] + *x;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = *x / total[s * cols + j];
            }
        }
        let rg = self.rg(ia);
        Ok(self.push(out, Op::SegmentSoftmax(ia, seg), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let value = Matrix::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(ia);
        Ok(self.push(value, Op::SumAll(ia), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if v.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let value = Matrix::scalar(v.sum() / T::c(v.len() as f64));
        let rg = self.rg(ia);
        Ok(self.push(value, Op::MeanAll(ia), rg))
    }

    /// `n×m → n×1` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let value = Matrix::col_vector((0..v.rows()).map(|i| v.row(i).iter().copied().sum()).collect());
        let rg = self.rg(ia);
        Ok(self.push(value, Op::SumRows(ia), rg))
    }

    /// Inverted dropout. With `rng = None` (eval mode) or `p = 0` this is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        let ia = self.check(a)?;
        let Some(rng) = rng else { return Ok(a) };
        if p == 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let v = &self.nodes[ia].value;
        let mask: Vec<T> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let value = Matrix::from_vec(v.rows(), v.cols(), data)?;
        let rg = self.rg(ia);
        Ok(self.push(value, Op::Dropout(ia, mask), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// over fan-out; every node is visited once.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.check(loss)?;
        let shape = self.nodes[il].value.shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[il] = Some(Matrix::scalar(T::one()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[i];
        let val = |k: usize| &self.nodes[k].value;
        let mut acc = |k: usize, contrib: Matrix<T>| {
            if !self.nodes[k].requires_grad {
                return;
            }
            match &mut grads[k] {
                Some(existing) => existing
                    .add_assign(&contrib)
                    .expect("gradient shape matches value shape"),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.matmul(&val(*b).transpose()).expect("matmul grad"));
                }
                if self.rg(*b) {
                    acc(*b, val(*a).transpose().matmul(g).expect("matmul grad"));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Binary(kind, a, b, bc) => {
                let (va, vb) = (val(*a), val(*b));
                let (rows, cols) = va.shape();
                if self.rg(*a) {
                    let ga = Matrix::from_fn(rows, cols, |r, c| {
                        let gv = g[(r, c)];
                        match kind {
                            BinKind::Add | BinKind::Sub => gv,
                            BinKind::Mul => gv * vb.data()[bc.at(r, c, cols)],
                            BinKind::Div => gv / vb.data()[bc.at(r, c, cols)],
                        }
                    });
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = bc.at(r, c, cols);
                            let gv = g[(r, c)];
                            let y = vb.data()[k];
                            let d = match kind {
                                BinKind::Add => gv,
                                BinKind::Sub => -gv,
                                BinKind::Mul => gv * va[(r, c)],
                                BinKind::Div => -gv * va[(r, c)] / (y * y),
                            };
                            gb.data_mut()[k] = gb.data()[k] + d;
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::Affine(a, s) => acc(*a, g.scale(*s)),
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = &node.value;
                let ga = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                    let (xv, yv, gv) = (x[(r, c)], y[(r, c)], g[(r, c)]);
                    match *kind {
                        UnaryKind::Silu => gv * silu_grad(xv),
                        UnaryKind::LeakyRelu(s) => {
                            if xv > T::zero() {
                                gv
                            } else {
                                gv * s
                            }
                        }
                        UnaryKind::Sigmoid => gv * yv * (T::one() - yv),
                        UnaryKind::Ln => gv / xv,
                        UnaryKind::Sqrt => gv / (T::c(2.0) * yv),
                        UnaryKind::Clamp(lo, hi) => {
                            if xv >= lo && xv <= hi {
                                gv
                            } else {
                                T::zero()
                            }
                        }
                    }
                });
                acc(*a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = y.row(r).iter().zip(g.row(r)).map(|(&p, &q)| p * q).sum();
                    for c in 0..y.cols() {
                        ga[(r, c)] = y[(r, c)] * (g[(r, c)] - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::GatherRows(a, rows) => {
                let src = val(*a);
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &x) in ga.row_mut(r).iter_mut().zip(g.row(k)) {
                        *o = *o + x;
                    }
                }
                acc(*a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if self.rg(p) {
                        acc(p, Matrix::from_fn(g.rows(), w, |r, c| g[(r, offset + c)]));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if self.rg(p) {
                        acc(p, Matrix::from_fn(h, g.cols(), |r, c| g[(offset + r, c)]));
                    }
                    offset += h;
                }
            }
            Op::SegmentSum(a, seg) => {
                let cols = g.cols();
                acc(*a, Matrix::from_fn(seg.len(), cols, |r, c| g[(seg[r], c)]));
            }
            Op::SegmentMean(a, seg, sizes) => {
                let cols = g.cols();
                acc(
                    *a,
                    Matrix::from_fn(seg.len(), cols, |r, c| {
                        g[(seg[r], c)] / T::c(sizes[seg[r]] as f64)
                    }),
                );
            }
            Op::SegmentMax(a, arg) => {
                let src = val(*a);
                let cols = g.cols();
                let mut ga = Matrix::zeros(src.rows(), src.cols());
                for (k, &r) in arg.iter().enumerate() {
                    if r != usize::MAX {
                        let c = k % cols;
                        ga[(r, c)] = ga[(r, c)] + g.data()[k];
                    }
                }
                acc(*a, ga);
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = &node.value;
                let cols = y.cols();
                let count = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![T::zero(); count * cols];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..cols {
                        dot[s * cols + c] = dot[s * cols + c] + y[(r, c)] * g[(r, c)];
                    }
                }
                acc(
                    *a,
                    Matrix::from_fn(y.rows(), cols, |r, c| {
                        y[(r, c)] * (g[(r, c)] - dot[seg[r] * cols + c])
                    }),
                );
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::MeanAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item() / T::c((r * c) as f64)));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(&x, &m)| x * m).collect();
                acc(*a, Matrix::from_vec(g.rows(), g.cols(), data).expect("mask shape"));
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Matrix<T> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix<T> {
        assert_eq!(v.tape, self.tape, "variable belongs to a different tape");
        self.grads[v.index].take().unwrap_or_else(|| {
            let (r, c) = self.shapes[v.index];
            Matrix::zeros(r, c)
        })
    }
}
