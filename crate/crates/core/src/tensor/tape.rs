use super::{gemm_nn, gemm_nt, gemm_tn, sigmoid_scalar, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::sync::Arc;

/// Floor applied to the argument of `log`.
pub const LOG_FLOOR: f64 = 1e-9;
/// Variance epsilon of layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

type UnaryFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBcast(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    Square(usize),
    Sigmoid(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    SoftmaxRows(usize),
    Sum(usize),
    MaskedMean { x: usize, mask: Vec<f64>, count: f64 },
    MeanRows(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    RowDotPairs { h: usize, pairs: Arc<Tensor> },
    PairwiseDist(usize, usize),
    NormRows(usize),
    SegmentMax { x: usize, argmax: Vec<usize> },
    Embedding { table: usize, ids: Vec<usize> },
    BceLogits { z: usize, labels: Vec<f64>, mask: Vec<f64>, count: f64 },
    Custom { x: usize, deriv: UnaryFn },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

/// Records every executed primitive in order; node ids are topologically sorted
/// by construction.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    pub fn param_shared(&self, t: Arc<Tensor>) -> Var<'_> {
        self.push_arc(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_shared(&self, t: Arc<Tensor>) -> Var<'_> {
        self.push_arc(t, Op::Leaf, false)
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&self) {
        self.inner.borrow_mut().grads = None;
    }

    /// Reverse sweep from a scalar loss. Gradients of every node that
    /// depends on a differentiable leaf become available via [`Var::grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if inner.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let root = &inner.nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Err(Error::DetachedLoss);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if node.requires_grad {
                backprop(&inner.nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        inner.grads = Some(grads);
        Ok(())
    }
}

/// Gradient buffer of `id`, created zeroed on first use; `None` when the
/// node does not require a gradient.
fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'g mut [f64]> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

/// `dst[i] += f(i)` over the gradient buffer of `id`.
fn add_each(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl Fn(usize) -> f64) {
    if let Some(d) = slot(grads, nodes, id) {
        for (i, e) in d.iter_mut().enumerate() {
            *e += f(i);
        }
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(da) = slot(grads, nodes, *a) {
                gemm_nt(g, bv.data(), da, m, n, k);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                gemm_tn(av.data(), g, db, m, k, n);
            }
        }
        Op::Transpose(a) => {
            let (m, n) = (out.rows(), out.cols());
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] += g[i * n + j];
                    }
                }
            }
        }
        Op::Add(a, b) => {
            add_each(grads, nodes, *a, |i| g[i]);
            add_each(grads, nodes, *b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            add_each(grads, nodes, *a, |i| g[i]);
            add_each(grads, nodes, *b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            add_each(grads, nodes, *a, |i| g[i] * bv[i]);
            add_each(grads, nodes, *b, |i| g[i] * av[i]);
        }
        Op::AddBcast(a, b) => {
            add_each(grads, nodes, *a, |i| g[i]);
            if let Some(db) = slot(grads, nodes, *b) {
                let bl = db.len();
                for grow in g.chunks_exact(bl) {
                    for (d, gv) in db.iter_mut().zip(grow) {
                        *d += gv;
                    }
                }
            }
        }
        Op::MulBcast(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let bl = bv.len();
            if let Some(da) = slot(grads, nodes, *a) {
                for (drow, grow) in da.chunks_exact_mut(bl).zip(g.chunks_exact(bl)) {
                    for ((d, gv), b) in drow.iter_mut().zip(grow).zip(bv) {
                        *d += gv * b;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (grow, arow) in g.chunks_exact(bl).zip(av.chunks_exact(bl)) {
                    for ((d, gv), x) in db.iter_mut().zip(grow).zip(arow) {
                        *d += gv * x;
                    }
                }
            }
        }
        Op::Scale(a, s) => add_each(grads, nodes, *a, |i| g[i] * s),
        Op::AddConst(a) => add_each(grads, nodes, *a, |i| g[i]),
        Op::Square(a) => {
            let av = val(*a).data();
            add_each(grads, nodes, *a, |i| 2.0 * g[i] * av[i]);
        }
        Op::Sigmoid(a) => {
            let y = out.data();
            add_each(grads, nodes, *a, |i| g[i] * y[i] * (1.0 - y[i]));
        }
        Op::Relu(a) => {
            let av = val(*a).data();
            add_each(grads, nodes, *a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Exp(a) => {
            let y = out.data();
            add_each(grads, nodes, *a, |i| g[i] * y[i]);
        }
        Op::Log(a) => {
            let av = val(*a).data();
            add_each(grads, nodes, *a, |i| if av[i] > LOG_FLOOR { g[i] / av[i] } else { 0.0 });
        }
        Op::SoftmaxRows(a) => {
            let n = out.cols();
            if let Some(d) = slot(grads, nodes, *a) {
                for ((drow, grow), yrow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(out.data().chunks_exact(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..n {
                        drow[j] += yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::Sum(a) => add_each(grads, nodes, *a, |_| g[0]),
        Op::MaskedMean { x, mask, count } => add_each(grads, nodes, *x, |i| g[0] * mask[i] / count),
        Op::MeanRows(a) => {
            let m = val(*a).rows() as f64;
            let n = out.cols();
            add_each(grads, nodes, *a, |i| g[i % n] / m);
        }
        Op::LayerNorm { x, rstd } => {
            let n = out.cols();
            if let Some(d) = slot(grads, nodes, *x) {
                for (r, ((drow, grow), yrow)) in d
                    .chunks_exact_mut(n)
                    .zip(g.chunks_exact(n))
                    .zip(out.data().chunks_exact(n))
                    .enumerate()
                {
                    let mg: f64 = grow.iter().sum::<f64>() / n as f64;
                    let mgy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        drow[j] += rstd[r] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut off = 0;
            for &p in parts {
                let c = val(p).cols();
                if let Some(d) = slot(grads, nodes, p) {
                    for (drow, grow) in d.chunks_exact_mut(c).zip(g.chunks_exact(total)) {
                        for (e, v) in drow.iter_mut().zip(&grow[off..off + c]) {
                            *e += v;
                        }
                    }
                }
                off += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let l = val(p).len();
                add_each(grads, nodes, p, |i| g[off + i]);
                off += l;
            }
        }
        Op::RowDotPairs { h, pairs } => {
            let hv = val(*h);
            let (n, k) = (hv.rows(), hv.cols());
            let p = pairs.data();
            if let Some(d) = slot(grads, nodes, *h) {
                for i in 0..n {
                    let drow = &mut d[i * k..(i + 1) * k];
                    for j in 0..n {
                        let gv = g[i * n + j];
                        let base = (i * n + j) * k;
                        for (e, pv) in drow.iter_mut().zip(&p[base..base + k]) {
                            *e += gv * pv;
                        }
                    }
                }
            }
        }
        Op::PairwiseDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, m, k) = (av.rows(), bv.rows(), av.cols());
            let mut da = vec![0.0; n * k];
            let mut db = vec![0.0; m * k];
            for i in 0..n {
                for j in 0..m {
                    let dist = out.data()[i * m + j];
                    if dist == 0.0 {
                        continue;
                    }
                    let s = g[i * m + j] / dist;
                    for c in 0..k {
                        let diff = av.data()[i * k + c] - bv.data()[j * k + c];
                        da[i * k + c] += s * diff;
                        db[j * k + c] -= s * diff;
                    }
                }
            }
            add_each(grads, nodes, *a, |i| da[i]);
            add_each(grads, nodes, *b, |i| db[i]);
        }
        Op::NormRows(a) => {
            let av = val(*a).data();
            let k = val(*a).cols();
            let norms = out.data();
            add_each(grads, nodes, *a, |i| {
                let nrm = norms[i / k];
                if nrm == 0.0 {
                    0.0
                } else {
                    g[i / k] * av[i] / nrm
                }
            });
        }
        Op::SegmentMax { x, argmax } => {
            if let Some(d) = slot(grads, nodes, *x) {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }
        }
        Op::Embedding { table, ids } => {
            let dm = val(*table).cols();
            if let Some(d) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..dm {
                        d[id * dm + c] += g[r * dm + c];
                    }
                }
            }
        }
        Op::BceLogits { z, labels, mask, count } => {
            let zv = val(*z).data();
            add_each(grads, nodes, *z, |i| g[0] * mask[i] * (sigmoid_scalar(zv[i]) - labels[i]) / count);
        }
        Op::Custom { x, deriv } => {
            let xv = val(*x).data();
            add_each(grads, nodes, *x, |i| g[i] * deriv(xv[i]));
        }
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&v| f(v)).collect(),
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// Gradient after [`Tape::backward`]; `None` if the node is not on the
    /// loss's dependency path.
    pub fn grad(&self) -> Option<Tensor> {
        let inner = self.tape.inner.borrow();
        let grads = inner.grads.as_ref()?;
        let g = grads.get(self.id)?.as_ref()?;
        let shape = inner.nodes[self.id].value.shape().to_vec();
        Some(Tensor {
            shape,
            data: g.clone(),
        })
    }

    /// Borrows the gradient buffer without copying it.
    pub(crate) fn with_grad<R>(&self, f: impl FnOnce(&[f64]) -> R) -> Option<R> {
        let inner = self.tape.inner.borrow();
        let g = inner.grads.as_ref()?.get(self.id)?.as_ref()?;
        Some(f(g))
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        gemm_nn(a.data(), b.data(), &mut out, m, k, n);
        let v = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = a.data()[i * n + j];
            }
        }
        let v = Tensor {
            shape: vec![n, m],
            data: out,
        };
        self.unary(v, Op::Transpose(self.id))
    }

    fn same_shape(self, other: Var<'t>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "add")?;
        Ok(self.binary(other, zip(&a, &b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "sub")?;
        Ok(self.binary(other, zip(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.same_shape(other, "mul")?;
        Ok(self.binary(other, zip(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    fn bcast_check(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
        let ok = b.len() == 1 || (b.rows() == 1 && b.cols() == a.cols() && a.shape().len() == 2);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(op, a.shape(), b.shape()))
        }
    }

    /// Adds a scalar (1 x 1) or a row vector (1 x n) to every row.
    pub fn add_bcast(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        Self::bcast_check(&a, &b, "add_bcast")?;
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks_exact(b.len()) {
            data.extend(row.iter().zip(b.data()).map(|(x, y)| x + y));
        }
        let v = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        Ok(self.binary(other, v, Op::AddBcast(self.id, other.id)))
    }

    pub fn mul_bcast(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        Self::bcast_check(&a, &b, "mul_bcast")?;
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks_exact(b.len()) {
            data.extend(row.iter().zip(b.data()).map(|(x, y)| x * y));
        }
        let v = Tensor {
            shape: a.shape().to_vec(),
            data,
        };
        Ok(self.binary(other, v, Op::MulBcast(self.id, other.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = map(&self.value(), |x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = map(&self.value(), |x| x + c);
        self.unary(v, Op::AddConst(self.id))
    }

    pub fn square(self) -> Var<'t> {
        let v = map(&self.value(), |x| x * x);
        self.unary(v, Op::Square(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = map(&self.value(), sigmoid_scalar);
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        let v = map(&self.value(), |x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let v = map(&self.value(), f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural log of `max(x, 1e-9)`; zero gradient below the floor.
    pub fn log(self) -> Var<'t> {
        let v = map(&self.value(), |x| x.max(LOG_FLOOR).ln());
        self.unary(v, Op::Log(self.id))
    }

    /// Row-wise softmax with max subtraction. `-inf` entries act as masks.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        let n = a.cols();
        let mut out = vec![0.0; a.len()];
        for (r, row) in a.data().chunks(n).enumerate() {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::DegenerateRow { row: r });
            }
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                out[r * n + j] = e;
                s += e;
            }
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= s;
            }
        }
        let v = Tensor {
            shape: a.shape().to_vec(),
            data: out,
        };
        Ok(self.unary(v, Op::SoftmaxRows(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let s: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len();
        let mask = vec![1.0; n];
        self.masked_mean(&mask).expect("mean of a non-empty tensor")
    }

    /// Mean over entries whose mask value is nonzero (mask entries act as weights).
    pub fn masked_mean(self, mask: &[f64]) -> Result<Var<'t>> {
        let a = self.value();
        if mask.len() != a.len() {
            return Err(Error::shape("masked_mean", a.shape(), &[mask.len()]));
        }
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::EmptyReduction);
        }
        let s: f64 = a.data().iter().zip(mask).map(|(x, m)| x * m).sum();
        let op = Op::MaskedMean {
            x: self.id,
            mask: mask.to_vec(),
            count,
        };
        Ok(self.unary(Tensor::scalar(s / count), op))
    }

    /// Column means, producing a 1 x n row.
    pub fn mean_rows(self) -> Var<'t> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        let mut out = vec![0.0; n];
        for row in a.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.unary(Tensor::row(out), Op::MeanRows(self.id))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(self) -> Var<'t> {
        let a = self.value();
        let n = a.cols();
        let mut out = vec![0.0; a.len()];
        let mut rstd = Vec::with_capacity(a.rows());
        for (r, row) in a.data().chunks(n).enumerate() {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, x) in row.iter().enumerate() {
                out[r * n + j] = (x - mu) * rs;
            }
            rstd.push(rs);
        }
        let v = Tensor {
            shape: a.shape().to_vec(),
            data: out,
        };
        self.unary(v, Op::LayerNorm { x: self.id, rstd })
    }

    /// `out[i][j] = sum_k self[i][k] * pairs[i][j][k]` for a constant
    /// `pairs` of shape n x n x k.
    pub fn row_dot_pairs(self, pairs: Arc<Tensor>) -> Result<Var<'t>> {
        let h = self.value();
        let (n, k) = (h.rows(), h.cols());
        if pairs.shape() != [n, n, k] {
            return Err(Error::shape("row_dot_pairs", h.shape(), pairs.shape()));
        }
        let p = pairs.data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let hrow = &h.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let prow = &p[(i * n + j) * k..(i * n + j + 1) * k];
                out[i * n + j] = hrow.iter().zip(prow).map(|(a, b)| a * b).sum();
            }
        }
        let v = Tensor {
            shape: vec![n, n],
            data: out,
        };
        Ok(self.unary(v, Op::RowDotPairs { h: self.id, pairs }))
    }

    /// Euclidean distances between every row of `self` and every row of `other`.
    pub fn pairwise_dist(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.cols() != b.cols() {
            return Err(Error::shape("pairwise_dist", a.shape(), b.shape()));
        }
        let (n, m, k) = (a.rows(), b.rows(), a.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let s: f64 = (0..k)
                    .map(|c| {
                        let d = a.data()[i * k + c] - b.data()[j * k + c];
                        d * d
                    })
                    .sum();
                out[i * m + j] = s.sqrt();
            }
        }
        let v = Tensor {
            shape: vec![n, m],
            data: out,
        };
        Ok(self.binary(other, v, Op::PairwiseDist(self.id, other.id)))
    }

    /// L2 norm of each row, as an n x 1 column.
    pub fn norm_rows(self) -> Var<'t> {
        let a = self.value();
        let k = a.cols();
        let out: Vec<f64> = a
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let v = Tensor {
            shape: vec![out.len(), 1],
            data: out,
        };
        self.unary(v, Op::NormRows(self.id))
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn segment_max(self, group: usize) -> Result<Var<'t>> {
        let a = self.value();
        let (m, n) = (a.rows(), a.cols());
        if group == 0 {
            return Err(Error::EmptyPointSet);
        }
        if m % group != 0 {
            return Err(Error::shape("segment_max", a.shape(), &[group]));
        }
        let segs = m / group;
        let mut out = vec![f64::NEG_INFINITY; segs * n];
        let mut argmax = vec![0usize; segs * n];
        for s in 0..segs {
            for r in s * group..(s + 1) * group {
                for c in 0..n {
                    let x = a.data()[r * n + c];
                    if x > out[s * n + c] {
                        out[s * n + c] = x;
                        argmax[s * n + c] = r * n + c;
                    }
                }
            }
        }
        let v = Tensor {
            shape: vec![segs, n],
            data: out,
        };
        Ok(self.unary(v, Op::SegmentMax { x: self.id, argmax }))
    }

    /// Gathers rows of a table (self) by id.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'t>> {
        let t = self.value();
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownToken { id, size: v });
            }
            out.extend_from_slice(t.row_slice(id));
        }
        let val = Tensor {
            shape: vec![ids.len(), d],
            data: out,
        };
        Ok(self.unary(
            val,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Masked mean of the logit-form binary cross-entropy
    /// `max(z,0) - z*y + ln(1 + e^{-|z|})`.
    pub fn bce_with_logits(self, labels: &[f64], mask: &[f64]) -> Result<Var<'t>> {
        let z = self.value();
        if labels.len() != z.len() || mask.len() != z.len() {
            return Err(Error::shape("bce_with_logits", z.shape(), &[labels.len(), mask.len()]));
        }
        let count: f64 = mask.iter().sum();
        if count <= 0.0 {
            return Err(Error::EmptyReduction);
        }
        let s: f64 = z
            .data()
            .iter()
            .zip(labels)
            .zip(mask)
            .map(|((&z, &y), &m)| m * (z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()))
            .sum();
        let op = Op::BceLogits {
            z: self.id,
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.unary(Tensor::scalar(s / count), op))
    }

    /// Elementwise op with a caller-supplied derivative.
    pub fn custom_unary(
        self,
        f: impl Fn(f64) -> f64,
        deriv: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Var<'t> {
        let v = map(&self.value(), f);
        self.unary(
            v,
            Op::Custom {
                x: self.id,
                deriv: Arc::new(deriv),
            },
        )
    }
}

impl Tape {
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let m = vals.first().map_or(0, |v| v.rows());
        if vals.iter().any(|v| v.rows() != m) {
            return Err(Error::shape("concat_cols", &[m], &vals.iter().map(|v| v.rows()).collect::<Vec<_>>()));
        }
        let total: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for v in &vals {
                out.extend_from_slice(v.row_slice(i));
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let v = Tensor {
            shape: vec![m, total],
            data: out,
        };
        Ok(self.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let n = vals.first().map_or(0, |v| v.cols());
        if vals.iter().any(|v| v.cols() != n) {
            return Err(Error::shape("concat_rows", &[n], &vals.iter().map(|v| v.cols()).collect::<Vec<_>>()));
        }
        let m: usize = vals.iter().map(|v| v.rows()).sum();
        let mut out = Vec::with_capacity(m * n);
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let v = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }
}
