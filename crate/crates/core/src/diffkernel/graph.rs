//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation in creation order. Because a node's
//! inputs always precede it, the reverse sweep is a plain backwards walk over
//! the node list, which also fixes the gradient accumulation order.

use std::collections::HashMap;
use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul, Real, Tensor};
use super::KernelError;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise scalar functions with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Recip,
    /// `sin(sqrt(s)) / sqrt(s)` as a smooth function of `s = theta^2`.
    SincOfSq,
    /// `(1 - cos(sqrt(s))) / s` as a smooth function of `s = theta^2`.
    CosTermOfSq,
}

/// Extension point for fused operations defined outside the kernel.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, KernelError>;
    /// Returns one gradient per input (`None` when the input is not differentiable).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

/// Sparse row-compressed linear map used for pooling and finite differences.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    pub offsets: Vec<usize>,
    pub entries: Vec<(usize, T)>,
    pub out_shape: Vec<usize>,
}

impl<T: Real> SparseMap<T> {
    pub fn from_rows(rows: Vec<Vec<(usize, T)>>, out_shape: Vec<usize>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        for r in rows {
            entries.extend(r);
            offsets.push(entries.len());
        }
        Self {
            offsets,
            entries,
            out_shape,
        }
    }
}

enum Op<T: Real> {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Unary(Var, Unary),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    BroadcastRows(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    MinCols(Var, Vec<usize>),
    Gather(Var, Arc<Vec<usize>>),
    Sparse(Var, Arc<SparseMap<T>>),
    SegmentSum(Var, Arc<Vec<usize>>),
    Softmax(Var),
    Custom(Vec<Var>, Arc<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Per-group gradients (concatenated flat values in parameter order).
    pub fn by_group(&self, store: &ParamStore) -> HashMap<String, Vec<T>> {
        let mut out: HashMap<String, Vec<T>> = HashMap::new();
        for group in store.groups() {
            out.insert(group.to_string(), Vec::new());
        }
        for id in store.ids() {
            let group = store.group_of(id).to_string();
            let entry = out.entry(group).or_default();
            match self.get(id) {
                Some(g) => entry.extend_from_slice(g.data()),
                None => entry.extend(std::iter::repeat_n(T::zero(), store.tensor(id).len())),
            }
        }
        out
    }
}

/// The tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    overrides: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> KernelError {
    KernelError::ShapeMismatch {
        op: op.to_string(),
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn check_finite<T: Real>(op: &str, t: &Tensor<T>) -> Result<(), KernelError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(KernelError::NonFinite { op: op.to_string() })
    }
}

fn softplus<T: Real>(x: T) -> T {
    let twenty = T::from_f64_lossy(20.0);
    if x > twenty {
        x
    } else if x < -twenty {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Series-safe `sin(t)/t` and its derivative with respect to `s = t^2`.
fn sinc_of_sq<T: Real>(s: T) -> (T, T) {
    let sf = s.to_f64_lossy();
    if sf < 1e-4 {
        // sin t / t = 1 - s/6 + s^2/120 - s^3/5040
        let v = 1.0 - sf / 6.0 + sf * sf / 120.0 - sf * sf * sf / 5040.0;
        let d = -1.0 / 6.0 + sf / 60.0 - sf * sf / 1680.0;
        (T::from_f64_lossy(v), T::from_f64_lossy(d))
    } else {
        let t = sf.sqrt();
        let v = t.sin() / t;
        // d/ds = (t cos t - sin t) / (2 t^3)
        let d = (t * t.cos() - t.sin()) / (2.0 * t * t * t);
        (T::from_f64_lossy(v), T::from_f64_lossy(d))
    }
}

/// Series-safe `(1 - cos t)/t^2` and its derivative with respect to `s = t^2`.
fn cos_term_of_sq<T: Real>(s: T) -> (T, T) {
    let sf = s.to_f64_lossy();
    if sf < 1e-4 {
        // 1/2 - s/24 + s^2/720 - s^3/40320
        let v = 0.5 - sf / 24.0 + sf * sf / 720.0 - sf * sf * sf / 40320.0;
        let d = -1.0 / 24.0 + sf / 360.0 - sf * sf / 13440.0;
        (T::from_f64_lossy(v), T::from_f64_lossy(d))
    } else {
        let t = sf.sqrt();
        let v = (1.0 - t.cos()) / sf;
        // d/ds = (t sin t - 2 (1 - cos t)) / (2 s^2)
        let d = (t * t.sin() - 2.0 * (1.0 - t.cos())) / (2.0 * sf * sf);
        (T::from_f64_lossy(v), T::from_f64_lossy(d))
    }
}

impl Unary {
    fn forward<T: Real>(self, x: T) -> T {
        match self {
            Unary::Neg => -x,
            Unary::Relu => x.max(T::zero()),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Recip => T::one() / x,
            Unary::SincOfSq => sinc_of_sq(x).0,
            Unary::CosTermOfSq => cos_term_of_sq(x).0,
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Neg => -one,
            Unary::Relu => {
                if x > T::zero() {
                    one
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Softplus => sigmoid(x),
            Unary::Tanh => one - y * y,
            Unary::Exp => y,
            Unary::Log => one / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => T::from_f64_lossy(0.5) / y,
            Unary::Square => x + x,
            Unary::Recip => -y * y,
            Unary::SincOfSq => sinc_of_sq(x).1,
            Unary::CosTermOfSq => cos_term_of_sq(x).1,
        }
    }

    fn may_overflow(self) -> bool {
        matches!(
            self,
            Unary::Exp | Unary::Log | Unary::Sqrt | Unary::Recip | Unary::Square
        )
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            overrides: HashMap::new(),
        }
    }

    /// Substitutes a parameter's value when it is bound on this tape. Used by
    /// the float64 shadow pass so perturbations are not rounded to f32.
    pub fn override_param(&mut self, id: ParamId, value: Tensor<T>) {
        self.overrides.insert(id, value);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (never differentiated). Rejects non-finite data.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, KernelError> {
        check_finite("constant", &t)?;
        Ok(self.push(t, Op::Leaf, false))
    }

    /// Differentiable leaf that is not a stored parameter (used by tests and
    /// gradient checks on inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var, KernelError> {
        check_finite("input", &t)?;
        Ok(self.push(t, Op::Leaf, true))
    }

    pub fn scalar(&mut self, v: T) -> Var {
        self.push(Tensor::scalar(v), Op::Leaf, false)
    }

    /// Binds a stored parameter. Frozen parameters enter the tape as constants,
    /// so nothing downstream accumulates gradient for them.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = store.is_trainable(id);
        let value = match self.overrides.get(&id) {
            Some(v) => v.clone(),
            None => store.tensor(id).cast::<T>(),
        };
        let v = self.push(value, Op::Param, trainable);
        self.bound.insert(id, v);
        v
    }

    fn binary_same(&self, op: &str, a: Var, b: Var) -> Result<(), KernelError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if self.value(a).len() != self.value(b).len() || self.value(a).cols() != self.value(b).cols() {
            return Err(shape_err(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor::from_raw(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        self.binary_same("div", a, b)?;
        let v = self.zip(a, b, |x, y| x / y);
        check_finite("div", &v)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    /// `a[n,m] + row[1,m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, KernelError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va.shape(), vr.shape()));
        }
        let m = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vr.data()[i % m])
            .collect();
        let v = Tensor::from_raw(vec![va.rows(), m], data);
        let rg = self.rg(&[a, row]);
        Ok(self.push(v, Op::AddRow(a, row), rg))
    }

    /// `a[n,m] * col[n,1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var, KernelError> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(shape_err("mul_col", va.shape(), vc.shape()));
        }
        let m = va.cols();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vc.data()[i / m.max(1)])
            .collect();
        let v = Tensor::from_raw(vec![va.rows(), m], data);
        let rg = self.rg(&[a, col]);
        Ok(self.push(v, Op::MulCol(a, col), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, KernelError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let v = matmul(va, false, vb, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let v = Tensor::from_raw(vec![c, r], data);
        let rg = self.rg(&[a]);
        self.push(v, Op::Transpose(a), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Result<Var, KernelError> {
        let v = self.value(a).map(|x| f.forward(x));
        if f.may_overflow() {
            check_finite(&format!("{f:?}"), &v)?;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Unary(a, f), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus).expect("softplus is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh).expect("tanh is total")
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sin).expect("sin is total")
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Cos).expect("cos is total")
    }

    pub fn square(&mut self, a: Var) -> Result<Var, KernelError> {
        self.unary(a, Unary::Square)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, KernelError> {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, KernelError> {
        self.unary(a, Unary::Exp)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.rg(&[a]);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), vp.shape()));
            }
            total += vp.cols();
        }
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            let c = vp.cols();
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(vp.row(r));
            }
            off += c;
        }
        let v = Tensor::from_raw(vec![rows, total], data);
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, KernelError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            if vp.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), vp.shape()));
            }
            data.extend_from_slice(vp.data());
            rows += vp.rows();
        }
        let v = Tensor::from_raw(vec![rows, cols], data);
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(shape_err("slice_cols", va.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(va.rows() * w);
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row(r)[start..end]);
        }
        let v = Tensor::from_raw(vec![va.rows(), w], data);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, KernelError> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(shape_err("slice_rows", va.shape(), &[start, end]));
        }
        let c = va.cols();
        let v = Tensor::from_raw(vec![end - start, c], va.data()[start * c..end * c].to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SliceRows(a, start), rg))
    }

    /// Repeats a `[1,m]` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var, KernelError> {
        let va = self.value(a);
        if va.rows() != 1 {
            return Err(shape_err("broadcast_rows", va.shape(), &[1, va.cols()]));
        }
        let mut data = Vec::with_capacity(n * va.cols());
        for _ in 0..n {
            data.extend_from_slice(va.data());
        }
        let v = Tensor::from_raw(vec![n, va.cols()], data);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::BroadcastRows(a), rg))
    }

    /// Sum of every element, as a `[1,1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Per-row sums, `[n,m] -> [n,1]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().copied().sum()).collect();
        let v = Tensor::from_raw(vec![va.rows(), 1], data);
        let rg = self.rg(&[a]);
        self.push(v, Op::RowSums(a), rg)
    }

    /// Per-column sums, `[n,m] -> [1,m]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.cols();
        let mut data = vec![T::zero(); m];
        for r in 0..va.rows() {
            for (d, &x) in data.iter_mut().zip(va.row(r)) {
                *d = *d + x;
            }
        }
        let v = Tensor::from_raw(vec![1, m], data);
        let rg = self.rg(&[a]);
        self.push(v, Op::ColSums(a), rg)
    }

    /// Per-row minimum, `[n,m] -> [n,1]`; the gradient flows to the argmin.
    pub fn min_cols(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut arg = Vec::with_capacity(va.rows());
        let mut data = Vec::with_capacity(va.rows());
        for r in 0..va.rows() {
            let row = va.row(r);
            let (i, &m) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |best, cur| if cur.1 < best.1 { cur } else { best });
            arg.push(i);
            data.push(m);
        }
        let v = Tensor::from_raw(vec![va.rows(), 1], data);
        let rg = self.rg(&[a]);
        self.push(v, Op::MinCols(a, arg), rg)
    }

    /// `out.flat[i] = a.flat[index[i]]`.
    pub fn gather(
        &mut self,
        a: Var,
        index: Arc<Vec<usize>>,
        shape: Vec<usize>,
    ) -> Result<Var, KernelError> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= va.len()) {
            return Err(shape_err("gather", va.shape(), &shape));
        }
        let data = index.iter().map(|&i| va.data()[i]).collect();
        let v = Tensor::from_raw(shape, data);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Gather(a, index), rg))
    }

    /// `out.flat[i] = sum_j w_ij a.flat[j]`.
    pub fn sparse_map(&mut self, a: Var, map: Arc<SparseMap<T>>) -> Result<Var, KernelError> {
        let va = self.value(a);
        let n_out: usize = map.out_shape.iter().product();
        if map.offsets.len() != n_out + 1 || map.entries.iter().any(|&(j, _)| j >= va.len()) {
            return Err(shape_err("sparse_map", va.shape(), &map.out_shape));
        }
        let data = (0..n_out)
            .map(|i| {
                map.entries[map.offsets[i]..map.offsets[i + 1]]
                    .iter()
                    .fold(T::zero(), |acc, &(j, w)| acc + w * va.data()[j])
            })
            .collect();
        let v = Tensor::from_raw(map.out_shape.clone(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Sparse(a, map), rg))
    }

    /// Sums consecutive row segments: rows `offsets[r]..offsets[r+1]` of `a`
    /// become row `r` of the output.
    pub fn segment_sum(&mut self, a: Var, offsets: Arc<Vec<usize>>) -> Result<Var, KernelError> {
        let va = self.value(a);
        let c = va.cols();
        let n_seg = offsets.len().saturating_sub(1);
        if offsets.last().copied().unwrap_or(0) != va.rows()
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(shape_err("segment_sum", va.shape(), &[n_seg, c]));
        }
        let mut data = vec![T::zero(); n_seg * c];
        for s in 0..n_seg {
            let out = &mut data[s * c..(s + 1) * c];
            for r in offsets[s]..offsets[s + 1] {
                for (o, &x) in out.iter_mut().zip(va.row(r)) {
                    *o = *o + x;
                }
            }
        }
        let v = Tensor::from_raw(vec![n_seg, c], data);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::SegmentSum(a, offsets), rg))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = Vec::with_capacity(va.len());
        for r in 0..va.rows() {
            let row = va.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            let mut s = T::zero();
            for &x in row {
                let e = (x - m).exp();
                s = s + e;
                data.push(e);
            }
            for d in &mut data[start..start + c] {
                *d = *d / s;
            }
        }
        let v = Tensor::from_raw(vec![va.rows(), c], data);
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        op: Arc<dyn CustomOp<T>>,
    ) -> Result<Var, KernelError> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&vals)?;
        check_finite(op.name(), &out)?;
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Custom(inputs.to_vec(), op), rg))
    }

    /// Reverse sweep from a scalar loss. Parameters bound on this tape that
    /// require grad but were not reached report zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, KernelError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(KernelError::NonScalarSeed {
                shape: lv.shape().to_vec(),
            });
        }
        if !lv.is_finite() {
            return Err(KernelError::NonFinite {
                op: "backward seed".into(),
            });
        }
        let grads = self.backward_from(loss, Tensor::full(lv.shape(), T::one()));
        let mut out = Vec::new();
        let mut params: Vec<(ParamId, Var)> = self.bound.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        for (id, v) in params {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.push((id, g));
        }
        Ok(Gradients { grads: out })
    }

    /// Gradient of a scalar loss with respect to an arbitrary node.
    pub fn grad_wrt(&self, loss: Var, wrt: Var) -> Result<Tensor<T>, KernelError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(KernelError::NonScalarSeed {
                shape: lv.shape().to_vec(),
            });
        }
        let grads = self.backward_from(loss, Tensor::full(lv.shape(), T::one()));
        Ok(grads[wrt.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }

    fn backward_from(&self, root: Var, seed: Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.local_backward(i, &g);
            grads[i] = Some(g);
            for (var, cg) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&cg),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        grads
    }

    fn local_backward(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    res.push((*a, zip_t(g, val(*b), |x, y| x * y)));
                }
                if need(*b) {
                    res.push((*b, zip_t(g, val(*a), |x, y| x * y)));
                }
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                if need(*a) {
                    res.push((*a, zip_t(g, vb, |x, y| x / y)));
                }
                if need(*b) {
                    let gb = Tensor::from_raw(
                        vb.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(out.data())
                            .zip(vb.data())
                            .map(|((&gg, &o), &y)| -gg * o / y)
                            .collect(),
                    );
                    res.push((*b, gb));
                }
            }
            Op::AddRow(a, r) => {
                res.push((*a, g.clone()));
                if need(*r) {
                    res.push((*r, col_sums_t(g)));
                }
            }
            Op::MulCol(a, c) => {
                let vc = val(*c);
                let m = g.cols().max(1);
                if need(*a) {
                    let ga = Tensor::from_raw(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(k, &x)| x * vc.data()[k / m])
                            .collect(),
                    );
                    res.push((*a, ga));
                }
                if need(*c) {
                    let va = val(*a);
                    let data = (0..g.rows())
                        .map(|r| {
                            g.row(r)
                                .iter()
                                .zip(va.row(r))
                                .fold(T::zero(), |s, (&x, &y)| s + x * y)
                        })
                        .collect();
                    res.push((*c, Tensor::from_raw(vec![g.rows(), 1], data)));
                }
            }
            Op::MatMul(a, b) => {
                if need(*a) {
                    res.push((*a, matmul(g, false, val(*b), true)));
                }
                if need(*b) {
                    res.push((*b, matmul(val(*a), true, g, false)));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut data = vec![T::zero(); r * c];
                for p in 0..r {
                    for q in 0..c {
                        data[q * r + p] = g.data()[p * c + q];
                    }
                }
                res.push((*a, Tensor::from_raw(vec![c, r], data)));
            }
            Op::Unary(a, f) => {
                let va = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .zip(out.data())
                    .map(|((&gg, &x), &y)| gg * f.derivative(x, y))
                    .collect();
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::Scale(a, s) => res.push((*a, g.map(|x| x * *s))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(&gg, &x)| if x < *lo || x > *hi { T::zero() } else { gg })
                    .collect();
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    if need(p) {
                        let mut data = Vec::with_capacity(g.rows() * c);
                        for r in 0..g.rows() {
                            data.extend_from_slice(&g.data()[r * total + off..r * total + off + c]);
                        }
                        res.push((p, Tensor::from_raw(val(p).shape().to_vec(), data)));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let n = val(p).rows();
                    if need(p) {
                        res.push((
                            p,
                            Tensor::from_raw(
                                val(p).shape().to_vec(),
                                g.data()[off * c..(off + n) * c].to_vec(),
                            ),
                        ));
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let va = val(*a);
                let (c, w) = (va.cols(), g.cols());
                let mut data = vec![T::zero(); va.len()];
                for r in 0..g.rows() {
                    data[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::SliceRows(a, start) => {
                let va = val(*a);
                let c = va.cols();
                let mut data = vec![T::zero(); va.len()];
                data[start * c..start * c + g.len()].copy_from_slice(g.data());
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::BroadcastRows(a) => res.push((*a, col_sums_t(g))),
            Op::SumAll(a) => {
                let va = val(*a);
                res.push((*a, Tensor::full(va.shape(), g.item())));
            }
            Op::RowSums(a) => {
                let va = val(*a);
                let m = va.cols().max(1);
                let data = (0..va.len()).map(|k| g.data()[k / m]).collect();
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::ColSums(a) => {
                let va = val(*a);
                let m = va.cols().max(1);
                let data = (0..va.len()).map(|k| g.data()[k % m]).collect();
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::MinCols(a, arg) => {
                let va = val(*a);
                let m = va.cols();
                let mut data = vec![T::zero(); va.len()];
                for (r, &j) in arg.iter().enumerate() {
                    data[r * m + j] = g.data()[r];
                }
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::Gather(a, index) => {
                let va = val(*a);
                let mut data = vec![T::zero(); va.len()];
                for (k, &j) in index.iter().enumerate() {
                    data[j] = data[j] + g.data()[k];
                }
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::Sparse(a, map) => {
                let va = val(*a);
                let mut data = vec![T::zero(); va.len()];
                for o in 0..map.offsets.len() - 1 {
                    let go = g.data()[o];
                    for &(j, w) in &map.entries[map.offsets[o]..map.offsets[o + 1]] {
                        data[j] = data[j] + w * go;
                    }
                }
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::SegmentSum(a, offsets) => {
                let va = val(*a);
                let c = va.cols();
                let mut data = vec![T::zero(); va.len()];
                for s in 0..offsets.len() - 1 {
                    for r in offsets[s]..offsets[s + 1] {
                        data[r * c..(r + 1) * c].copy_from_slice(g.row(s));
                    }
                }
                res.push((*a, Tensor::from_raw(va.shape().to_vec(), data)));
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut data = Vec::with_capacity(out.len());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row(r), g.row(r));
                    let dot = y.iter().zip(gy).fold(T::zero(), |s, (&p, &q)| s + p * q);
                    data.extend(y.iter().zip(gy).map(|(&p, &q)| p * (q - dot)));
                }
                res.push((*a, Tensor::from_raw(vec![out.rows(), c], data)));
            }
            Op::Custom(inputs, op) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                for (v, gi) in inputs.iter().zip(op.backward(&vals, out, g)) {
                    if let Some(gi) = gi {
                        res.push((*v, gi));
                    }
                }
            }
        }
        res
    }
}

fn zip_t<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_raw(
        b.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn col_sums_t<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let m = g.cols();
    let mut data = vec![T::zero(); m];
    for r in 0..g.rows() {
        for (d, &x) in data.iter_mut().zip(g.row(r)) {
            *d = *d + x;
        }
    }
    Tensor::from_raw(vec![1, m], data)
}
