//! Wengert-list reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied during the forward pass.
//! Recording order is a topological order of the graph, so
//! [`Tape::backward`] walks the list once in reverse, accumulating
//! adjoints into the inputs of each entry. Backward consumes the tape.

use super::tensor::{
    add_kernel, log_softmax_rows_kernel, matmul_kernel, relu, softmax_rows_kernel, Tensor,
};
use crate::error::{Error, Result};

/// Smallest value fed to `log`; softmax outputs below it are clamped.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds the tape can record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrimitiveKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Tanh,
    Exp,
    Log,
    Neg,
    Sum,
    Mean,
    SoftmaxRows,
    LogSoftmaxRows,
    GatherRows,
    GradientReversal,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    GradientReversal(Var, f64),
}

impl Op {
    fn kind(&self) -> PrimitiveKind {
        match self {
            Op::Leaf => PrimitiveKind::Leaf,
            Op::MatMul(..) => PrimitiveKind::MatMul,
            Op::Add(..) => PrimitiveKind::Add,
            Op::Sub(..) => PrimitiveKind::Sub,
            Op::Mul(..) => PrimitiveKind::Mul,
            Op::Scale(..) => PrimitiveKind::Scale,
            Op::Relu(_) => PrimitiveKind::Relu,
            Op::Tanh(_) => PrimitiveKind::Tanh,
            Op::Exp(_) => PrimitiveKind::Exp,
            Op::Log(_) => PrimitiveKind::Log,
            Op::Neg(_) => PrimitiveKind::Neg,
            Op::Sum(_) => PrimitiveKind::Sum,
            Op::Mean(_) => PrimitiveKind::Mean,
            Op::SoftmaxRows(_) => PrimitiveKind::SoftmaxRows,
            Op::LogSoftmaxRows(_) => PrimitiveKind::LogSoftmaxRows,
            Op::GatherRows(..) => PrimitiveKind::GatherRows,
            Op::GradientReversal(..) => PrimitiveKind::GradientReversal,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    /// d(loss)/d(var); zero for tensors the loss does not depend on.
    pub fn get(&self, v: Var) -> &Tensor {
        &self.grads[v.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn kind(&self, v: Var) -> PrimitiveKind {
        self.nodes[v.0].op.kind()
    }

    /// Records an input tensor (parameter, data batch or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() || x.cols() != y.cols() {
            return Err(Error::Shape {
                op,
                lhs: x.shape(),
                rhs: y.shape(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_kernel(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// Elementwise sum; `b` may be a single row broadcast over `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = add_kernel(self.value(a), self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|v| c * v);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(relu);
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    /// Natural log with inputs clamped below at [`LOG_FLOOR`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(LOG_FLOOR).ln());
        self.push(out, Op::Log(a), "log")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| -v);
        self.push(out, Op::Neg(a), "neg")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Shape {
                op: "mean",
                lhs: x.shape(),
                rhs: vec![],
            });
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows_kernel(self.value(a));
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// `logit - logsumexp(row)`, computed without forming the softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = log_softmax_rows_kernel(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a), "log_softmax_rows")
    }

    /// Rows of `a` selected by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).select_rows(idx)?;
        self.push(out, Op::GatherRows(a, idx.to_vec()), "gather_rows")
    }

    /// Identity forward; the backward pass multiplies the incoming
    /// gradient by `-scale`.
    pub fn gradient_reversal(&mut self, a: Var, scale: f64) -> Result<Var> {
        if !(scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "gradient reversal scale must be >= 0, got {scale}"
            )));
        }
        let out = self.value(a).clone();
        self.push(out, Op::GradientReversal(a, scale), "gradient_reversal")
    }

    /// Propagates d(loss)/d(node) to every recorded tensor.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::NotScalar { shape: lv.shape() });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = matmul_kernel(&g, &bv.transpose())?;
                    let db = matmul_kernel(&av.transpose(), &g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    let bv = self.value(*b);
                    let db = if bv.rows() == g.rows() {
                        g.clone()
                    } else {
                        column_sums(&g)
                    };
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    accumulate(&mut grads, *a, zip_map(&g, bv, |d, y| d * y));
                    accumulate(&mut grads, *b, zip_map(&g, av, |d, x| d * x));
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.map(|d| c * d));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, x, |d, x| if x > 0.0 { d } else { 0.0 }),
                    );
                }
                Op::Tanh(a) => {
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, &node.value, |d, y| d * (1.0 - y * y)),
                    );
                }
                Op::Exp(a) => {
                    accumulate(&mut grads, *a, zip_map(&g, &node.value, |d, y| d * y));
                }
                Op::Log(a) => {
                    let x = self.value(*a);
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, x, |d, x| if x > LOG_FLOOR { d / x } else { 0.0 }),
                    );
                }
                Op::Neg(a) => {
                    accumulate(&mut grads, *a, g.map(|d| -d));
                }
                Op::Sum(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::filled(x.rows(), x.cols(), g.item()));
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let d = g.item() / x.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(x.rows(), x.cols(), d));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, yr[c] * (gr[c] - dot));
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LogSoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = g.row_slice(r);
                        let total: f64 = gr.iter().sum();
                        for c in 0..y.cols() {
                            dx.set(r, c, gr[c] - yr[c].exp() * total);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::GatherRows(a, idx) => {
                    let x = self.value(*a);
                    let mut dx = Tensor::zeros(x.rows(), x.cols());
                    for (out_r, &src) in idx.iter().enumerate() {
                        for c in 0..x.cols() {
                            let v = dx.get(src, c) + g.get(out_r, c);
                            dx.set(src, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::GradientReversal(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, g.map(|d| -s * d));
                }
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| f(*x, *y))
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shapes checked at record time")
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let i = t.leaf(Tensor::identity(2));
        let x = t.leaf(Tensor::from_rows(&[vec![2.0], vec![3.0]]).unwrap());
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(2, 3));
        match t.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(1, 3));
        let y = t.softmax_rows(x).unwrap();
        for v in t.value(y).data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn log_inverts_exp() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.5));
        let e = t.exp(x).unwrap();
        let l = t.log(e).unwrap();
        assert!(close(t.value(l).item(), 1.5, 1e-15));
    }

    #[test]
    fn log_clamps_at_floor() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[0.0, 1e-20]));
        let l = t.log(x).unwrap();
        assert_eq!(t.value(l).data(), &[LOG_FLOOR.ln(), LOG_FLOOR.ln()]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[6.0]);
    }

    #[test]
    fn mean_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0, 3.0, 4.0]));
        let loss = t.mean(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[0.25; 4]);
    }

    #[test]
    fn unreachable_tensors_have_zero_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let unused = t.leaf(Tensor::row(&[5.0, 6.0]));
        let loss = t.sum(x).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let y = t.tanh(x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn non_finite_is_reported() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1000.0));
        assert!(matches!(t.exp(x), Err(Error::NonFinite { op: "exp" })));
    }

    #[test]
    fn gradient_reversal_forward_is_identity() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::row(&[1.0, 2.0]));
        let r = t.gradient_reversal(x, 1.0).unwrap();
        assert_eq!(t.value(r).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gradient_reversal_negates_and_scales() {
        for (scale, expect) in [(1.0, -1.0), (0.5, -0.5)] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::row(&[1.0, 2.0]));
            let r = t.gradient_reversal(x, scale).unwrap();
            let loss = t.sum(r).unwrap();
            let g = t.backward(loss).unwrap();
            assert_eq!(g.get(x).data(), &[expect, expect]);
        }
    }

    #[test]
    fn gradient_reversal_rejects_negative_scale() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        assert!(t.gradient_reversal(x, -1.0).is_err());
    }

    #[test]
    fn broadcast_bias_gradient_sums_rows() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(3, 2));
        let b = t.leaf(Tensor::row(&[0.0, 0.0]));
        let y = t.add(x, b).unwrap();
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(b).data(), &[3.0, 3.0]);
    }

    #[test]
    fn gather_rows_scatters_back() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
        let y = t.gather_rows(x, &[1, 1, 0]).unwrap();
        assert_eq!(t.value(y).data(), &[2.0, 2.0, 1.0]);
        let loss = t.sum(y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(x).data(), &[1.0, 2.0]);
    }
}
