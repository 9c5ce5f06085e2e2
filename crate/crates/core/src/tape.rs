//! Reverse-mode differentiation over [`DenseMatrix`] values.
//!
//! Operations are appended to a [`GradTape`] in evaluation order, so the tape
//! is already topologically sorted; [`GradTape::backward`] walks it once in
//! reverse. A [`GradTape::stop_gradient`] node forwards its input value but
//! propagates nothing, which is how the anchor branch is held constant.

use crate::attention;
use crate::error::{AsmilError, Result};
use crate::tensor::{DenseMatrix, Elementwise};

/// Handle to a value recorded on a tape.
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    Unary(Elementwise, Var),
    ClampMin(Var, f64),
    SoftmaxRows(Var, f64),
    NormalizeRows(Var),
    EntmaxRows(Var, f64),
    Sum(Var),
    Mean(Var),
    SelectRows(Var, Vec<usize>),
    VStack(Var, Var),
    StopGradient,
    CrossEntropy(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: DenseMatrix,
    op: Op,
}

/// Ordered record of primitive operations.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Result of a backward pass: one gradient slot per tape node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when `var` did not
    /// contribute (including anything behind a stop-gradient).
    pub fn wrt(&self, var: Var) -> DenseMatrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                DenseMatrix::zeros(r, c)
            }
        }
    }

    /// True when no gradient reached `var`.
    pub fn is_untouched(&self, var: Var) -> bool {
        self.grads[var.0].is_none()
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &DenseMatrix {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input. Every leaf can receive a gradient; constants are
    /// leaves whose gradient the caller simply ignores.
    pub fn leaf(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Entrywise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds a `1 × C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let x = self.value(a);
        let r = self.value(row);
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(AsmilError::shape(format!(
                "row broadcast of {}x{} onto {}x{}",
                r.rows(),
                r.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v += b;
            }
        }
        Ok(self.push(value, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        self.push(value, Op::Scale(a, c))
    }

    /// `a + c` entrywise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.push(value, Op::Offset(a))
    }

    /// Multiplies `x` by the `1 × 1` value `s`.
    pub fn scale_by(&mut self, s: Var, x: Var) -> Result<Var> {
        let k = self.value(s).item()?;
        let value = self.value(x).scale(k);
        Ok(self.push(value, Op::ScaleBy(s, x)))
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var) -> Result<Var> {
        let value = self.value(a).elementwise(op)?;
        Ok(self.push(value, Op::Unary(op, a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Sigmoid, a)
            .expect("sigmoid is total")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Tanh, a)
            .expect("tanh is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Relu, a)
            .expect("relu is total")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Exp, a).expect("exp is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.elementwise(Elementwise::Log, a)
    }

    /// `max(a, floor)` entrywise; gradient passes only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).map(|v| v.max(floor));
        self.push(value, Op::ClampMin(a, floor))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Result<Var> {
        if temperature <= 0.0 || !temperature.is_finite() {
            return Err(AsmilError::domain(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let row = attention::softmax_slice(x.row(i), temperature);
            value.row_mut(i).copy_from_slice(&row);
        }
        Ok(self.push(value, Op::SoftmaxRows(a, temperature)))
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let s: f64 = x.row(i).iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(AsmilError::domain(format!(
                    "row {i} sums to {s}; cannot normalize"
                )));
            }
            for v in value.row_mut(i) {
                *v /= s;
            }
        }
        Ok(self.push(value, Op::NormalizeRows(a)))
    }

    /// Row-wise entmax with exponent parameter `alpha > 1`.
    pub fn entmax_rows(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..x.rows() {
            let (row, _) = attention::entmax_slice(x.row(i), alpha, attention::ENTMAX_TOLERANCE)?;
            value.row_mut(i).copy_from_slice(&row);
        }
        Ok(self.push(value, Op::EntmaxRows(a, alpha)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = DenseMatrix::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = DenseMatrix::scalar(x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    pub fn select_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        Ok(self.push(value, Op::SelectRows(a, indices.to_vec())))
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(&mut self, top: Var, bottom: Var) -> Result<Var> {
        let value = self.value(top).vstack(self.value(bottom))?;
        Ok(self.push(value, Op::VStack(top, bottom)))
    }

    /// Copies the value of `a` into a node that blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient)
    }

    /// `−log softmax(logits)[label]` for a `1 × K` logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.value(logits);
        if x.rows() != 1 {
            return Err(AsmilError::shape(format!(
                "cross entropy expects a single logit row, got {} rows",
                x.rows()
            )));
        }
        let value = DenseMatrix::scalar(attention::cross_entropy_slice(x.row(0), label)?);
        Ok(self.push(value, Op::CrossEntropy(logits, label)))
    }

    /// Backpropagates from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(AsmilError::contract(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        let mut grads: Vec<Option<DenseMatrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::StopGradient => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.scale(-1.0))?;
                }
                Op::Mul(a, b) => {
                    let da = g.hadamard(self.value(*b))?;
                    let db = g.hadamard(self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::AddRow(a, row) => {
                    let mut drow = DenseMatrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, v) in drow.data_mut().iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *row, drow)?;
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c))?,
                Op::Offset(a) => accumulate(&mut grads, *a, g.clone())?,
                Op::ScaleBy(s, x) => {
                    let k = self.value(*s).item()?;
                    let ds = g.hadamard(self.value(*x))?.sum();
                    accumulate(&mut grads, *s, DenseMatrix::scalar(ds))?;
                    accumulate(&mut grads, *x, g.scale(k))?;
                }
                Op::Unary(op, a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = g.clone();
                    for ((dv, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *dv *= op.derivative(xv, yv);
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::ClampMin(a, floor) => {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for (dv, &xv) in d.data_mut().iter_mut().zip(x.data()) {
                        if xv <= *floor {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::SoftmaxRows(a, t) => {
                    let y = &node.value;
                    let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                            *dv = yr[j] * (gr[j] - dot) / t;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::NormalizeRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let s: f64 = x.row(i).iter().sum();
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                            *dv = (gr[j] - dot) / s;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::EntmaxRows(a, alpha) => {
                    // Jacobian on the support is diag(w) - w wᵀ / Σw with
                    // w_i = y_i^{2-α} / α; zero off the support.
                    let y = &node.value;
                    let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                    for i in 0..y.rows() {
                        let w: Vec<f64> = y
                            .row(i)
                            .iter()
                            .map(|&p| {
                                if p > 0.0 {
                                    p.powf(2.0 - alpha) / alpha
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        let gr = g.row(i);
                        let wsum: f64 = w.iter().sum();
                        let wg: f64 = w.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let shift = if wsum > 0.0 { wg / wsum } else { 0.0 };
                        for (j, dv) in d.row_mut(i).iter_mut().enumerate() {
                            *dv = w[j] * (gr[j] - shift);
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::Sum(a) => {
                    let (r, c) = self.value(*a).shape();
                    accumulate(&mut grads, *a, DenseMatrix::filled(r, c, g.item()?))?;
                }
                Op::Mean(a) => {
                    let (r, c) = self.value(*a).shape();
                    let n = (r * c) as f64;
                    accumulate(&mut grads, *a, DenseMatrix::filled(r, c, g.item()? / n))?;
                }
                Op::SelectRows(a, indices) => {
                    let (r, c) = self.value(*a).shape();
                    let mut d = DenseMatrix::zeros(r, c);
                    for (k, &src) in indices.iter().enumerate() {
                        for (dv, gv) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                            *dv += gv;
                        }
                    }
                    accumulate(&mut grads, *a, d)?;
                }
                Op::VStack(top, bottom) => {
                    let split = self.value(*top).rows();
                    let top_idx: Vec<usize> = (0..split).collect();
                    let bottom_idx: Vec<usize> = (split..g.rows()).collect();
                    accumulate(&mut grads, *top, g.select_rows(&top_idx)?)?;
                    accumulate(&mut grads, *bottom, g.select_rows(&bottom_idx)?)?;
                }
                Op::CrossEntropy(logits, label) => {
                    let scale = g.item()?;
                    let mut d = DenseMatrix::row_vector(attention::softmax_slice(
                        self.value(*logits).row(0),
                        1.0,
                    ));
                    d.data_mut()[*label] -= 1.0;
                    accumulate(&mut grads, *logits, d.scale(scale))?;
                }
            }
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }
}

fn accumulate(grads: &mut [Option<DenseMatrix>], var: Var, delta: DenseMatrix) -> Result<()> {
    match &mut grads[var.0] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}
