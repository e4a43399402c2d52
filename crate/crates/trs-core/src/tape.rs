//! Reverse-mode differentiation on an operation tape.
//!
//! Every recorded operation evaluates eagerly, so a node always carries
//! its value. Two backward passes are provided:
//!
//! * [`TapeBase::backward_values`] accumulates plain numeric adjoints —
//!   the fast path for ordinary gradients.
//! * [`TapeBase::backward_nodes`] appends the adjoint computation to the
//!   tape itself, producing gradient *nodes*. Scalar functionals of those
//!   nodes (a norm, a cosine) can then be differentiated again with a
//!   numeric pass, which is the one level of nesting the training
//!   objectives need.
//!
//! A tape is private to one evaluation; nothing here is shared.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
#[allow(dead_code)] // mask ops keep their input id even though no rule reads it back
enum Op<F: Scalar> {
    Var,
    Const,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Neg(NodeId),
    /// Elementwise product of same-shape tensors.
    Mul(NodeId, NodeId),
    /// Elementwise quotient of same-shape tensors.
    Div(NodeId, NodeId),
    /// Scalar node times tensor node.
    ScalarMul(NodeId, NodeId),
    /// Tensor node times a fixed constant.
    ConstMul(NodeId, F),
    /// `[m,n] · [n] -> [m]`
    MatVec(NodeId, NodeId),
    /// `[m,n]ᵀ · [m] -> [n]`
    MatTVec(NodeId, NodeId),
    /// `[m] ⊗ [n] -> [m,n]`
    Outer(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    /// 1 where the input is positive, else 0. Derivative zero.
    StepMask(NodeId),
    /// Sign of the input (0 at 0). Derivative zero.
    SignMask(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Abs(NodeId),
    /// Numerically stable softmax over a 1-D tensor.
    Softmax(NodeId),
    /// Select one entry of a 1-D tensor.
    Index(NodeId, usize),
    /// Maximum entry of a 1-D tensor excluding one index; ties go low.
    MaxExcept(NodeId, usize),
    /// Elementwise `max(v, c)`.
    ClampMin(NodeId, F),
    /// Euclidean norm; gradient defined as zero below the degenerate
    /// threshold, raising the tape's degenerate flag.
    L2Norm(NodeId),
}

struct Node<F: Scalar> {
    op: Op<F>,
    value: TensorBase<F>,
}

/// Operation tape. Build a computation with the push methods, then run a
/// backward pass from a scalar output.
pub struct TapeBase<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for TapeBase<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numeric adjoints from [`TapeBase::backward_values`].
pub struct GradValues<F: Scalar> {
    adjoints: Vec<Option<Vec<F>>>,
    /// True when a degenerate gradient norm was encountered; the affected
    /// adjoints are zero.
    pub degenerate: bool,
}

impl<F: Scalar> GradValues<F> {
    /// Adjoint of `id` as a tensor shaped like the node's value. Nodes the
    /// output does not depend on yield zeros.
    pub fn gradient(&self, tape: &TapeBase<F>, id: NodeId) -> TensorBase<F> {
        let shape = tape.nodes[id.0].value.shape().to_vec();
        match &self.adjoints[id.0] {
            Some(buf) => TensorBase::from_parts_unchecked(shape, buf.clone()),
            None => TensorBase::zeros(&shape),
        }
    }
}

/// Gradient nodes from [`TapeBase::backward_nodes`].
pub struct GradNodes {
    adjoints: Vec<Option<NodeId>>,
    pub degenerate: bool,
}

impl GradNodes {
    /// Adjoint node of `id`, if the output depends on it.
    pub fn node(&self, id: NodeId) -> Option<NodeId> {
        self.adjoints[id.0]
    }

    /// Adjoint node of `id`, materializing zeros when absent.
    pub fn node_or_zero<F: Scalar>(&self, tape: &mut TapeBase<F>, id: NodeId) -> NodeId {
        match self.adjoints[id.0] {
            Some(n) => n,
            None => {
                let shape = tape.nodes[id.0].value.shape().to_vec();
                tape.push_const_ok(TensorBase::zeros(&shape))
            }
        }
    }
}

impl<F: Scalar> TapeBase<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &TensorBase<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<F>, value: TensorBase<F>) -> Result<NodeId> {
        if let Some(v) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "tape node {} produced {v}",
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn push_const_ok(&mut self, value: TensorBase<F>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Const,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf variable; gradients may be requested with respect to it.
    pub fn var(&mut self, value: TensorBase<F>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Var,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf constant; backward passes treat it as fixed.
    pub fn constant(&mut self, value: TensorBase<F>) -> NodeId {
        self.push_const_ok(value)
    }

    pub fn scalar_const(&mut self, value: F) -> NodeId {
        self.push_const_ok(TensorBase::from_parts_unchecked(vec![], vec![value]))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what} on {:?} and {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = self.nodes[a.0].value.sub(&self.nodes[b.0].value)?;
        self.push(Op::Sub(a, b), value)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.scale(-F::one());
        self.push(Op::Neg(a), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            TensorBase::from_parts_unchecked(
                va.shape().to_vec(),
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| *x * *y)
                    .collect(),
            )
        };
        self.push(Op::Mul(a, b), value)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let value = {
            let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            TensorBase::from_parts_unchecked(
                va.shape().to_vec(),
                va.data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| *x / *y)
                    .collect(),
            )
        };
        self.push(Op::Div(a, b), value)
    }

    /// Multiply tensor `t` by scalar node `s`.
    pub fn scalar_mul(&mut self, s: NodeId, t: NodeId) -> Result<NodeId> {
        let sv = self.nodes[s.0].value.item()?;
        let value = self.nodes[t.0].value.scale(sv);
        self.push(Op::ScalarMul(s, t), value)
    }

    pub fn const_mul(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let value = self.nodes[a.0].value.scale(c);
        self.push(Op::ConstMul(a, c), value)
    }

    pub fn mat_vec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wv, xv) = (&self.nodes[w.0].value, &self.nodes[x.0].value);
        let (rows, cols) = match wv.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "mat_vec expects a matrix, got {s:?}"
                )))
            }
        };
        if xv.shape() != [cols] {
            return Err(Error::ShapeMismatch(format!(
                "mat_vec [{},{}] with vector {:?}",
                rows,
                cols,
                xv.shape()
            )));
        }
        let mut out = vec![F::zero(); rows];
        for i in 0..rows {
            let row = &wv.data()[i * cols..(i + 1) * cols];
            out[i] = row
                .iter()
                .zip(xv.data())
                .fold(F::zero(), |acc, (a, b)| acc + *a * *b);
        }
        self.push(
            Op::MatVec(w, x),
            TensorBase::from_parts_unchecked(vec![rows], out),
        )
    }

    pub fn mat_t_vec(&mut self, w: NodeId, y: NodeId) -> Result<NodeId> {
        let (wv, yv) = (&self.nodes[w.0].value, &self.nodes[y.0].value);
        let (rows, cols) = match wv.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::ShapeMismatch(format!(
                    "mat_t_vec expects a matrix, got {s:?}"
                )))
            }
        };
        if yv.shape() != [rows] {
            return Err(Error::ShapeMismatch(format!(
                "mat_t_vec [{},{}]ᵀ with vector {:?}",
                rows,
                cols,
                yv.shape()
            )));
        }
        let mut out = vec![F::zero(); cols];
        for i in 0..rows {
            let yi = yv.data()[i];
            let row = &wv.data()[i * cols..(i + 1) * cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o = *o + *a * yi;
            }
        }
        self.push(
            Op::MatTVec(w, y),
            TensorBase::from_parts_unchecked(vec![cols], out),
        )
    }

    pub fn outer(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, n) = match (av.shape(), bv.shape()) {
            ([m], [n]) => (*m, *n),
            (sa, sb) => {
                return Err(Error::ShapeMismatch(format!(
                    "outer of {sa:?} and {sb:?}"
                )))
            }
        };
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let ai = av.data()[i];
            for j in 0..n {
                out[i * n + j] = ai * bv.data()[j];
            }
        }
        self.push(
            Op::Outer(a, b),
            TensorBase::from_parts_unchecked(vec![m, n], out),
        )
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "dot")?;
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value)?;
        self.push(
            Op::Dot(a, b),
            TensorBase::from_parts_unchecked(vec![], vec![v]),
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(F::zero(), |acc, x| acc + *x);
        self.push(
            Op::Sum(a),
            TensorBase::from_parts_unchecked(vec![], vec![v]),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.tanh());
        self.push(Op::Tanh(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(softplus);
        self.push(Op::Softplus(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.max(F::zero()));
        self.push(Op::Relu(a), value)
    }

    pub fn step_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0]
            .value
            .map(|v| if v > F::zero() { F::one() } else { F::zero() });
        self.push(Op::StepMask(a), value)
    }

    pub fn sign_mask(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| {
            if v > F::zero() {
                F::one()
            } else if v < F::zero() {
                -F::one()
            } else {
                F::zero()
            }
        });
        self.push(Op::SignMask(a), value)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.exp());
        self.push(Op::Exp(a), value)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.ln());
        self.push(Op::Ln(a), value)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.sqrt());
        self.push(Op::Sqrt(a), value)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.abs());
        self.push(Op::Abs(a), value)
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if av.shape().len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "softmax expects a vector, got {:?}",
                av.shape()
            )));
        }
        let value = TensorBase::from_parts_unchecked(av.shape().to_vec(), softmax(av.data()));
        self.push(Op::Softmax(a), value)
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if i >= av.len() {
            return Err(Error::InvalidArgument(format!(
                "index {i} out of range for length {}",
                av.len()
            )));
        }
        let v = av.data()[i];
        self.push(
            Op::Index(a, i),
            TensorBase::from_parts_unchecked(vec![], vec![v]),
        )
    }

    pub fn max_except(&mut self, a: NodeId, except: usize) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        if av.len() < 2 || except >= av.len() {
            return Err(Error::InvalidArgument(format!(
                "max_except({except}) on tensor of length {}",
                av.len()
            )));
        }
        let idx = argmax_except(av.data(), except);
        let v = av.data()[idx];
        self.push(
            Op::MaxExcept(a, except),
            TensorBase::from_parts_unchecked(vec![], vec![v]),
        )
    }

    pub fn clamp_min(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let value = self.nodes[a.0].value.map(|v| v.max(c));
        self.push(Op::ClampMin(a, c), value)
    }

    pub fn l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.nodes[a.0].value.norm_l2();
        self.push(
            Op::L2Norm(a),
            TensorBase::from_parts_unchecked(vec![], vec![v]),
        )
    }

    fn check_scalar_output(&self, output: NodeId) -> Result<()> {
        if self.nodes[output.0].value.len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward pass requires a scalar output, got shape {:?}",
                self.nodes[output.0].value.shape()
            )));
        }
        Ok(())
    }

    /// Numeric reverse sweep from a scalar output.
    pub fn backward_values(&self, output: NodeId) -> Result<GradValues<F>> {
        self.check_scalar_output(output)?;
        let mut adj: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(vec![F::one()]);
        let mut degenerate = false;

        for i in (0..=output.0).rev() {
            let g = match adj[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(v) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("adjoint of node {i} is {v}")));
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Var | Op::Const => {}
                Op::Add(a, b) => {
                    acc(&mut adj, self, *a, |buf| axpy(buf, F::one(), &g));
                    acc(&mut adj, self, *b, |buf| axpy(buf, F::one(), &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, self, *a, |buf| axpy(buf, F::one(), &g));
                    acc(&mut adj, self, *b, |buf| axpy(buf, -F::one(), &g));
                }
                Op::Neg(a) => {
                    acc(&mut adj, self, *a, |buf| axpy(buf, -F::one(), &g));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), bi) in buf.iter_mut().zip(&g).zip(vb) {
                            *o = *o + *gi * *bi;
                        }
                    });
                    acc(&mut adj, self, *b, |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(va) {
                            *o = *o + *gi * *ai;
                        }
                    });
                }
                Op::Div(a, b) => {
                    let vb = self.nodes[b.0].value.data();
                    let vout = node.value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), bi) in buf.iter_mut().zip(&g).zip(vb) {
                            *o = *o + *gi / *bi;
                        }
                    });
                    acc(&mut adj, self, *b, |buf| {
                        for (((o, gi), oi), bi) in buf.iter_mut().zip(&g).zip(vout).zip(vb) {
                            *o = *o - *gi * *oi / *bi;
                        }
                    });
                }
                Op::ScalarMul(s, t) => {
                    let sv = self.nodes[s.0].value.data()[0];
                    let tv = self.nodes[t.0].value.data();
                    acc(&mut adj, self, *s, |buf| {
                        buf[0] = buf[0]
                            + g.iter()
                                .zip(tv)
                                .fold(F::zero(), |acc0, (gi, ti)| acc0 + *gi * *ti);
                    });
                    acc(&mut adj, self, *t, |buf| axpy(buf, sv, &g));
                }
                Op::ConstMul(a, c) => {
                    let c = *c;
                    acc(&mut adj, self, *a, |buf| axpy(buf, c, &g));
                }
                Op::MatVec(w, x) => {
                    let wv = self.nodes[w.0].value.clone();
                    let xv = self.nodes[x.0].value.clone();
                    let cols = xv.len();
                    acc(&mut adj, self, *w, |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            for (j, xj) in xv.data().iter().enumerate() {
                                buf[i * cols + j] = buf[i * cols + j] + *gi * *xj;
                            }
                        }
                    });
                    acc(&mut adj, self, *x, |buf| {
                        for (i, gi) in g.iter().enumerate() {
                            let row = &wv.data()[i * cols..(i + 1) * cols];
                            for (o, wij) in buf.iter_mut().zip(row) {
                                *o = *o + *gi * *wij;
                            }
                        }
                    });
                }
                Op::MatTVec(w, y) => {
                    let wv = self.nodes[w.0].value.clone();
                    let yv = self.nodes[y.0].value.clone();
                    let cols = node.value.len();
                    acc(&mut adj, self, *w, |buf| {
                        for (i, yi) in yv.data().iter().enumerate() {
                            for (j, gj) in g.iter().enumerate() {
                                buf[i * cols + j] = buf[i * cols + j] + *yi * *gj;
                            }
                        }
                    });
                    acc(&mut adj, self, *y, |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            let row = &wv.data()[i * cols..(i + 1) * cols];
                            *o = *o
                                + row
                                    .iter()
                                    .zip(&g)
                                    .fold(F::zero(), |acc0, (wij, gj)| acc0 + *wij * *gj);
                        }
                    });
                }
                Op::Outer(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let n = bv.len();
                    acc(&mut adj, self, *a, |buf| {
                        for (i, o) in buf.iter_mut().enumerate() {
                            let row = &g[i * n..(i + 1) * n];
                            *o = *o
                                + row
                                    .iter()
                                    .zip(bv.data())
                                    .fold(F::zero(), |acc0, (gij, bj)| acc0 + *gij * *bj);
                        }
                    });
                    acc(&mut adj, self, *b, |buf| {
                        for (i, ai) in av.data().iter().enumerate() {
                            let row = &g[i * n..(i + 1) * n];
                            for (o, gij) in buf.iter_mut().zip(row) {
                                *o = *o + *ai * *gij;
                            }
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let (va, vb) = (
                        self.nodes[a.0].value.clone(),
                        self.nodes[b.0].value.clone(),
                    );
                    acc(&mut adj, self, *a, |buf| axpy(buf, g0, vb.data()));
                    acc(&mut adj, self, *b, |buf| axpy(buf, g0, va.data()));
                }
                Op::Sum(a) => {
                    let g0 = g[0];
                    acc(&mut adj, self, *a, |buf| {
                        for o in buf.iter_mut() {
                            *o = *o + g0;
                        }
                    });
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(yv) {
                            *o = *o + *gi * (F::one() - *yi * *yi);
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let yv = node.value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(yv) {
                            *o = *o + *gi * *yi * (F::one() - *yi);
                        }
                    });
                }
                Op::Softplus(a) => {
                    let av = self.nodes[a.0].value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(av) {
                            *o = *o + *gi * sigmoid(*ai);
                        }
                    });
                }
                Op::Relu(a) => {
                    let av = self.nodes[a.0].value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(av) {
                            if *ai > F::zero() {
                                *o = *o + *gi;
                            }
                        }
                    });
                }
                Op::StepMask(_) | Op::SignMask(_) => {}
                Op::Exp(a) => {
                    let yv = node.value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(yv) {
                            *o = *o + *gi * *yi;
                        }
                    });
                }
                Op::Ln(a) => {
                    let av = self.nodes[a.0].value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(av) {
                            *o = *o + *gi / *ai;
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let yv = node.value.data();
                    let two = F::from_f64(2.0).unwrap();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(yv) {
                            *o = *o + *gi / (two * *yi);
                        }
                    });
                }
                Op::Abs(a) => {
                    let av = self.nodes[a.0].value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(av) {
                            let s = if *ai > F::zero() {
                                F::one()
                            } else if *ai < F::zero() {
                                -F::one()
                            } else {
                                F::zero()
                            };
                            *o = *o + *gi * s;
                        }
                    });
                }
                Op::Softmax(a) => {
                    let yv = node.value.data();
                    let gy = g
                        .iter()
                        .zip(yv)
                        .fold(F::zero(), |acc0, (gi, yi)| acc0 + *gi * *yi);
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), yi) in buf.iter_mut().zip(&g).zip(yv) {
                            *o = *o + *yi * (*gi - gy);
                        }
                    });
                }
                Op::Index(a, idx) => {
                    let g0 = g[0];
                    let idx = *idx;
                    acc(&mut adj, self, *a, |buf| {
                        buf[idx] = buf[idx] + g0;
                    });
                }
                Op::MaxExcept(a, except) => {
                    let g0 = g[0];
                    let idx = argmax_except(self.nodes[a.0].value.data(), *except);
                    acc(&mut adj, self, *a, |buf| {
                        buf[idx] = buf[idx] + g0;
                    });
                }
                Op::ClampMin(a, c) => {
                    let c = *c;
                    let av = self.nodes[a.0].value.data();
                    acc(&mut adj, self, *a, |buf| {
                        for ((o, gi), ai) in buf.iter_mut().zip(&g).zip(av) {
                            if *ai > c {
                                *o = *o + *gi;
                            }
                        }
                    });
                }
                Op::L2Norm(a) => {
                    let norm = node.value.data()[0];
                    if norm < F::degenerate_norm() {
                        degenerate = true;
                    } else {
                        let g0 = g[0];
                        let av = self.nodes[a.0].value.clone();
                        acc(&mut adj, self, *a, |buf| axpy(buf, g0 / norm, av.data()));
                    }
                }
            }
            adj[i] = Some(g);
        }

        Ok(GradValues {
            adjoints: adj,
            degenerate,
        })
    }

    /// Reverse sweep that appends the adjoint computation to the tape,
    /// returning gradient nodes that later operations can consume.
    pub fn backward_nodes(&mut self, output: NodeId) -> Result<GradNodes> {
        self.check_scalar_output(output)?;
        let mut adj: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let seed = self.scalar_const(F::one());
        adj[output.0] = Some(seed);
        let mut degenerate = false;

        for i in (0..=output.0).rev() {
            let g = match adj[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let out_id = NodeId(i);
            match op {
                Op::Var | Op::Const => {}
                Op::Add(a, b) => {
                    self.accumulate_node(&mut adj, a, g)?;
                    self.accumulate_node(&mut adj, b, g)?;
                }
                Op::Sub(a, b) => {
                    self.accumulate_node(&mut adj, a, g)?;
                    let ng = self.neg(g)?;
                    self.accumulate_node(&mut adj, b, ng)?;
                }
                Op::Neg(a) => {
                    let ng = self.neg(g)?;
                    self.accumulate_node(&mut adj, a, ng)?;
                }
                Op::Mul(a, b) => {
                    let ca = self.mul(g, b)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                    let cb = self.mul(g, a)?;
                    self.accumulate_node(&mut adj, b, cb)?;
                }
                Op::Div(a, b) => {
                    let ca = self.div(g, b)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                    let gy = self.mul(g, out_id)?;
                    let q = self.div(gy, b)?;
                    let cb = self.neg(q)?;
                    self.accumulate_node(&mut adj, b, cb)?;
                }
                Op::ScalarMul(s, t) => {
                    let cs = self.dot(g, t)?;
                    self.accumulate_node(&mut adj, s, cs)?;
                    let ct = self.scalar_mul(s, g)?;
                    self.accumulate_node(&mut adj, t, ct)?;
                }
                Op::ConstMul(a, c) => {
                    let ca = self.const_mul(g, c)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::MatVec(w, x) => {
                    let cw = self.outer(g, x)?;
                    self.accumulate_node(&mut adj, w, cw)?;
                    let cx = self.mat_t_vec(w, g)?;
                    self.accumulate_node(&mut adj, x, cx)?;
                }
                Op::MatTVec(w, y) => {
                    let cw = self.outer(y, g)?;
                    self.accumulate_node(&mut adj, w, cw)?;
                    let cy = self.mat_vec(w, g)?;
                    self.accumulate_node(&mut adj, y, cy)?;
                }
                Op::Outer(a, b) => {
                    let ca = self.mat_vec(g, b)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                    let cb = self.mat_t_vec(g, a)?;
                    self.accumulate_node(&mut adj, b, cb)?;
                }
                Op::Dot(a, b) => {
                    let ca = self.scalar_mul(g, b)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                    let cb = self.scalar_mul(g, a)?;
                    self.accumulate_node(&mut adj, b, cb)?;
                }
                Op::Sum(a) => {
                    let ones = self.push_const_ok(TensorBase::ones(
                        &self.nodes[a.0].value.shape().to_vec(),
                    ));
                    let ca = self.scalar_mul(g, ones)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Tanh(a) => {
                    let yy = self.mul(out_id, out_id)?;
                    let ones = self.push_const_ok(TensorBase::ones(
                        &self.nodes[a.0].value.shape().to_vec(),
                    ));
                    let d = self.sub(ones, yy)?;
                    let ca = self.mul(g, d)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Sigmoid(a) => {
                    let ones = self.push_const_ok(TensorBase::ones(
                        &self.nodes[a.0].value.shape().to_vec(),
                    ));
                    let one_minus = self.sub(ones, out_id)?;
                    let d = self.mul(out_id, one_minus)?;
                    let ca = self.mul(g, d)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Softplus(a) => {
                    let s = self.sigmoid(a)?;
                    let ca = self.mul(g, s)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Relu(a) => {
                    let m = self.step_mask(a)?;
                    let ca = self.mul(g, m)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::StepMask(_) | Op::SignMask(_) => {}
                Op::Exp(a) => {
                    let ca = self.mul(g, out_id)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Ln(a) => {
                    let ca = self.div(g, a)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Sqrt(a) => {
                    let two_y = self.const_mul(out_id, F::from_f64(2.0).unwrap())?;
                    let ca = self.div(g, two_y)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Abs(a) => {
                    let m = self.sign_mask(a)?;
                    let ca = self.mul(g, m)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Softmax(a) => {
                    let gy = self.dot(g, out_id)?;
                    let ones = self.push_const_ok(TensorBase::ones(
                        &self.nodes[a.0].value.shape().to_vec(),
                    ));
                    let gy_vec = self.scalar_mul(gy, ones)?;
                    let centered = self.sub(g, gy_vec)?;
                    let ca = self.mul(out_id, centered)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::Index(a, idx) => {
                    let len = self.nodes[a.0].value.len();
                    let hot = self.push_const_ok(TensorBase::one_hot(len, idx));
                    let ca = self.scalar_mul(g, hot)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::MaxExcept(a, except) => {
                    let idx = argmax_except(self.nodes[a.0].value.data(), except);
                    let len = self.nodes[a.0].value.len();
                    let hot = self.push_const_ok(TensorBase::one_hot(len, idx));
                    let ca = self.scalar_mul(g, hot)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::ClampMin(a, c) => {
                    let neg_c = self.push_const_ok(
                        TensorBase::ones(&self.nodes[a.0].value.shape().to_vec())
                            .scale(c),
                    );
                    let shifted = self.sub(a, neg_c)?;
                    let m = self.step_mask(shifted)?;
                    let ca = self.mul(g, m)?;
                    self.accumulate_node(&mut adj, a, ca)?;
                }
                Op::L2Norm(a) => {
                    let norm = self.nodes[i].value.data()[0];
                    if norm < F::degenerate_norm() {
                        degenerate = true;
                    } else {
                        let inv = self.div(g, out_id)?;
                        let ca = self.scalar_mul(inv, a)?;
                        self.accumulate_node(&mut adj, a, ca)?;
                    }
                }
            }
        }

        Ok(GradNodes {
            adjoints: adj,
            degenerate,
        })
    }

    fn accumulate_node(
        &mut self,
        adj: &mut [Option<NodeId>],
        target: NodeId,
        contribution: NodeId,
    ) -> Result<()> {
        adj[target.0] = Some(match adj[target.0] {
            Some(existing) => self.add(existing, contribution)?,
            None => contribution,
        });
        Ok(())
    }
}

fn acc<F: Scalar>(
    adj: &mut [Option<Vec<F>>],
    tape: &TapeBase<F>,
    target: NodeId,
    update: impl FnOnce(&mut Vec<F>),
) {
    let buf = adj[target.0]
        .get_or_insert_with(|| vec![F::zero(); tape.nodes[target.0].value.len()]);
    update(buf);
}

fn axpy<F: Scalar>(out: &mut [F], a: F, x: &[F]) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o = *o + a * *xi;
    }
}

fn argmax_except<F: Scalar>(data: &[F], except: usize) -> usize {
    let mut best = usize::MAX;
    for (i, v) in data.iter().enumerate() {
        if i == except {
            continue;
        }
        if best == usize::MAX || *v > data[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn softplus<F: Scalar>(v: F) -> F {
    // ln(1 + e^v) without overflow for large |v|.
    if v > F::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn softmax<F: Scalar>(z: &[F]) -> Vec<F> {
    let m = z.iter().fold(F::neg_infinity(), |a, v| a.max(*v));
    let exps: Vec<F> = z.iter().map(|v| (*v - m).exp()).collect();
    let total = exps.iter().fold(F::zero(), |a, v| a + *v);
    exps.into_iter().map(|v| v / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    type Tape = TapeBase<f64>;
    type Tensor = TensorBase<f64>;

    #[test]
    fn quadratic_gradient() {
        // f(x) = ½‖x‖² at (3,4) → gradient (3,4)
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let sq = tape.dot(x, x).unwrap();
        let f = tape.const_mul(sq, 0.5).unwrap();
        let grads = tape.backward_values(f).unwrap();
        assert_eq!(grads.gradient(&tape, x).data(), &[3.0, 4.0]);
        assert!(!grads.degenerate);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let c = tape.scalar_const(7.0);
        let grads = tape.backward_values(c).unwrap();
        assert_eq!(grads.gradient(&tape, x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(tape.backward_values(x).is_err());
    }

    #[test]
    fn l2_norm_degenerate_flag() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let n = tape.l2_norm(x).unwrap();
        let grads = tape.backward_values(n).unwrap();
        assert!(grads.degenerate);
        assert_eq!(grads.gradient(&tape, x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn symbolic_matches_numeric_on_matvec_chain() {
        let mut tape = Tape::new();
        let w = tape.var(Tensor::matrix(2, 2, vec![1.0, -0.5, 0.25, 2.0]).unwrap());
        let x = tape.var(Tensor::vector(vec![0.3, -1.2]).unwrap());
        let h = tape.mat_vec(w, x).unwrap();
        let a = tape.tanh(h).unwrap();
        let f = tape.dot(a, a).unwrap();

        let numeric = tape.backward_values(f).unwrap();
        let gx_numeric = numeric.gradient(&tape, x);

        let nodes = tape.backward_nodes(f).unwrap();
        let gx_node = nodes.node(x).unwrap();
        let gx_symbolic = tape.value(gx_node).clone();

        for (a, b) in gx_numeric.data().iter().zip(gx_symbolic.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn nested_gradient_linear_case() {
        // f(θ,x) = θ·x in 1-D: ∇ₓf = θ, d‖θ‖/dθ = sign(θ) = 1 at θ=2
        let mut tape = Tape::new();
        let theta = tape.var(Tensor::vector(vec![2.0]).unwrap());
        let x = tape.var(Tensor::vector(vec![5.0]).unwrap());
        let f = tape.dot(theta, x).unwrap();
        let grads = tape.backward_nodes(f).unwrap();
        let gx = grads.node(x).unwrap();
        let norm = tape.l2_norm(gx).unwrap();
        let outer = tape.backward_values(norm).unwrap();
        let dtheta = outer.gradient(&tape, theta);
        assert!((dtheta.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nested_gradient_product_rule() {
        // f(θ,x) = ½θx²: ‖∇ₓf‖ = |θ||x|; θ=1, x=3 → d/dθ = 3
        let mut tape = Tape::new();
        let theta = tape.var(Tensor::vector(vec![1.0]).unwrap());
        let x = tape.var(Tensor::vector(vec![3.0]).unwrap());
        let xx = tape.mul(x, x).unwrap();
        let txx = tape.mul(theta, xx).unwrap();
        let f = tape.sum(txx).unwrap();
        let f = tape.const_mul(f, 0.5).unwrap();
        let grads = tape.backward_nodes(f).unwrap();
        let gx = grads.node(x).unwrap();
        let norm = tape.l2_norm(gx).unwrap();
        let outer = tape.backward_values(norm).unwrap();
        let dtheta = outer.gradient(&tape, theta);
        assert!((dtheta.data()[0] - 3.0).abs() < 1e-12);
    }
}
