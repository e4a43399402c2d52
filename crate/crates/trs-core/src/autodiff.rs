//! Gradient entry points over [`DifferentiableFunction`]s.
//!
//! `grad` gives exact first-order gradients with respect to the input or
//! any named parameter. `grad_of_grad_functional` differentiates a smooth
//! scalar functional of the input-gradient with respect to the
//! parameters, which is what regularizers built on input gradients need.
//! `fd_gradient` is the independent central-difference oracle that both
//! are validated against.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{NodeId, TapeBase};
use crate::tensor::TensorBase;

/// A scalar-valued function of named parameter tensors and one input
/// tensor, expressed as a tape program.
pub trait DifferentiableFunction<F: Scalar> {
    /// Parameter names with their shapes, in a fixed order.
    fn param_shapes(&self) -> Vec<(String, Vec<usize>)>;

    /// Shape of the input argument.
    fn input_shape(&self) -> Vec<usize>;

    /// Record the function on `tape`; `params` follows the order of
    /// [`Self::param_shapes`]. Must return a scalar node.
    fn build(&self, tape: &mut TapeBase<F>, params: &[NodeId], input: NodeId) -> Result<NodeId>;
}

/// Which argument of a [`DifferentiableFunction`] to differentiate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Wrt {
    Input,
    Param(usize),
    ParamNamed(String),
}

/// Scalar functional applied to an input-gradient before the outer
/// differentiation pass.
#[derive(Debug, Clone)]
pub enum GradFunctional<F: Scalar> {
    /// ‖∇ₓf‖₂
    L2Norm,
    /// ⟨∇ₓf, c⟩ for a fixed tensor c.
    DotWithConstant(TensorBase<F>),
}

fn check_args<F: Scalar>(
    f: &impl DifferentiableFunction<F>,
    params: &[TensorBase<F>],
    input: &TensorBase<F>,
) -> Result<()> {
    let shapes = f.param_shapes();
    if shapes.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "expected {} parameter tensors, got {}",
            shapes.len(),
            params.len()
        )));
    }
    for ((name, shape), tensor) in shapes.iter().zip(params) {
        if tensor.shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "parameter {name}: expected {:?}, got {:?}",
                shape,
                tensor.shape()
            )));
        }
    }
    if input.shape() != f.input_shape().as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "input: expected {:?}, got {:?}",
            f.input_shape(),
            input.shape()
        )));
    }
    Ok(())
}

fn build_on_tape<F: Scalar>(
    f: &impl DifferentiableFunction<F>,
    params: &[TensorBase<F>],
    input: &TensorBase<F>,
) -> Result<(TapeBase<F>, Vec<NodeId>, NodeId, NodeId)> {
    check_args(f, params, input)?;
    let mut tape = TapeBase::new();
    let param_ids: Vec<NodeId> = params.iter().map(|p| tape.var(p.clone())).collect();
    let input_id = tape.var(input.clone());
    let out = f.build(&mut tape, &param_ids, input_id)?;
    if tape.value(out).len() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "function output must be scalar, got shape {:?}",
            tape.value(out).shape()
        )));
    }
    Ok((tape, param_ids, input_id, out))
}

/// Exact reverse-mode gradient of `f` with respect to the selected
/// argument, evaluated at (`params`, `input`).
pub fn grad<F: Scalar>(
    f: &impl DifferentiableFunction<F>,
    params: &[TensorBase<F>],
    input: &TensorBase<F>,
    wrt: Wrt,
) -> Result<TensorBase<F>> {
    let (tape, param_ids, input_id, out) = build_on_tape(f, params, input)?;
    let target = match wrt {
        Wrt::Input => input_id,
        Wrt::Param(i) => *param_ids.get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("parameter index {i} out of range"))
        })?,
        Wrt::ParamNamed(name) => {
            let idx = f
                .param_shapes()
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
            param_ids[idx]
        }
    };
    let grads = tape.backward_values(out)?;
    Ok(grads.gradient(&tape, target))
}

/// Result of [`grad_of_grad_functional`]: one gradient per parameter plus
/// the degenerate-gradient flag.
pub struct NestedGradient<F: Scalar> {
    pub param_gradients: Vec<TensorBase<F>>,
    /// Set when ‖∇ₓf‖₂ fell below the degenerate threshold; the returned
    /// gradients are the zero sentinel in that case.
    pub degenerate: bool,
}

/// Differentiate `functional(∇ₓ f)` with respect to every parameter.
pub fn grad_of_grad_functional<F: Scalar>(
    f: &impl DifferentiableFunction<F>,
    params: &[TensorBase<F>],
    input: &TensorBase<F>,
    functional: &GradFunctional<F>,
) -> Result<NestedGradient<F>> {
    let (mut tape, param_ids, input_id, out) = build_on_tape(f, params, input)?;
    let grads = tape.backward_nodes(out)?;
    let gx = grads.node_or_zero(&mut tape, input_id);

    let objective = match functional {
        GradFunctional::L2Norm => tape.l2_norm(gx)?,
        GradFunctional::DotWithConstant(c) => {
            if c.shape() != input.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "dot constant shape {:?} vs input {:?}",
                    c.shape(),
                    input.shape()
                )));
            }
            let c_id = tape.constant(c.clone());
            tape.dot(gx, c_id)?
        }
    };

    let outer = tape.backward_values(objective)?;
    let param_gradients = param_ids
        .iter()
        .map(|id| outer.gradient(&tape, *id))
        .collect();
    Ok(NestedGradient {
        param_gradients,
        degenerate: grads.degenerate || outer.degenerate,
    })
}

/// Central finite-difference gradient, component by component:
/// `(f(x+he_i) - f(x-he_i)) / 2h`. The caller owns the step choice.
pub fn fd_gradient<F: Scalar>(
    f: impl Fn(&TensorBase<F>) -> Result<F>,
    at: &TensorBase<F>,
    step: F,
) -> Result<TensorBase<F>> {
    if step <= F::zero() {
        return Err(Error::InvalidArgument("fd step must be positive".into()));
    }
    let mut out = Vec::with_capacity(at.len());
    let two = F::from_f64(2.0).unwrap();
    for i in 0..at.len() {
        let mut plus = at.data().to_vec();
        plus[i] = plus[i] + step;
        let mut minus = at.data().to_vec();
        minus[i] = minus[i] - step;
        let fp = f(&TensorBase::from_parts_unchecked(at.shape().to_vec(), plus))?;
        let fm = f(&TensorBase::from_parts_unchecked(at.shape().to_vec(), minus))?;
        out.push((fp - fm) / (two * step));
    }
    TensorBase::new(at.shape().to_vec(), out)
}
