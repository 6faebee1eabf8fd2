//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
pub mod kernels;

pub use graph::{GradOptions, Graph, GuidedAct, Var};
pub use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pins the higher-ranked signature on a closure so it can be stored in a
/// local before being passed to [`gradient`] or [`hessian_vector_product`].
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    f
}

/// Gradient of a scalar function at `x`.
pub fn gradient<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(xv)?;
    Ok(g.backward(y, &[xv])?.remove(0))
}

/// `H_f(x) v` by differentiating `<grad f(x), v>` a second time.
pub fn hessian_vector_product<F>(f: F, x: &Tensor, v: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    if x.shape() != v.shape() {
        return Err(Error::ShapeMismatch { op: "hvp", lhs: x.shape().to_vec(), rhs: v.shape().to_vec() });
    }
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(xv)?;
    let gx = g.grad(y, &[xv], GradOptions::higher_order())?.remove(0);
    let dir = g.constant(v.clone());
    let inner = gx.dot(dir)?;
    let hv = g.grad(inner, &[xv], GradOptions { create_graph: false, allow_unused: true })?;
    Ok((*hv[0].value()).clone())
}
