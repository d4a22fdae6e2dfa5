//! Dense numeric substrate: row-major `f64` tensors, the handful of array
//! operations the model needs, and a reverse-mode tape ([`Graph`]) with a
//! backward rule for every one of them.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with, GradCheckReport, FD_STEP};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Largest exponent fed to `exp` by [`stable_exp`].
pub const MAX_EXP_ARG: f64 = 700.0;

/// Untaped matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Untaped centered dilated convolution, see [`Graph::dilated_conv1d`].
pub fn dilated_conv1d(x: &Tensor, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vk) = (g.constant(x.clone()), g.constant(kernel.clone()));
    let out = g.dilated_conv1d(vx, vk, dilation)?;
    Ok(g.value(out).clone())
}

/// `exp(x - m)` elementwise, with the exponent clamped so the result never
/// overflows. `m` is either a scalar or shaped like `x`.
pub fn stable_exp(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let data = if m.len() == 1 {
        let mv = m.item();
        x.data().iter().map(|&v| (v - mv).min(MAX_EXP_ARG).exp()).collect()
    } else if m.shape() == x.shape() {
        x.data()
            .iter()
            .zip(m.data())
            .map(|(&v, &mv)| (v - mv).min(MAX_EXP_ARG).exp())
            .collect()
    } else {
        return Err(Error::Dimension(format!(
            "stable_exp: stabilizer {:?} does not match {:?}",
            m.shape(),
            x.shape()
        )));
    };
    Tensor::new(x.shape(), data)
}

/// Untaped softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax(v, axis)?;
    Ok(g.value(out).clone())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(kernels::sigmoid)
}
