//! Reverse- and forward-mode automatic differentiation over `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. [`Tape::backward`] runs a reverse
//! pass over raw tensors; [`Tape::backward_graph`] records the reverse pass itself, so a scalar
//! built from the returned gradients can be differentiated again (double backpropagation).
//! [`Tape::tangent`] and [`jvp`] propagate forward-mode tangents.
//!
//! Non-smooth primitives (`max`, `clamp`, `abs`) use a subgradient convention: the gradient flows
//! to the selected branch, ties go to the first argument, and `abs` has zero slope at zero.

mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvGeom;
pub use tape::{grad, jvp, sigmoid, Tape, Var};
pub use tensor::Tensor;

/// Central finite-difference gradient of a scalar function.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape().to_vec());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + h;
        let fp = f(&xp);
        xp.data_mut()[i] = orig - h;
        let fm = f(&xp);
        xp.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `|a - b| / max(|a|, |b|, floor)`, the comparison used by gradient checks.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest [`rel_err`] over paired entries.
pub fn max_rel_err(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared tensors differ in length");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y, floor))
        .fold(0.0, f64::max)
}


/// Pins a closure to the higher-ranked signature expected by [`jvp`] and [`grad`].
pub fn tape_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t>) -> Var<'t>,
{
    f
}
