//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records primitives eagerly; [`Tape::grad`] appends the reverse
//! pass to the same tape so gradients can themselves be differentiated.

mod tape;
mod tensor;

pub use tape::{silu_derivative, Tape, Unary, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Analytic gradient of `f` at `x` next to its central-difference estimate.
pub struct GradientComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradientComparison {
    /// `max |analytic - numeric| / (|numeric| + 1e-12)` over coordinates.
    pub fn max_relative_error(&self) -> f64 {
        self.analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs() / (n.abs() + 1e-12))
            .fold(0.0, f64::max)
    }
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    let val = tape.value(out);
    if val.len() != 1 {
        return Err(Error::NonScalarOutput(val.shape().to_vec()));
    }
    Ok(val.item())
}

/// Evaluates the analytic gradient and the central-difference estimate of a
/// scalar function at every coordinate of `x`.
pub fn compare_gradients<F>(f: F, x: &Tensor, eps: f64) -> Result<GradientComparison>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::NonScalarOutput(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFinite(format!("f(x) = {}", value.item())));
    }
    let analytic = tape.backward(out, &[leaf])?.remove(0).into_data();

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * eps));
    }
    Ok(GradientComparison { analytic, numeric })
}

/// Maximum relative deviation between the recorded gradient of `f` and
/// central differences with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(compare_gradients(f, x, eps)?.max_relative_error())
}
