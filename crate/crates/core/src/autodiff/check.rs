//! Reverse mode vs central finite differences.

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |g_ad − g_fd| / max(|g_fd|, 1e-8)` over the checked components.
    pub max_rel_error: f64,
    /// `(input, component, g_ad, g_fd)` for every checked component.
    pub components: Vec<(usize, usize, f64, f64)>,
}

fn evaluate<T: Real, F>(f: &F, point: &[Tensor<T>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let tape = Tape::no_grad();
    let inputs: Vec<_> = point.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&tape, &inputs)?;
    if let Some(name) = tape.first_non_finite() {
        return Err(Error::NumericalFailure { primitive: name.to_string() });
    }
    if out.len() != 1 {
        return Err(Error::NonScalarLoss { len: out.len() });
    }
    Ok(out.item().as_f64())
}

/// Checks every component of every input.
pub fn gradient_check<T: Real, F>(f: F, point: &[Tensor<T>], epsilon: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    let all: Vec<(usize, usize)> =
        point.iter().enumerate().flat_map(|(i, p)| (0..p.len()).map(move |k| (i, k))).collect();
    gradient_check_components(f, point, &all, epsilon)
}

/// Finite-difference stencil used as the reference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+ε) − f(x−ε)) / 2ε`.
    #[default]
    Central,
    /// Five-point stencil, error O(ε⁴). Allows a larger ε, so the
    /// rounding noise of the loss is divided by a larger step.
    FivePoint,
}

/// Checks the listed `(input, component)` pairs only.
pub fn gradient_check_components<T: Real, F>(
    f: F,
    point: &[Tensor<T>],
    components: &[(usize, usize)],
    epsilon: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    gradient_check_with(f, point, components, epsilon, Stencil::Central)
}

/// Component check with an explicit stencil.
pub fn gradient_check_with<T: Real, F>(
    f: F,
    point: &[Tensor<T>],
    components: &[(usize, usize)],
    epsilon: f64,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
{
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let tape = Tape::new();
    let inputs: Vec<_> = point.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&tape, &inputs)?;
    if let Some(name) = tape.first_non_finite() {
        return Err(Error::NumericalFailure { primitive: name.to_string() });
    }
    let grads = tape.backward(&out)?;
    let ad: Vec<Tensor<T>> = inputs.iter().map(|v| grads.wrt(v)).collect();
    drop(grads);

    let mut report = GradCheckReport { max_rel_error: 0.0, components: Vec::with_capacity(components.len()) };
    for &(i, k) in components {
        let shifted = |delta: f64| -> Result<f64> {
            let mut p = point.to_vec();
            let mut data = p[i].to_vec();
            data[k] = T::cast(data[k].as_f64() + delta);
            p[i] = Tensor::new(p[i].shape(), data)?;
            evaluate(&f, &p)
        };
        let fd = match stencil {
            Stencil::Central => (shifted(epsilon)? - shifted(-epsilon)?) / (2.0 * epsilon),
            Stencil::FivePoint => {
                let near = shifted(epsilon)? - shifted(-epsilon)?;
                let far = shifted(2.0 * epsilon)? - shifted(-2.0 * epsilon)?;
                (8.0 * near - far) / (12.0 * epsilon)
            }
        };
        let g = ad[i].data()[k].as_f64();
        let rel = (g - fd).abs() / fd.abs().max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.components.push((i, k, g, fd));
    }
    Ok(report)
}
