//! Central-difference verification of tape adjoints.

use super::tape::{Tape, Var};
use crate::error::{PtychoError, Result};
use crate::tensor::ComplexTensor;

/// Which real degree of freedom of an input the worst mismatch sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// (input index, element index, part) of the worst coordinate.
    pub worst: Option<(usize, usize, Part)>,
    pub coordinates: usize,
}

/// Compares the tape gradient of a real scalar function against
/// fourth-order central differences
/// `(8(f(x+εe) − f(x−εe)) − (f(x+2εe) − f(x−2εe))) / 12ε` on every real
/// coordinate.
///
/// `f` receives a fresh tape and one differentiable leaf per input point.
/// Each coordinate's error is `|analytic − numeric| / max(|analytic|,
/// |numeric|, 1e−12)`; the maximum is returned.
pub fn finite_difference_check<F>(f: F, point: &[ComplexTensor], eps: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_difference_check_with(f, point, &vec![false; point.len()], eps)
}

/// As [`finite_difference_check`], with some inputs declared real-valued:
/// only their real parts are perturbed and their analytic gradients must
/// have zero imaginary part.
pub fn finite_difference_check_with<F>(
    f: F,
    point: &[ComplexTensor],
    real_inputs: &[bool],
    eps: f64,
) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(PtychoError::InvalidArgument(format!("step {eps} must be positive")));
    }
    let analytic = analytic_gradients(&f, point, real_inputs)?;

    let mut check = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = point.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        let parts: &[Part] = if real_inputs[input] {
            &[Part::Re]
        } else {
            &[Part::Re, Part::Im]
        };
        for idx in 0..point[input].len() {
            for &part in parts {
                let numeric = central_difference(&f, &mut probe, real_inputs, input, idx, part, eps)?;
                let exact = match part {
                    Part::Re => grad.re()[idx],
                    Part::Im => grad.im()[idx],
                };
                let scale = exact.abs().max(numeric.abs()).max(1e-12);
                let err = (exact - numeric).abs() / scale;
                check.coordinates += 1;
                if err > check.max_rel_error || check.worst.is_none() {
                    check.max_rel_error = err;
                    check.worst = Some((input, idx, part));
                }
            }
        }
        if real_inputs[input] && grad.im().iter().any(|v| *v != 0.0) {
            return Err(PtychoError::Numeric(format!(
                "real input {input} received a complex gradient"
            )));
        }
    }
    Ok(check)
}

fn analytic_gradients<F>(f: &F, point: &[ComplexTensor], real_inputs: &[bool]) -> Result<Vec<ComplexTensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = bind(&tape, point, real_inputs);
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    Ok(vars.iter().map(|v| v.grad_or_zeros()).collect())
}

fn evaluate<F>(f: &F, point: &[ComplexTensor], real_inputs: &[bool]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars = bind(&tape, point, real_inputs);
    let value = f(&tape, &vars)?.value().item().re;
    if !value.is_finite() {
        return Err(PtychoError::Numeric(format!("function evaluated to {value}")));
    }
    Ok(value)
}

fn central_difference<F>(
    f: &F,
    probe: &mut [ComplexTensor],
    real_inputs: &[bool],
    input: usize,
    idx: usize,
    part: Part,
    eps: f64,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let original = *coordinate(&mut probe[input], idx, part);
    let mut at = |offset: f64| {
        *coordinate(&mut probe[input], idx, part) = original + offset;
        evaluate(f, probe, real_inputs)
    };
    let (p1, m1, p2, m2) = (at(eps), at(-eps), at(2.0 * eps), at(-2.0 * eps));
    *coordinate(&mut probe[input], idx, part) = original;
    Ok((8.0 * (p1? - m1?) - (p2? - m2?)) / (12.0 * eps))
}

fn coordinate(t: &mut ComplexTensor, idx: usize, part: Part) -> &mut f64 {
    match part {
        Part::Re => &mut t.re_mut()[idx],
        Part::Im => &mut t.im_mut()[idx],
    }
}

fn bind<'t>(tape: &'t Tape, point: &[ComplexTensor], real_inputs: &[bool]) -> Vec<Var<'t>> {
    point
        .iter()
        .zip(real_inputs)
        .map(|(p, &real)| {
            if real {
                tape.real_variable(p.clone())
            } else {
                tape.variable(p.clone())
            }
        })
        .collect()
}
