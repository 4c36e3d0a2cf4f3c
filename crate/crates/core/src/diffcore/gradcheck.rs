//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    /// Largest analytic gradient magnitude over all coordinates.
    pub max_abs_gradient: f64,
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, 1e-8)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares tape gradients of the scalar `f` against central differences
/// with the given step, one coordinate at a time.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, inputs, step, 0.0)
}

/// Like [`grad_check`], but coordinates whose gradient is far below the
/// largest one are measured against `floor_fraction` times that largest
/// gradient instead of their own magnitude, where central differences are
/// dominated by roundoff.
pub fn grad_check_scaled<F>(f: F, inputs: &[Tensor], step: f64, floor_fraction: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let value = tape.value(out).clone();
    if value.len() != 1 {
        return Err(Error::GradCheck(format!("function must return a scalar, got {:?}", value.shape())));
    }
    if !value.is_finite() {
        return Err(Error::GradCheck("function value is not finite at the base point".into()));
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    let max_abs_gradient = analytic.iter().flat_map(|t| t.data()).fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (floor_fraction * max_abs_gradient).max(1e-8);

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = tape.value(out).item();
        Ok(v)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        input: 0,
        index: 0,
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
        max_abs_gradient,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::GradCheck(format!(
                    "non-finite function value when perturbing input {i} coordinate {j}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i].data()[j];
            if !a.is_finite() {
                return Err(Error::GradCheck(format!("non-finite gradient at input {i} coordinate {j}")));
            }
            let err = relative_error_floored(a, numeric, floor);
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.input = i;
                report.index = j;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::tape::Backward;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new([5], vec![0.7, -1.3, 0.9, -0.5, 1.1]).unwrap();
        let r = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                Ok(tape.sum(sq))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    struct WrongSign;

    impl Backward for WrongSign {
        fn name(&self) -> &'static str {
            "wrong_sign"
        }

        fn backward(&self, _: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
            let mut g = grad.clone();
            g.scale(-1.0);
            vec![Some(g)]
        }
    }

    #[test]
    fn detects_sign_flip() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            |tape, v| {
                let y = tape.value(v[0]).clone();
                let id = tape.push(y, &[v[0]], WrongSign);
                Ok(tape.sum(id))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!((r.max_rel_error - 2.0).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_scalar_output_rejected() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0]), &[x], DEFAULT_STEP).is_err());
    }

    #[test]
    fn non_finite_value_names_coordinate() {
        let x = Tensor::new([2], vec![1.0, 0.0]).unwrap();
        struct Recip;
        impl Backward for Recip {
            fn name(&self) -> &'static str {
                "recip"
            }
            fn backward(&self, i: &[&Tensor], _: &Tensor, g: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
                let d = i[0].data().iter().zip(g.data()).map(|(x, g)| -g / (x * x)).collect();
                vec![Some(Tensor::new(i[0].shape().to_vec(), d).unwrap())]
            }
        }
        let err = grad_check(
            |tape, v| {
                let t = tape.value(v[0]).clone();
                let d = t.data().iter().map(|x| if x.abs() < 1e-3 { f64::NAN } else { 1.0 / x }).collect();
                let y = tape.push(Tensor::new(t.shape().to_vec(), d).unwrap(), &[v[0]], Recip);
                Ok(tape.sum(y))
            },
            &[x],
            DEFAULT_STEP,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not finite") || err.to_string().contains("coordinate 1"), "{err}");
    }
}
