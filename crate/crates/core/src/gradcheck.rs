//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Maximum accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Position of one scalar among the checked inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub input: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    /// First coordinate at which the function or a gradient was non-finite.
    pub non_finite: Option<Coordinate>,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }
}

/// Errors a checked function may return. Non-finite failures are reported
/// in the [`GradCheckReport`] instead of aborting the check.
pub trait CheckError: From<TensorError> {
    fn is_non_finite(&self) -> bool;
}

impl CheckError for TensorError {
    fn is_non_finite(&self) -> bool {
        matches!(self, TensorError::NonFinite { .. })
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks the gradient of the scalar `f` with respect to every input.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: CheckError,
{
    let all: Vec<usize> = (0..inputs.len()).collect();
    grad_check_wrt(f, inputs, &all, FD_STEP)
}

/// Like [`grad_check`] but only perturbs the inputs listed in `wrt`; the
/// others are passed as constants.
pub fn grad_check_wrt<F, E>(f: F, inputs: &[Tensor<f64>], wrt: &[usize], step: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: CheckError,
{
    let build = |g: &mut Graph<f64>, values: &[Tensor<f64>]| -> Result<(Var, Vec<Var>), E> {
        let vars = values
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), wrt.contains(&i)))
            .collect::<Result<Vec<_>>>()?;
        let out = f(g, &vars)?;
        Ok((out, vars))
    };

    let mut g = Graph::verifying();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        coordinates: 0,
    };
    let (out, vars) = match build(&mut g, inputs) {
        Ok(x) => x,
        Err(e) if e.is_non_finite() => {
            report.non_finite = Some(Coordinate { input: 0, index: 0 });
            return Ok(report);
        }
        Err(e) => return Err(e),
    };
    g.backward(out)?;
    let analytic: Vec<Option<Tensor<f64>>> = vars.iter().map(|&v| g.grad(v).cloned()).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<Option<f64>, E> {
        let mut g = Graph::verifying();
        match build(&mut g, values) {
            Ok((out, _)) => Ok(Some(g.value(out).item())),
            Err(e) if e.is_non_finite() => Ok(None),
            Err(e) => Err(e),
        }
    };

    let mut perturbed = inputs.to_vec();
    for &input in wrt {
        for index in 0..inputs[input].numel() {
            let coord = Coordinate { input, index };
            report.coordinates += 1;
            let x0 = inputs[input].data()[index];
            perturbed[input].data_mut()[index] = x0 + step;
            let plus = eval(&perturbed)?;
            perturbed[input].data_mut()[index] = x0 - step;
            let minus = eval(&perturbed)?;
            perturbed[input].data_mut()[index] = x0;

            let a = analytic[input].as_ref().map_or(0.0, |t| t.data()[index]);
            let (Some(p), Some(m)) = (plus, minus) else {
                report.non_finite.get_or_insert(coord);
                continue;
            };
            let numeric = (p - m) / (2.0 * step);
            if !a.is_finite() || !numeric.is_finite() {
                report.non_finite.get_or_insert(coord);
                continue;
            }
            let err = relative_error(a, numeric);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some(coord);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_zero_error() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.4, 2.0, 3.5, -1.0, 0.0]).unwrap();
        let report = grad_check(|g, v| g.sum(v[0]), &[x]).unwrap();
        assert_eq!(report.coordinates, 6);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(report.passed(GRAD_TOLERANCE));
    }

    #[test]
    fn relative_error_floor_is_one() {
        assert_eq!(relative_error(1e-7, 0.0), 1e-7);
        assert!((relative_error(200.0, 202.0) - 2.0 / 202.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_is_reported_with_coordinate() {
        let x = Tensor::from_f64(&[2], &[1.0, f64::MAX]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.scale(v[0], 2.0)?;
                g.sum(y)
            },
            &[x],
        )
        .unwrap();
        assert!(report.non_finite.is_some());
        assert!(!report.passed(GRAD_TOLERANCE));
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.2, 0.9]).unwrap();
        let clean = grad_check(
            |g, v| {
                let t = g.tanh(v[0])?;
                g.sum(t)
            },
            &[x.clone()],
        )
        .unwrap();
        assert!(clean.passed(GRAD_TOLERANCE));
        let broken = grad_check(
            |g, v| {
                g.inject_backward_fault(crate::autodiff::OpKind::Tanh);
                let t = g.tanh(v[0])?;
                g.sum(t)
            },
            &[x],
        )
        .unwrap();
        assert!(!broken.passed(GRAD_TOLERANCE));
    }
}
