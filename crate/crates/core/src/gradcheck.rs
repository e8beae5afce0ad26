//! Central finite-difference checks of reverse-mode gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Denominator floor for the relative error, so that components which are
/// zero up to rounding are judged on an absolute scale.
pub const DEFAULT_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)` over the
    /// whole tensor.
    pub norm_rel_error: f64,
    /// Largest analytic gradient magnitude in the tensor.
    pub max_abs_grad: f64,
    /// Flat index of the element with the largest relative error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checks: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Relative error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the backward gradient of `f` with central differences for every
/// element of every parameter in `params`.
///
/// `f` must build a deterministic scalar loss on the given tape (dropout off).
pub fn grad_check<F>(params: &ParamStore, f: F, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_with_floor(params, f, step, tol, DEFAULT_FLOOR)
}

pub fn grad_check_with_floor<F>(
    params: &ParamStore,
    f: F,
    step: f64,
    tol: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let analytic = tape.backward(loss)?.params(&tape);
    drop(tape);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.scalar(loss))
    };

    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut checks = Vec::with_capacity(names.len());
    for name in names {
        let len = params.get(&name).map_or(0, |t| t.len());
        let zeros = vec![0.0; len];
        let grad = analytic.get(&name).map_or(zeros.as_slice(), |t| t.data());
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            norm_rel_error: 0.0,
            max_abs_grad: 0.0,
            worst_index: 0,
            passed: true,
        };
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for i in 0..len {
            let original = probe.get(&name).expect("present").data()[i];
            probe.get_mut(&name).expect("present").data_mut()[i] = original + step;
            let plus = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = original - step;
            let minus = eval(&probe)?;
            probe.get_mut(&name).expect("present").data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let rel = relative_error(grad[i], numeric, floor);
            check.max_abs_error = check.max_abs_error.max((grad[i] - numeric).abs());
            check.max_abs_grad = check.max_abs_grad.max(grad[i].abs());
            diff_sq += (grad[i] - numeric).powi(2);
            a_sq += grad[i] * grad[i];
            n_sq += numeric * numeric;
            if rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst_index = i;
            }
        }
        check.norm_rel_error = diff_sq.sqrt() / a_sq.sqrt().max(n_sq.sqrt()).max(floor);
        check.passed = check.norm_rel_error < tol;
        checks.push(check);
    }
    Ok(GradCheckReport { tol, checks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::matrix(2, 3, vec![0.3, -0.2, 0.5, 0.1, 0.7, -0.4]).unwrap())
            .unwrap();
        s.insert("b", Tensor::vector(vec![0.05, -0.1])).unwrap();
        s
    }

    fn input(tape: &mut Tape) -> Var {
        tape.constant(Tensor::vector(vec![0.9, -1.2, 0.4]))
    }

    #[test]
    fn linear_function_passes_tight_tolerance() {
        let report = grad_check(
            &store(),
            |tape, p| {
                let x = input(tape);
                let w = tape.param(p, "w")?;
                let b = tape.param(p, "b")?;
                let y = tape.affine(x, w, Some(b))?;
                Ok(tape.sum(y))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn tanh_function_passes() {
        let report = grad_check(
            &store(),
            |tape, p| {
                let x = input(tape);
                let w = tape.param(p, "w")?;
                let b = tape.param(p, "b")?;
                let y = tape.affine(x, w, Some(b))?;
                let h = tape.tanh_elem(y);
                tape.dot(h, h)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn corrupted_reverse_rule_is_caught_and_named() {
        fn cube(x: f64) -> f64 {
            x * x * x
        }
        // Correct derivative would be 3x².
        fn wrong(x: f64, _y: f64) -> f64 {
            2.0 * x
        }
        let report = grad_check(
            &store(),
            |tape, p| {
                let x = input(tape);
                let w = tape.param(p, "w")?;
                let b = tape.param(p, "b")?;
                let y = tape.affine(x, w, None)?;
                let y = tape.add(y, b)?;
                let c = tape.map_elem(y, cube, wrong);
                Ok(tape.sum(c))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(!report.passed());
        let failures = report.failures();
        assert!(failures.contains(&"w") && failures.contains(&"b"), "{failures:?}");
    }
}
