use super::{Gradients, ParameterStore};
use crate::error::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-parameter error `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`.
    pub max_relative_error: f64,
    pub worst_parameter: Option<String>,
    /// Largest element-wise `|a − n| / max(|a|, |n|, 1e-8)`.
    pub max_element_error: f64,
    /// Parameter path and flat element index where the element maximum occurred.
    pub worst: Option<(String, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest absolute disagreement over all elements.
    pub max_abs_error: f64,
    pub checked: usize,
}

/// Relative error used by the gradient check: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the gradients returned by `loss_fn` against central finite
/// differences for every element of every parameter.
///
/// `loss_fn` must be deterministic; it is evaluated twice at the unperturbed
/// parameters and the check fails if the two losses differ.
pub fn grad_check<F>(params: &ParameterStore, epsilon: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(f64, Gradients)>,
{
    let (_, grads) = loss_fn(params)?;
    grad_check_values(params, epsilon, &grads, |s| Ok(loss_fn(s)?.0))
}

/// As [`grad_check`], with the analytic gradients supplied up front so the
/// perturbed evaluations only need the loss value.
pub fn grad_check_values<F>(
    params: &ParameterStore,
    epsilon: f64,
    grads: &Gradients,
    value_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    let base = value_fn(params)?;
    let again = value_fn(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonFinite(format!(
            "loss is not deterministic: {base} then {again}"
        )));
    }
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss is {base}")));
    }

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: None,
        max_element_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        max_abs_error: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        let mut numeric = Vec::with_capacity(n);
        for k in 0..n {
            let original = params.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = original + epsilon;
            let plus = value_fn(&work)?;
            work.value_mut(id).data_mut()[k] = original - epsilon;
            let minus = value_fn(&work)?;
            work.value_mut(id).data_mut()[k] = original;
            numeric.push((plus - minus) / (2.0 * epsilon));
        }
        let zeros = vec![0.0; n];
        let analytic = grads.get(id).unwrap_or(&zeros);
        let name = &params.param(id).name;
        for (k, (&a, &num)) in analytic.iter().zip(&numeric).enumerate() {
            let err = relative_error(a, num);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - num).abs());
            if report.worst.is_none() || err > report.max_element_error {
                report.max_element_error = err;
                report.worst = Some((name.clone(), k));
                report.analytic = a;
                report.numeric = num;
            }
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, b)| a - b));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied())).max(1e-8);
        let err = diff / scale;
        if report.worst_parameter.is_none() || err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst_parameter = Some(name.clone());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::*;
    use crate::numerics::{Tape, Tensor};

    fn affine_store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_rows(&[[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]).unwrap())
            .unwrap();
        s.insert("b", Tensor::row_vector(vec![0.05, -0.1])).unwrap();
        s
    }

    /// ½‖W x + b − y‖²
    fn quadratic(store: &ParameterStore) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, -2.0, 0.5]));
        let w = tape.param_by_name(store, "w")?;
        let b = tape.param_by_name(store, "b")?;
        let y = tape.linear(x, w, Some(b))?;
        let loss = tape.sse(y, vec![0.2, -0.3], vec![1.0, 1.0])?;
        let half = tape.scale(loss, 0.5);
        Ok((tape.scalar(half), tape.backward(&[(half, 1.0)], store.len())))
    }

    #[test]
    fn quadratic_affine_loss_is_tight() {
        let r = grad_check(&affine_store(), 1e-5, quadratic).unwrap();
        assert_eq!(r.checked, 8);
        assert!(r.max_relative_error < 1e-7, "{r:?}");
        assert!(r.max_element_error < 1e-7, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = grad_check(&affine_store(), 1e-5, |s| {
            let (l, mut g) = quadratic(s)?;
            let id = s.id("w")?;
            g.get_mut(id).unwrap()[2] *= 1.5;
            Ok((l, g))
        })
        .unwrap();
        assert!(r.max_relative_error > 1e-2);
        assert!(r.max_element_error > 0.3);
        assert_eq!(r.worst, Some(("w".to_string(), 2)));
        assert_eq!(r.worst_parameter.as_deref(), Some("w"));
    }

    #[test]
    fn nondeterministic_loss_is_an_error() {
        let calls = Cell::new(0u32);
        let res = grad_check(&affine_store(), 1e-5, |s| {
            calls.set(calls.get() + 1);
            let (l, g) = quadratic(s)?;
            Ok((l + calls.get() as f64 * 1e-9, g))
        });
        assert!(res.is_err());
    }
}
