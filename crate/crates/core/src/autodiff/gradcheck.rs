//! Central finite-difference verification of analytic gradients.

use super::{Graph, Tensor, TensorError, Var};

/// Pairs below this combined magnitude are skipped as numerically zero.
pub const MAGNITUDE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    grad_check_sampled(f, inputs, eps, usize::MAX)
}

/// Like [`grad_check`] but checks at most `max_coords` evenly spaced
/// coordinates per input.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], eps: f64, max_coords: usize) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::GradCheckEps(eps));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad_slice(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(g);

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item().ok_or_else(|| TensorError::NotScalar {
            shape: g.value(out).shape().to_vec(),
        })?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite("grad_check objective"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let count = n.min(max_coords);
        for j in 0..count {
            let idx = if count == n { j } else { j * n / count };
            let orig = input.data()[idx];
            work[k].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k][idx];
            report.checked += 1;
            if a.abs() + numeric.abs() <= MAGNITUDE_FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if report.worst.is_none() || rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((k, idx, a, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::from_fn(&[4], |i| i as f64);
        let report = grad_check(
            |g, v| {
                let c = g.constant(Tensor::scalar(3.0));
                let z = g.scale(v[0], 0.0)?;
                let s = g.sum(z)?;
                g.add(s, c)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_relative_error, 0.0);
        assert!(report.worst.is_none());
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::scalar(1.0);
        let r = grad_check(|g, v| g.sum(v[0]), &[x], 1e-2);
        assert!(matches!(r, Err(TensorError::GradCheckEps(_))));
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let x = Tensor::scalar(1000.0);
        let r = grad_check(
            |g, v| {
                let e = g.exp(v[0])?;
                g.sum(e)
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }
}
