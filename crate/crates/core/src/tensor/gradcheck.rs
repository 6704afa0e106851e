use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor.
pub fn grad_check<F>(f: F, x0: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let report = grad_check_many(
        |tape, xs| f(tape, xs[0]),
        std::slice::from_ref(x0),
        eps,
        None,
    )?;
    Ok(report.max_rel_error)
}

/// Multi-input variant. `coords` optionally restricts the check to selected
/// `(input, flat index)` pairs; otherwise every coordinate is perturbed.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let loss = f(&tape, &vars)?;
        tape.backward(loss)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, x)| v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = perturbed.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, x)| (0..x.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / numeric.abs().max(1.0);
        worst = if rel.is_nan() { f64::NAN } else { worst.max(rel) };
        if worst.is_nan() {
            break;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        coords_checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x0 = Tensor::row(vec![0.3, -1.0, 2.5, 7.0]);
        let err = grad_check(|_, x| Ok(x.sum()), &x0, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn corrupted_adjoint_is_detected() {
        let x0 = Tensor::row(vec![0.3, -1.0, 2.5]);
        let err = grad_check(
            |_, x| Ok(x.custom_unary(|v| v * v, |v| 3.0 * v).sum()),
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
