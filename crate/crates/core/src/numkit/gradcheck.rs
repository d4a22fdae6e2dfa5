use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of the relative error, so coordinates whose true
/// gradient is zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-6;

/// Per-coordinate comparison of a taped gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub passed: bool,
}

/// Checks `∂f/∂x` at `x` with step [`FD_STEP`].
///
/// `f` must build a scalar from its input on the given graph; it is called
/// once for the analytic gradient and twice per coordinate for the numeric one.
pub fn grad_check<F>(f: F, x: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_with(f, x, FD_STEP, tol)
}

pub fn grad_check_with<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    scalar_of(&g, out)?;
    let analytic = g
        .backward(out)?
        .get(v)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * h));
    }

    let (mut max_rel_error, mut worst_index) = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let rel = relative_error(*a, *n);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_rel_error,
        worst_index,
        passed: max_rel_error <= tol,
    })
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let r = grad_check(|g, v| g.sum(v), &x, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.analytic.iter().all(|&a| a == 1.0));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn sigmoid_sum_at_zero() {
        let x = Tensor::zeros(&[4]);
        let r = grad_check(
            |g, v| {
                let s = g.sigmoid(v)?;
                g.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(r.passed);
        for (a, n) in r.analytic.iter().zip(&r.numeric) {
            assert!((a - 0.25).abs() < 1e-15);
            assert!((n - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(grad_check(|_, v| Ok(v), &x, 1e-4), Err(Error::Contract(_))));
    }
}
