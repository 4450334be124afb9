//! Finite-difference gradient checks (five-point central stencil).

use super::{Array, AutodiffError, ParameterStore, Tape, Var};

/// Relative error used throughout: `|a - c| / max(|a|, |c|, 1e-6)`. The floor
/// sits above the rounding noise of a five-point difference on O(10) values.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    if !analytic.is_finite() || !numeric.is_finite() {
        return f64::INFINITY;
    }
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Five-point central difference of `f` (evaluated at offsets from the
/// point) with spacing `h`.
fn five_point(mut f: impl FnMut(f64) -> Option<f64>, h: f64) -> Option<f64> {
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    Some((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h))
}

/// Checks the tape gradient of `f` at `point` against central differences.
///
/// `f` receives a fresh tape and a leaf holding the point (same shape as
/// `point`) and returns a scalar. Returns the maximum relative error over
/// coordinates; failures to build the graph count as `+inf`.
pub fn grad_check<F>(f: F, point: &Array, step: f64) -> f64
where
    F: Fn(&mut Tape, Var) -> Result<Var, AutodiffError>,
{
    let eval = |x: &Array| -> Option<f64> {
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let out = f(&mut t, v).ok()?;
        Some(t.value(out).item())
    };
    let analytic = {
        let mut t = Tape::new();
        let v = t.leaf(point.clone());
        let Ok(out) = f(&mut t, v) else { return f64::INFINITY };
        match t.backward(out) {
            Ok(g) => g.wrt_or_zeros(&t, v),
            Err(_) => return f64::INFINITY,
        }
    };
    let mut worst: f64 = 0.0;
    let mut x = point.clone();
    for i in 0..point.len() {
        let orig = x.data()[i];
        let numeric = five_point(
            |d| {
                x.data_mut()[i] = orig + d;
                eval(&x)
            },
            step,
        );
        x.data_mut()[i] = orig;
        let err = numeric.map_or(f64::INFINITY, |n| relative_error(analytic.data()[i], n));
        worst = worst.max(err);
    }
    worst
}

/// Same check over every scalar of a parameter store. `f` builds the scalar
/// objective from the store on the given tape.
pub fn grad_check_store<F>(store: &ParameterStore, f: F, step: f64) -> f64
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, AutodiffError>,
{
    let eval = |s: &ParameterStore| -> Option<f64> {
        let mut t = Tape::new();
        let out = f(&mut t, s).ok()?;
        Some(t.value(out).item())
    };
    let mut work = store.clone();
    work.zero_grads();
    {
        let mut t = Tape::new();
        let Ok(out) = f(&mut t, &work) else { return f64::INFINITY };
        match t.backward(out) {
            Ok(g) => g.accumulate_into(&mut work),
            Err(_) => return f64::INFINITY,
        }
    }
    let analytic: Vec<Array> = work.ids().map(|id| work.grad(id).clone()).collect();
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for i in 0..store.value(id).len() {
            let orig = work.value(id).data()[i];
            let numeric = five_point(
                |d| {
                    work.value_mut(id).data_mut()[i] = orig + d;
                    eval(&work)
                },
                step,
            );
            work.value_mut(id).data_mut()[i] = orig;
            let err = numeric.map_or(f64::INFINITY, |n| relative_error(analytic[id.0].data()[i], n));
            worst = worst.max(err);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_form() {
        // x^T A x with A = [[2,1],[1,3]]
        let a = Array::matrix(2, 2, vec![2.0, 1.0, 1.0, 3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let col = t.reshape(x, &[2, 1])?;
                let row = t.reshape(x, &[1, 2])?;
                let am = t.leaf(a.clone());
                let ax = t.matmul(am, col)?;
                let q = t.matmul(row, ax)?;
                Ok(t.sum(q))
            },
            &Array::vector(vec![0.7, -1.3]),
            1e-5,
        );
        assert!(err < 1e-6, "err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(|t, _x| Ok(t.scalar(4.0)), &Array::vector(vec![1.0, 2.0]), 1e-5);
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_reports_infinity() {
        assert_eq!(relative_error(f64::NAN, 1.0), f64::INFINITY);
        let err = grad_check(|t, x| t.log(x), &Array::vector(vec![1e-13]), 1e-5);
        assert_eq!(err, f64::INFINITY);
    }
}
