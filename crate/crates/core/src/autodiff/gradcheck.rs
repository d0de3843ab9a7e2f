use serde::Serialize;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// Outcome of comparing taped gradients with finite differences.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index over all inputs concatenated in order.
    pub worst_coordinate: usize,
    /// Taped and numeric derivative at `worst_coordinate`.
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub eps: f64,
    pub coordinates: usize,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, point: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::NotScalar { shape: v.shape() });
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((tape, vars, out))
}

fn value_at<F>(f: &F, point: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, point)?;
    Ok(tape.value(out).item())
}

/// Checks every coordinate of every input tensor of the scalar function
/// `f`, which receives the inputs as tape leaves. The numeric side is the
/// five-point central stencil with step `eps`.
pub fn grad_check<F>(f: F, point: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(invalid(format!("eps must be > 0, got {eps}")));
    }
    let (tape, vars, out) = evaluate(&f, point)?;
    let grads = tape.backward(out)?;

    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        eps,
        coordinates: 0,
    };
    let mut flat = 0;
    for (t, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).data().to_vec();
        for (i, a) in analytic.into_iter().enumerate() {
            let x0 = point[t].data()[i];
            let mut at = |h: f64| {
                probe[t].data_mut()[i] = x0 + h;
                value_at(&f, &probe)
            };
            let (m2, m1, p1, p2) = (at(-2.0 * eps)?, at(-eps)?, at(eps)?, at(2.0 * eps)?);
            probe[t].data_mut()[i] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps);
            let err = relative_error(a, numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_coordinate = flat;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
            flat += 1;
        }
    }
    report.coordinates = flat;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square() {
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                t.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn linear_is_exact_up_to_rounding() {
        let w = Tensor::row(&[0.5, -2.0, 3.0]);
        let r = grad_check(
            move |t, v| {
                let c = t.leaf(w.clone());
                let p = t.mul(v[0], c)?;
                t.sum(p)
            },
            &[Tensor::row(&[1.0, 2.0, 3.0])],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn rejects_bad_eps() {
        let r = grad_check(|t, v| t.sum(v[0]), &[Tensor::scalar(1.0)], 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn reports_non_finite_value() {
        let r = grad_check(|t, v| t.exp(v[0]), &[Tensor::scalar(800.0)], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
