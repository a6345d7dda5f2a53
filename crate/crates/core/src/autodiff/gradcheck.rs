use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares the reverse-mode gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|)`. The function is rebuilt on a
/// fresh graph for every evaluation, so it must be deterministic.
pub fn finite_difference_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    let analytic = g.backward(out)?.get_or_zeros(xv, x.numel());

    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::contract(format!(
            "finite-difference check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -1.2]).unwrap();
        let err = finite_difference_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &x,
            1e-6,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::vector(vec![0.3, -1.2]).unwrap();
        let res = finite_difference_check(|g, v| g.square(v), &x, 1e-6);
        assert!(matches!(res, Err(Error::Contract(_))));
    }
}
