use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Compare an analytic gradient against central differences. `f` returns the
/// value and the analytic gradient at its argument. Returns the maximum over
/// coordinates of |analytic − numeric| / max(1e-8, |numeric|).
pub fn grad_check<T, F>(f: F, x: &[T], eps: T) -> Result<T>
where
    T: Scalar,
    F: Fn(&[T]) -> Result<(T, Vec<T>)>,
{
    let (v0, analytic) = f(x)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite("function value".into()));
    }
    if analytic.len() != x.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} inputs",
            analytic.len(),
            x.len()
        )));
    }
    let floor = T::lit(1e-8);
    let two_eps = eps + eps;
    let mut probe = x.to_vec();
    let mut worst = T::zero();
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let (hi, _) = f(&probe)?;
        probe[i] = x[i] - eps;
        let (lo, _) = f(&probe)?;
        probe[i] = x[i];
        let numeric = (hi - lo) / two_eps;
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(Error::NonFinite(format!("gradient coordinate {i}")));
        }
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(floor);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sq(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()))
    }

    #[test]
    fn quadratic_is_exact() {
        let mut rng = crate::rng::rng_from_seed(4);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
        assert!(grad_check(sq, &x, 1e-4).unwrap() < 1e-7);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = [0.3f64, -1.2, 0.8];
        let doubled = |x: &[f64]| {
            let (v, g) = sq(x)?;
            Ok((v, g.iter().map(|g| 2.0 * g).collect()))
        };
        let err = grad_check(doubled, &x, 1e-4).unwrap();
        assert!((err - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_is_an_error() {
        let f = |x: &[f64]| Ok((x[0].ln(), vec![1.0 / x[0]]));
        assert!(grad_check(f, &[-1.0], 1e-4).is_err());
    }
}
