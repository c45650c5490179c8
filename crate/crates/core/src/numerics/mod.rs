//! Dense matrices, nonlinearities, seeded randomness and reverse-mode AD.

mod matrix;
mod params;
mod rng;
pub mod tape;

pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, keyed_seed, mix64, Rng};
pub use tape::{Adjoints, Tape, Var};

use crate::error::{Error, Result};

/// Numerically stable softmax of a single vector.
pub fn softmax_row(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of empty vector".into()));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::Domain(format!("softmax input {bad} is not finite")));
    }
    let mut out = v.to_vec();
    tape::softmax_in_place(&mut out);
    Ok(out)
}

/// `log(1 + exp(x))`, evaluated as `max(x, 0) + log1p(exp(-|x|))` so neither
/// tail overflows.
pub fn softplus(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("softplus input {x} is not finite")));
    }
    Ok(softplus_unchecked(x))
}

#[inline]
pub(crate) fn softplus_unchecked(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Central-difference gradient `(f(p + h) − f(p − h)) / 2h` for every scalar
/// of every parameter matrix. `loss_fn` must be deterministic.
pub fn finite_diff_gradient<E>(
    mut loss_fn: impl FnMut(&[Matrix]) -> std::result::Result<f64, E>,
    params: &[Matrix],
    h: f64,
) -> std::result::Result<Vec<Matrix>, E> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut work: Vec<Matrix> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let (rows, cols) = params[p].shape();
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = params[p].as_slice()[i];
            work[p].as_mut_slice()[i] = orig + h;
            let plus = loss_fn(&work)?;
            work[p].as_mut_slice()[i] = orig - h;
            let minus = loss_fn(&work)?;
            work[p].as_mut_slice()[i] = orig;
            g.as_mut_slice()[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Relative error `|a − b| / max(|b|, floor)` used by gradient checks.
pub fn relative_error(analytic: f64, reference: f64, floor: f64) -> f64 {
    (analytic - reference).abs() / reference.abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let third = softmax_row(&[1.0, 1.0, 1.0]).unwrap();
        for p in third {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax_row(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(softmax_row(&[]), Err(Error::Domain(_))));
        assert!(matches!(softmax_row(&[1.0, f64::NAN]), Err(Error::Domain(_))));
        assert!(matches!(softmax_row(&[f64::INFINITY]), Err(Error::Domain(_))));
    }

    #[test]
    fn softplus_examples() {
        assert!((softplus(0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0).unwrap() - 50.0).abs() < 1e-12);
        let tail = softplus(-50.0).unwrap();
        assert!(((tail - (-50f64).exp()) / (-50f64).exp()).abs() < 1e-6);
        assert!(softplus(f64::NAN).is_err());
        assert!(softplus(800.0).unwrap().is_finite());
    }

    #[test]
    fn finite_diff_examples() {
        let x = [Matrix::scalar(3.0)];
        let g = finite_diff_gradient(|p: &[Matrix]| Ok::<_, ()>(p[0].get(0, 0).powi(2)), &x, 1e-5)
            .unwrap();
        assert!((g[0].get(0, 0) - 6.0).abs() < 1e-8);
        let params = [Matrix::filled(2, 3, 1.5), Matrix::scalar(-2.0)];
        let g = finite_diff_gradient(|_: &[Matrix]| Ok::<_, ()>(4.2), &params, 1e-5).unwrap();
        assert!(g.iter().all(|m| m.as_slice().iter().all(|&v| v == 0.0)));
        assert_eq!(g[0].shape(), (2, 3));
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(v in prop::collection::vec(-700.0f64..700.0, 1..40)) {
            let p = softmax_row(&v).unwrap();
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn softplus_is_positive_and_above_relu(x in -700.0f64..700.0) {
            let y = softplus(x).unwrap();
            prop_assert!(y > 0.0);
            prop_assert!(y >= x.max(0.0));
        }
    }
}
