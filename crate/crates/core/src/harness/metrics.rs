use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// `10·log10(range(ref)² / MSE)`; `+inf` when the estimate is exact.
pub fn matrix_psnr(reference: &Matrix, estimate: &Matrix) -> Result<f64> {
    let mse = reference.mse(estimate)?;
    let (lo, hi) = reference
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = hi - lo;
    if range <= 0.0 || !range.is_finite() {
        return Err(Error::MetricUndefined("reference matrix is constant".into()));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

/// Median of finite values; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let r = Matrix::from_rows(&[[0.0, 1.0], [0.5, 0.25]]);
        assert_eq!(matrix_psnr(&r, &r).unwrap(), f64::INFINITY);
        let e = r.map(|x| x + 0.1);
        assert!((matrix_psnr(&r, &e).unwrap() - 20.0).abs() < 1e-9);
        let closer = r.map(|x| x + 0.05);
        assert!(matrix_psnr(&r, &closer).unwrap() > matrix_psnr(&r, &e).unwrap());
        let flat = Matrix::filled(2, 2, 3.0);
        assert!(matches!(matrix_psnr(&flat, &r), Err(Error::MetricUndefined(_))));
        assert!(matrix_psnr(&r, &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
