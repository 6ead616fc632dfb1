use rand::Rng;

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// One Laplace(0, scale) draw by inverse CDF: `−scale·sign(u)·ln(1 − 2|u|)`, `u ~ U(−½, ½)`.
pub fn laplace_draw<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    loop {
        let u: f64 = rng.random::<f64>() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        // u = −0.5 exactly would give ln(0)
        if tail > 0.0 {
            return -scale * u.signum() * tail.ln();
        }
    }
}

/// Matrix of i.i.d. Laplace(0, scale) samples. A zero scale gives exact zeros
/// without consuming randomness.
pub fn laplace_sample<R: Rng + ?Sized>(
    rng: &mut R,
    scale: f64,
    rows: usize,
    cols: usize,
) -> Result<DenseMatrix> {
    if !(scale >= 0.0) || !scale.is_finite() {
        return Err(Error::Domain(format!(
            "Laplace scale must be a finite non-negative number, got {scale}"
        )));
    }
    if scale == 0.0 {
        return Ok(DenseMatrix::zeros(rows, cols));
    }
    Ok(DenseMatrix::from_fn(rows, cols, |_, _| laplace_draw(rng, scale)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_scale_is_zero_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(laplace_sample(&mut rng, 0.0, 3, 4).unwrap(), DenseMatrix::zeros(3, 4));
    }

    #[test]
    fn negative_scale_is_domain_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            laplace_sample(&mut rng, -0.1, 1, 1),
            Err(Error::Domain(_))
        ));
        assert!(laplace_sample(&mut rng, f64::NAN, 1, 1).is_err());
    }

    #[test]
    fn fixed_seed_reproduces_bytes() {
        let a = laplace_sample(&mut ChaCha8Rng::seed_from_u64(42), 0.2, 6, 5).unwrap();
        let b = laplace_sample(&mut ChaCha8Rng::seed_from_u64(42), 0.2, 6, 5).unwrap();
        let bits = |m: &DenseMatrix| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn million_draws_match_mean_and_variance() {
        let scale = 0.3;
        let n = 1_000_000;
        let m = laplace_sample(&mut ChaCha8Rng::seed_from_u64(7), scale, n, 1).unwrap();
        let mean = m.sum() / n as f64;
        let var = m.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "mean {mean}");
        let expect = 2.0 * scale * scale;
        assert!((var - expect).abs() / expect < 0.05, "variance {var}");
    }
}
