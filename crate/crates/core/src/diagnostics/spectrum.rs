use super::linalg::{svd, Matrix};
use crate::error::{Error, Result};

/// Normalized singular-value spectrum of an embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumReport {
    /// Descending, scaled so the largest is 1 (all zero when degenerate).
    pub values: Vec<f64>,
    pub effective_rank: f64,
    pub count: usize,
    pub width: usize,
    pub label: String,
    /// Every row was identical after centering.
    pub degenerate: bool,
}

/// Exponentiated entropy of `σ_k / Σσ`.
pub fn effective_rank(values: &[f64]) -> Result<f64> {
    let total: f64 = values.iter().filter(|v| **v > 0.0).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Contract(
            "effective rank needs at least one positive singular value".into(),
        ));
    }
    let h: f64 = values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Singular values of the rows of `x` (optionally mean-centered first),
/// normalized by the largest.
pub fn singular_spectrum(x: &Matrix, center: bool, label: &str) -> Result<SpectrumReport> {
    if x.rows < 2 || x.cols == 0 {
        return Err(Error::shape(
            "singular spectrum",
            format!("need at least 2 rows, got {}x{}", x.rows, x.cols),
        ));
    }
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("singular spectrum input".into()));
    }
    let a = if center { x.centered() } else { x.clone() };
    let s = svd(&a);
    let top = s.sigma[0];
    let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let degenerate = top <= 1e-12 * scale.max(f64::MIN_POSITIVE) || top == 0.0;
    let (values, effective_rank) = if degenerate {
        (vec![0.0; s.sigma.len()], 1.0)
    } else {
        let v: Vec<f64> = s.sigma.iter().map(|v| v / top).collect();
        let r = effective_rank(&v)?;
        (v, r)
    };
    Ok(SpectrumReport {
        values,
        effective_rank,
        count: x.rows,
        width: x.cols,
        label: label.to_string(),
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn effective_rank_examples() {
        assert!((effective_rank(&[1.0, 0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((effective_rank(&[1.0; 4]).unwrap() - 4.0).abs() < 1e-12);
        let (p, q): (f64, f64) = (2.0 / 3.0, 1.0 / 3.0);
        let oracle = (-(p * p.ln() + q * q.ln())).exp();
        assert!((effective_rank(&[1.0, 0.5]).unwrap() - oracle).abs() < 1e-12);
        assert!((oracle - 1.8899).abs() < 1e-4);
        assert!(effective_rank(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn rank_one_rows() {
        let v = [1.0, -2.0, 0.5];
        let rows: Vec<Vec<f64>> = (1..6).map(|c| v.iter().map(|x| x * c as f64).collect()).collect();
        let r = singular_spectrum(&Matrix::from_rows(&rows), true, "r1").unwrap();
        assert!((r.values[0] - 1.0).abs() < 1e-15);
        assert!(r.values[1..].iter().all(|v| *v < 1e-12));
        assert!((r.effective_rank - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identical_rows_are_degenerate() {
        let rows = vec![vec![1.0, 2.0]; 4];
        let r = singular_spectrum(&Matrix::from_rows(&rows), true, "d").unwrap();
        assert!(r.degenerate);
        assert_eq!(r.effective_rank, 1.0);
    }

    #[test]
    fn orthonormal_basis() {
        let d = 6;
        let rows: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let m = Matrix::from_rows(&rows);
        let raw = singular_spectrum(&m, false, "raw").unwrap();
        assert!((raw.effective_rank - d as f64).abs() < 1e-6);
        // centering removes the mean direction
        let c = singular_spectrum(&m, true, "c").unwrap();
        assert!((c.effective_rank - (d - 1) as f64).abs() < 1e-6);
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::new(20, 5, (0..100).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut y = x.clone();
        y.data.iter_mut().for_each(|v| *v *= 37.5);
        let a = singular_spectrum(&x, true, "").unwrap();
        let b = singular_spectrum(&y, true, "").unwrap();
        for (p, q) in a.values.iter().zip(&b.values) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(a.values.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn matches_gram_eigenvalues() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (50, 16);
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let s = svd(&x);
        let xm = nalgebra::DMatrix::from_row_slice(n, d, &x.data);
        let gram = xm.transpose() * &xm;
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in s.sigma.iter().zip(&eig) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}
