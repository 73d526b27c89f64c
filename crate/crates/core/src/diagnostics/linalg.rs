//! Small dense 64-bit linear algebra for the analyses.

/// Row-major `n × d` matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Column means.
    pub fn col_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (a, v) in m.iter_mut().zip(self.row(i)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.rows as f64);
        m
    }

    /// Copy with column means subtracted.
    pub fn centered(&self) -> Matrix {
        let m = self.col_means();
        let mut out = self.clone();
        for i in 0..self.rows {
            for (v, mu) in out.data[i * self.cols..(i + 1) * self.cols].iter_mut().zip(&m) {
                *v -= mu;
            }
        }
        out
    }
}

/// Thin singular value decomposition `A = U Σ Vᵀ` restricted to what the
/// diagnostics need.
#[derive(Clone, Debug)]
pub struct Svd {
    /// Descending, length `cols`.
    pub sigma: Vec<f64>,
    /// Right singular vectors as rows: `v[k]` pairs with `sigma[k]`.
    pub v: Vec<Vec<f64>>,
}

/// One-sided Jacobi: rotates column pairs of A until mutually orthogonal;
/// the final column norms are the singular values.
pub fn svd(a: &Matrix) -> Svd {
    let (n, d) = (a.rows, a.cols);
    // column-major working copy
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a.get(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..d).map(|j| (0..d).map(|i| f64::from(u8::from(i == j))).collect()).collect();
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for (x, y) in cols[p].iter().zip(&cols[q]) {
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                let (lo, hi) = v.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut idx: Vec<usize> = (0..d).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    idx.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    Svd {
        sigma: idx.iter().map(|&i| norms[i]).collect(),
        v: idx.iter().map(|&i| v[i].clone()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reconstructs_av_equals_u_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Matrix::new(7, 4, (0..28).map(|_| rng.random_range(-1.0..1.0)).collect());
        let s = svd(&a);
        // ‖A v_k‖ = σ_k and the v_k are orthonormal
        for k in 0..4 {
            let av: Vec<f64> = (0..7)
                .map(|i| a.row(i).iter().zip(&s.v[k]).map(|(x, y)| x * y).sum())
                .collect();
            let n = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - s.sigma[k]).abs() < 1e-12);
            for l in 0..4 {
                let dot: f64 = s.v[k].iter().zip(&s.v[l]).map(|(x, y)| x * y).sum();
                assert!((dot - f64::from(u8::from(k == l))).abs() < 1e-12);
            }
        }
    }
}
