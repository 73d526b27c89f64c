use super::linalg::{svd, Matrix};
use crate::error::{Error, Result};

/// Leading principal directions of a centered embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `n × k` scores.
    pub projection: Matrix,
    /// Unit loadings, one per component; the first entry above 1e-12 in
    /// magnitude is positive.
    pub components: Vec<Vec<f64>>,
    /// Sample variance captured by each component.
    pub variance: Vec<f64>,
}

pub fn pca_project(x: &Matrix, k: usize) -> Result<Pca> {
    if x.rows <= k || k == 0 || k > x.cols {
        return Err(Error::shape(
            "pca",
            format!("{} rows of width {} cannot give {k} components", x.rows, x.cols),
        ));
    }
    let c = x.centered();
    let s = svd(&c);
    let mut components = Vec::with_capacity(k);
    for v in s.v.iter().take(k) {
        let lead = v.iter().find(|a| a.abs() > 1e-12).copied().unwrap_or(1.0);
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        components.push(v.iter().map(|a| a * sign).collect::<Vec<f64>>());
    }
    let mut proj = Vec::with_capacity(x.rows * k);
    for i in 0..x.rows {
        for comp in &components {
            proj.push(c.row(i).iter().zip(comp).map(|(a, b)| a * b).sum());
        }
    }
    let variance = s.sigma.iter().take(k).map(|v| v * v / (x.rows as f64 - 1.0)).collect();
    Ok(Pca {
        projection: Matrix::new(x.rows, k, proj),
        components,
        variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn points_on_a_line() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let p = pca_project(&Matrix::from_rows(&rows), 2).unwrap();
        assert!(p.variance[1] < 1e-20);
        for i in 0..10 {
            assert!(p.projection.get(i, 1).abs() < 1e-10);
        }
    }

    #[test]
    fn sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::new(30, 5, (0..150).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = pca_project(&x, 2).unwrap();
        for c in &p.components {
            assert!(c.iter().find(|v| v.abs() > 1e-12).unwrap() > &0.0);
        }
        let mut neg = x.clone();
        neg.data.iter_mut().for_each(|v| *v = -*v);
        assert_eq!(pca_project(&neg, 2).unwrap().components.len(), 2);
    }

    #[test]
    fn dot_products_match_gram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, d, k) = (25, 6, 2);
        let x = Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let p = pca_project(&x, k).unwrap();
        let c = x.centered();
        let cm = nalgebra::DMatrix::from_row_slice(n, d, &c.data);
        let eig = (cm.transpose() * &cm).symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let basis = nalgebra::DMatrix::from_fn(d, k, |r, j| eig.eigenvectors[(r, order[j])]);
        let sub = &cm * &basis;
        let oracle = &sub * sub.transpose();
        for i in 0..n {
            for j in 0..n {
                let ours: f64 = p.projection.row(i).iter().zip(p.projection.row(j)).map(|(a, b)| a * b).sum();
                assert!((ours - oracle[(i, j)]).abs() < 1e-8);
            }
        }
    }
}
