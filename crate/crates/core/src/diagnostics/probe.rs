use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::linalg::Matrix;
use crate::error::{Error, Result};

/// Linear-probe protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub train_fraction: f64,
    /// Ridge penalty on the weights (not the bias).
    pub l2: f64,
    /// Stop once the loss improves by less than this.
    pub tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            train_fraction: 0.7,
            l2: 1e-4,
            tolerance: 1e-6,
            max_iter: 5000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub iterations: usize,
    pub train_size: usize,
    pub test_size: usize,
}

struct Softmax<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    classes: usize,
    l2: f64,
}

impl Softmax<'_> {
    fn dim(&self) -> usize {
        self.x[0].len() + 1
    }

    /// Loss and gradient for weights laid out class-major with the bias last.
    fn eval(&self, w: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (d, k) = (self.dim(), self.classes);
        let mut loss = 0.0;
        let mut g = vec![0.0; w.len()];
        let mut logits = vec![0.0; k];
        for (xi, &yi) in self.x.iter().zip(self.y) {
            for (c, l) in logits.iter_mut().enumerate() {
                let wc = &w[c * d..(c + 1) * d];
                *l = wc[d - 1] + xi.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            loss += z.ln() + m - logits[yi];
            for c in 0..k {
                let p = (logits[c] - m).exp() / z - f64::from(u8::from(c == yi));
                let gc = &mut g[c * d..(c + 1) * d];
                for (gj, xj) in gc.iter_mut().zip(xi) {
                    *gj += p * xj;
                }
                gc[d - 1] += p;
            }
        }
        let n = self.x.len() as f64;
        loss /= n;
        g.iter_mut().for_each(|v| *v /= n);
        for c in 0..k {
            for j in 0..d - 1 {
                let wj = w[c * d + j];
                loss += 0.5 * self.l2 * wj * wj;
                g[c * d + j] += self.l2 * wj;
            }
        }
        if let Some(out) = grad {
            out.copy_from_slice(&g);
        }
        loss
    }

    fn predict(&self, w: &[f64], xi: &[f64]) -> usize {
        let d = self.dim();
        let score = |c: usize| {
            let wc = &w[c * d..(c + 1) * d];
            wc[d - 1] + xi.iter().zip(wc).map(|(a, b)| a * b).sum::<f64>()
        };
        (0..self.classes)
            .max_by(|&a, &b| score(a).total_cmp(&score(b)).then(b.cmp(&a)))
            .unwrap()
    }
}

/// Multinomial logistic regression on frozen features by full-batch
/// gradient descent with backtracking, evaluated on a seeded held-out split.
pub fn linear_probe(features: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = features.rows;
    if labels.len() != n || n < 4 {
        return Err(Error::shape(
            "linear probe",
            format!("{n} feature rows, {} labels (need at least 4)", labels.len()),
        ));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let mut present = vec![false; classes];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::Contract("linear probe needs at least two classes".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(2, n - 1);
    let (tr, te) = idx.split_at(n_train);
    let train_labels: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    if train_labels.iter().all(|&l| l == train_labels[0]) {
        return Err(Error::Contract("probe training split holds a single class".into()));
    }
    // standardize with training statistics
    let d = features.cols;
    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in tr {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n_train as f64;
        }
    }
    for &i in tr {
        for ((s, v), m) in sd.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n_train as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
    let prep = |i: usize| -> Vec<f64> {
        features.row(i).iter().zip(&mean).zip(&sd).map(|((v, m), s)| (v - m) / s).collect()
    };
    let xtr: Vec<Vec<f64>> = tr.iter().map(|&i| prep(i)).collect();
    let xte: Vec<Vec<f64>> = te.iter().map(|&i| prep(i)).collect();
    let model = Softmax {
        x: &xtr,
        y: &train_labels,
        classes,
        l2: cfg.l2,
    };
    let mut w = vec![0.0; classes * model.dim()];
    let mut g = vec![0.0; w.len()];
    let mut loss = model.eval(&w, Some(&mut g));
    let mut step = 1.0;
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let gg: f64 = g.iter().map(|v| v * v).sum();
        if gg == 0.0 {
            break;
        }
        let mut trial;
        let mut new_loss;
        loop {
            trial = w.iter().zip(&g).map(|(a, b)| a - step * b).collect::<Vec<f64>>();
            new_loss = model.eval(&trial, None);
            if new_loss <= loss - 0.5 * step * gg || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        w = trial;
        let delta = loss - new_loss;
        loss = model.eval(&w, Some(&mut g));
        step = (step * 2.0).min(1e3);
        if delta.abs() < cfg.tolerance {
            break;
        }
    }
    let acc = |xs: &[Vec<f64>], ids: &[usize]| -> f64 {
        let hit = xs
            .iter()
            .zip(ids)
            .filter(|(x, &i)| model.predict(&w, x) == labels[i])
            .count();
        hit as f64 / xs.len() as f64
    };
    Ok(ProbeResult {
        accuracy: acc(&xte, te),
        train_accuracy: acc(&xtr, tr),
        iterations,
        train_size: tr.len(),
        test_size: te.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64, n: usize, sep: f64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            y.push(c);
            for j in 0..3 {
                let centre = if j == 0 { sep * (c as f64 - 0.5) } else { 0.0 };
                data.push(centre + rng.random_range(-0.5..0.5));
            }
        }
        (Matrix::new(n, 3, data), y)
    }

    #[test]
    fn separable_blobs() {
        let (x, y) = blobs(1, 80, 4.0);
        let r = linear_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.train_size + r.test_size, 80);
    }

    #[test]
    fn deterministic() {
        let (x, y) = blobs(2, 60, 0.5);
        let c = ProbeConfig::default();
        assert_eq!(linear_probe(&x, &y, &c).unwrap(), linear_probe(&x, &y, &c).unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let (x, _) = blobs(3, 20, 1.0);
        assert!(linear_probe(&x, &[0; 20], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = blobs(4, 12, 1.0);
        let xs: Vec<Vec<f64>> = (0..12).map(|i| x.row(i).to_vec()).collect();
        let m = Softmax {
            x: &xs,
            y: &y,
            classes: 3,
            l2: 0.1,
        };
        let w: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = vec![0.0; 12];
        m.eval(&w, Some(&mut g));
        for k in 0..12 {
            let mut a = w.clone();
            let mut b = w.clone();
            a[k] += 1e-6;
            b[k] -= 1e-6;
            let num = (m.eval(&a, None) - m.eval(&b, None)) / 2e-6;
            assert!((num - g[k]).abs() < 1e-7);
        }
    }
}
