use super::linalg::Matrix;
use super::ssim::{ssim, SsimConfig};
use crate::data::{NormStats, Sample};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelState};
use crate::numcore::{Float, Tensor};

/// Input-space heterogeneity against embedding agreement for one patch.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentPoint {
    pub sample: String,
    pub patch: usize,
    /// SSIM of the optical luminance and SAR patches.
    pub ssim: f64,
    /// Cosine of the two modality tokens at this patch.
    pub cosine: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn crop(img: &Matrix, y0: usize, x0: usize, p: usize) -> Matrix {
    let mut d = Vec::with_capacity(p * p);
    for y in y0..y0 + p {
        d.extend_from_slice(&img.data[y * img.cols + x0..y * img.cols + x0 + p]);
    }
    Matrix::new(p, p, d)
}

/// Pairs per-patch SSIM of two single-channel images with the cosine of
/// row-aligned token matrices (`M × D`, row-major grid order).
pub fn patch_alignment(
    sample: &str,
    luminance: &Matrix,
    sar: &Matrix,
    tokens_optical: &Matrix,
    tokens_sar: &Matrix,
    patch: usize,
    cfg: &SsimConfig,
) -> Result<Vec<AlignmentPoint>> {
    let (gh, gw) = (luminance.rows / patch, luminance.cols / patch);
    if (luminance.rows, luminance.cols) != (sar.rows, sar.cols)
        || gh * patch != luminance.rows
        || gw * patch != luminance.cols
        || tokens_optical.rows != gh * gw
        || tokens_sar.rows != gh * gw
        || tokens_optical.cols != tokens_sar.cols
    {
        return Err(Error::shape(
            "alignment",
            format!(
                "images {}x{} / {}x{}, patch {patch}, tokens {}x{} / {}x{}",
                luminance.rows,
                luminance.cols,
                sar.rows,
                sar.cols,
                tokens_optical.rows,
                tokens_optical.cols,
                tokens_sar.rows,
                tokens_sar.cols
            ),
        ));
    }
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh * gw {
        let (y0, x0) = ((i / gw) * patch, (i % gw) * patch);
        out.push(AlignmentPoint {
            sample: sample.to_string(),
            patch: i,
            ssim: ssim(&crop(luminance, y0, x0, patch), &crop(sar, y0, x0, patch), cfg)?,
            cosine: cosine(tokens_optical.row(i), tokens_sar.row(i)),
        });
    }
    Ok(out)
}

pub(crate) fn to_matrix<T: Float>(t: &Tensor<T>) -> Matrix {
    let (r, c) = t.rows_cols();
    Matrix::new(r, c, t.to_f64_vec())
}

/// Plane of a `[1 × H × W]` image, or the luminance of a `[3 × H × W]` one.
pub fn gray_plane(img: &Tensor<f32>) -> Matrix {
    let s = img.shape();
    let data = if s[0] == 3 {
        crate::data::render::luminance(img)
    } else {
        img.to_f64_vec()
    };
    Matrix::new(s[1], s[2], data)
}

/// Dense unmasked encoder tokens of both modalities, compared per patch
/// against raw-pixel SSIM. Only paired samples contribute.
pub fn alignment_vs_heterogeneity(
    model: &ModelState<f32>,
    samples: &[Sample<f32>],
    norm: Option<&NormStats>,
    cfg: &SsimConfig,
) -> Result<Vec<AlignmentPoint>> {
    let mut out = Vec::new();
    for s in samples {
        let (Some(o), Some(r)) = (&s.optical, &s.sar) else {
            continue;
        };
        let prep = |img: &Tensor<f32>, m: Modality| -> Result<Tensor<f32>> {
            match norm {
                Some(n) => n.normalize(img, &s.dataset, m),
                None => Ok(img.clone()),
            }
        };
        let to = model.encode_dense(&prep(o, Modality::Optical)?, Modality::Optical)?;
        let ts = model.encode_dense(&prep(r, Modality::Sar)?, Modality::Sar)?;
        out.extend(patch_alignment(
            &s.id,
            &gray_plane(o),
            &gray_plane(r),
            &to_matrix(&to),
            &to_matrix(&ts),
            model.config.patch,
            cfg,
        )?);
    }
    Ok(out)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the mean of their 1-based positions
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with mid-ranks for ties; `None` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]), Some(1.0));
        assert_eq!(spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&x, &[1.0; 5]), None);
        // classic textbook case: d² sum = 2 on n = 5 gives 1 − 6·2/120
        let r = spearman(&x, &[2.0, 1.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((r - 0.9).abs() < 1e-12);
    }

    #[test]
    fn tie_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn identical_tokens_give_unit_cosine() {
        let img = Matrix::new(8, 8, (0..64).map(|i| (i % 5) as f64 / 4.0).collect());
        let tok = Matrix::new(4, 3, (0..12).map(|i| i as f64 - 5.5).collect());
        let pts = patch_alignment("s", &img, &img, &tok, &tok, 4, &SsimConfig::default()).unwrap();
        assert_eq!(pts.len(), 4);
        for p in pts {
            assert!((p.cosine - 1.0).abs() < 1e-12);
            assert!((p.ssim - 1.0).abs() < 1e-9);
        }
    }
}
