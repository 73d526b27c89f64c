//! Representation analyses: singular spectra, SSIM across scales,
//! patch-level alignment, PCA and linear probing.

pub mod alignment;
pub mod linalg;
pub mod pca;
pub mod probe;
pub mod report;
pub mod spectrum;
pub mod ssim;

pub use alignment::{alignment_vs_heterogeneity, cosine, gray_plane, patch_alignment, spearman, AlignmentPoint};
pub use linalg::{svd, Matrix, Svd};
pub use pca::{pca_project, Pca};
pub use probe::{linear_probe, ProbeConfig, ProbeResult};
pub use report::{svg_chart, Mark, Series, Table};
pub use spectrum::{effective_rank, singular_spectrum, SpectrumReport};
pub use ssim::{gaussian_pyramid, heterogeneity_curve, ssim, ssim_by_level, CurveRow, SsimConfig};

use crate::data::{NormStats, Sample};
use crate::error::Result;
use crate::model::{Modality, ModelState};

/// Unmasked encoder tokens of every image of one modality, stacked.
pub fn token_matrix(
    model: &ModelState<f32>,
    samples: &[Sample<f32>],
    modality: Modality,
    norm: Option<&NormStats>,
) -> Result<Matrix> {
    let mut rows = Vec::new();
    for s in samples {
        let img = match modality {
            Modality::Optical => s.optical.as_ref(),
            Modality::Sar => s.sar.as_ref(),
        };
        let Some(img) = img else { continue };
        let img = match norm {
            Some(n) => n.normalize(img, &s.dataset, modality)?,
            None => img.clone(),
        };
        let t = model.encode_dense(&img, modality)?;
        let (m, d) = t.rows_cols();
        for r in 0..m {
            rows.push(t.row(r).iter().map(|v| *v as f64).collect::<Vec<f64>>());
        }
        debug_assert_eq!(rows.last().map(|r| r.len()), Some(d));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Mean-pooled encoder features (one row per image) and their labels.
pub fn pooled_matrix(
    model: &ModelState<f32>,
    samples: &[Sample<f32>],
    modality: Modality,
    norm: Option<&NormStats>,
) -> Result<(Matrix, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in samples {
        let img = match modality {
            Modality::Optical => s.optical.as_ref(),
            Modality::Sar => s.sar.as_ref(),
        };
        let (Some(img), Some(l)) = (img, s.label) else { continue };
        let img = match norm {
            Some(n) => n.normalize(img, &s.dataset, modality)?,
            None => img.clone(),
        };
        rows.push(model.pooled_features(&img, modality)?);
        labels.push(l);
    }
    Ok((Matrix::from_rows(&rows), labels))
}
