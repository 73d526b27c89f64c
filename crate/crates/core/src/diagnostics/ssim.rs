use super::linalg::Matrix;
use crate::error::{Error, Result};

/// Local-statistics window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub sigma: f64,
    /// Odd window side.
    pub window: usize,
    /// Dynamic range of the inputs.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            sigma: 1.5,
            window: 11,
            range: 1.0,
        }
    }
}

fn kernel(cfg: &SsimConfig) -> Vec<f64> {
    let r = (cfg.window / 2) as i64;
    (-r..=r)
        .map(|d| (-(d * d) as f64 / (2.0 * cfg.sigma * cfg.sigma)).exp())
        .collect()
}

/// Weighted local mean with the window truncated at the border and
/// renormalized over the pixels that remain.
fn local_mean(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &kw) in k.iter().enumerate() {
                    let off = t as i64 - r;
                    let (yy, xx) = if along_rows {
                        (y as i64, x as i64 + off)
                    } else {
                        (y as i64 + off, x as i64)
                    };
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    acc += kw * src[yy as usize * w + xx as usize];
                    norm += kw;
                }
                out[y * w + x] = acc / norm;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Mean structural similarity of two equally sized images.
pub fn ssim(a: &Matrix, b: &Matrix, cfg: &SsimConfig) -> Result<f64> {
    if (a.rows, a.cols) != (b.rows, b.cols) || a.data.is_empty() {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} vs {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    if cfg.window % 2 == 0 || cfg.sigma <= 0.0 || cfg.range <= 0.0 {
        return Err(Error::Config(format!("invalid SSIM window {cfg:?}")));
    }
    let (h, w) = (a.rows, a.cols);
    let k = kernel(cfg);
    let c1 = (0.01 * cfg.range).powi(2);
    let c2 = (0.03 * cfg.range).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mx = local_mean(&a.data, h, w, &k);
    let my = local_mean(&b.data, h, w, &k);
    let mxx = local_mean(&prod(&a.data, &a.data), h, w, &k);
    let myy = local_mean(&prod(&b.data, &b.data), h, w, &k);
    let mxy = local_mean(&prod(&a.data, &b.data), h, w, &k);
    let mut total = 0.0;
    for i in 0..h * w {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / (h * w) as f64)
}

/// Blur with the 5-tap binomial kernel (edge replication) and keep every
/// second pixel; `levels` images are returned, the first being the input.
pub fn gaussian_pyramid(img: &Matrix, levels: usize) -> Result<Vec<Matrix>> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    let f = 1usize << (levels - 1);
    if img.rows % f != 0 || img.cols % f != 0 {
        return Err(Error::shape(
            "gaussian pyramid",
            format!("{}x{} is not divisible by {f}", img.rows, img.cols),
        ));
    }
    const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let (h, w) = (prev.rows as i64, prev.cols as i64);
        let at = |m: &[f64], y: i64, x: i64| m[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let mut rows = vec![0.0; (h * w) as usize];
        for y in 0..h {
            for x in 0..w {
                rows[(y * w + x) as usize] = (0..5).map(|t| K[t] * at(&prev.data, y, x + t as i64 - 2)).sum();
            }
        }
        let (nh, nw) = ((h / 2) as usize, (w / 2) as usize);
        let mut next = vec![0.0; nh * nw];
        for y in 0..nh {
            for x in 0..nw {
                let (yy, xx) = (2 * y as i64, 2 * x as i64);
                next[y * nw + x] = (0..5).map(|t| K[t] * at(&rows, yy + t as i64 - 2, xx)).sum();
            }
        }
        out.push(Matrix::new(nh, nw, next));
    }
    Ok(out)
}

/// SSIM between two images at every pyramid level.
pub fn ssim_by_level(a: &Matrix, b: &Matrix, levels: usize, cfg: &SsimConfig) -> Result<Vec<f64>> {
    let pa = gaussian_pyramid(a, levels)?;
    let pb = gaussian_pyramid(b, levels)?;
    pa.iter().zip(&pb).map(|(x, y)| ssim(x, y, cfg)).collect()
}

/// One row of the heterogeneity–resolution table.
#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    /// 0 is full resolution.
    pub level: usize,
    /// Ground sampling distance relative to the input, `2^level`.
    pub scale: f64,
    pub mean: f64,
    /// Population standard deviation over pairs.
    pub std: f64,
}

/// Mean and spread of optical-luminance/SAR SSIM per pyramid level.
pub fn heterogeneity_curve(pairs: &[(Matrix, Matrix)], levels: usize, cfg: &SsimConfig) -> Result<Vec<CurveRow>> {
    if pairs.is_empty() {
        return Err(Error::Config("heterogeneity curve needs at least one pair".into()));
    }
    let per: Vec<Vec<f64>> = pairs
        .iter()
        .map(|(a, b)| ssim_by_level(a, b, levels, cfg))
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((0..levels)
        .map(|l| {
            let mean = per.iter().map(|v| v[l]).sum::<f64>() / n;
            let var = per.iter().map(|v| (v[l] - mean).powi(2)).sum::<f64>() / n;
            CurveRow {
                level: l,
                scale: (1u64 << l) as f64,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}
