use std::path::{Path, PathBuf};

use image::DynamicImage;

use super::registry::{Entry, ImageSource, Registry};
use crate::error::{Error, Result};
use crate::model::Modality;
use crate::numcore::Tensor;

/// Column header of manifest files.
pub const MANIFEST_HEADER: &str = "dataset_id\tsample_id\toptical_path\tsar_path\tpaired\tlabel";

/// Placeholder for a missing path.
pub const NO_PATH: &str = "-";

/// Decodes an 8-bit or 16-bit PNG into `[C × H × W]` values in [0, 1].
/// Optical images become RGB, SAR images single-channel luminance.
pub fn decode_png(path: &Path, modality: Modality) -> Result<Tensor<f32>> {
    let img = image::open(path)?;
    let deep = img.color().bytes_per_pixel() / img.color().channel_count() >= 2;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = match (modality, deep) {
        (Modality::Optical, true) => img.to_rgb16().into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        (Modality::Optical, false) => img.to_rgb8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        (Modality::Sar, true) => img.to_luma16().into_raw().iter().map(|&v| v as f32 / 65535.0).collect(),
        (Modality::Sar, false) => img.to_luma8().into_raw().iter().map(|&v| v as f32 / 255.0).collect(),
    };
    let c = modality.channels();
    // interleaved HWC to planar CHW
    let mut out = vec![0f32; raw.len()];
    for (i, v) in raw.into_iter().enumerate() {
        let (p, ch) = (i / c, i % c);
        out[ch * h * w + p] = v;
    }
    Tensor::new(&[c, h, w], out)
}

/// Writes a `[C × H × W]` image in [0, 1] as a 16-bit PNG.
pub fn encode_png16(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let q = |v: f32| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16;
    let d = img.data();
    let mut buf = Vec::with_capacity(c * h * w);
    for p in 0..h * w {
        for ch in 0..c {
            buf.push(q(d[ch * h * w + p]));
        }
    }
    let dyn_img = match c {
        1 => DynamicImage::ImageLuma16(
            image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size"),
        ),
        3 => DynamicImage::ImageRgb16(
            image::ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size"),
        ),
        _ => return Err(Error::shape("encode png", format!("{c} channels"))),
    };
    dyn_img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub dataset: String,
    pub sample: String,
    pub optical: Option<String>,
    pub sar: Option<String>,
    pub paired: bool,
    pub label: Option<usize>,
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        let p = |o: &Option<String>| o.clone().unwrap_or_else(|| NO_PATH.into());
        let mut s = format!(
            "{}\t{}\t{}\t{}\t{}",
            self.dataset,
            self.sample,
            p(&self.optical),
            p(&self.sar),
            u8::from(self.paired)
        );
        if let Some(l) = self.label {
            s.push_str(&format!("\t{l}"));
        }
        s
    }
}

pub fn format_manifest(rows: &[ManifestRow]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Parses manifest text. Blank lines, `#` comments and the header are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') || line == MANIFEST_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let sample = f.get(1).copied().unwrap_or("").to_string();
        let bad = |detail: String| Error::Ingest {
            sample: if sample.is_empty() {
                format!("line {}", n + 1)
            } else {
                sample.clone()
            },
            detail,
        };
        if !(5..=6).contains(&f.len()) {
            return Err(bad(format!("expected 5 or 6 tab-separated columns, got {}", f.len())));
        }
        let path = |s: &str| (s != NO_PATH && !s.is_empty()).then(|| s.to_string());
        let paired = match f[4] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(bad(format!("paired flag {other:?}"))),
        };
        let label = match f.get(5) {
            None => None,
            Some(&s) if s.is_empty() || s == NO_PATH => None,
            Some(s) => Some(s.parse().map_err(|_| bad(format!("label {s:?}")))?),
        };
        let row = ManifestRow {
            dataset: f[0].to_string(),
            sample: sample.clone(),
            optical: path(f[2]),
            sar: path(f[3]),
            paired,
            label,
        };
        if row.paired && (row.optical.is_none() || row.sar.is_none()) {
            return Err(bad("paired row needs both an optical and a SAR path".into()));
        }
        if row.optical.is_none() && row.sar.is_none() {
            return Err(bad("row names no image".into()));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Builds a registry of lazily decoded PNG entries from a manifest. Paths
/// are relative to `root`. Paired images must agree in size.
pub fn load_image_dir(root: &Path, manifest: &Path) -> Result<Registry> {
    let text = std::fs::read_to_string(manifest)?;
    let rows = parse_manifest(&text)?;
    let mut reg = Registry::default();
    let mut seen = std::collections::HashSet::new();
    for r in rows {
        if !seen.insert(r.sample.clone()) {
            return Err(Error::Ingest {
                sample: r.sample,
                detail: "duplicate sample id".into(),
            });
        }
        let resolve = |p: &Option<String>| -> Result<Option<PathBuf>> {
            let Some(p) = p else { return Ok(None) };
            let full = root.join(p);
            image::image_dimensions(&full).map_err(|e| Error::Ingest {
                sample: r.sample.clone(),
                detail: format!("{}: {e}", full.display()),
            })?;
            Ok(Some(full))
        };
        let o = resolve(&r.optical)?;
        let s = resolve(&r.sar)?;
        if let (Some(a), Some(b)) = (&o, &s) {
            let da = image::image_dimensions(a)?;
            let db = image::image_dimensions(b)?;
            if da != db {
                return Err(Error::Ingest {
                    sample: r.sample,
                    detail: format!(
                        "optical is {}x{} but SAR is {}x{}",
                        da.1, da.0, db.1, db.0
                    ),
                });
            }
        }
        reg.entries.push(Entry {
            dataset: r.dataset,
            id: r.sample,
            optical: o.map(ImageSource::Png),
            sar: s.map(ImageSource::Png),
            paired: r.paired,
            label: r.label,
        });
    }
    Ok(reg)
}
