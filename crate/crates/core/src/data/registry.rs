use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::numcore::Tensor;

use super::batch::Sample;
use super::ingest::decode_png;
use super::norm::NormStats;

/// Where the pixels of one image live.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    Memory(Tensor<f32>),
    /// Decoded on every access.
    Png(PathBuf),
}

impl ImageSource {
    pub fn load(&self, modality: Modality) -> Result<Tensor<f32>> {
        match self {
            ImageSource::Memory(t) => Ok(t.clone()),
            ImageSource::Png(p) => decode_png(p, modality),
        }
    }
}

/// One registry row. Paired entries hold both images of one acquisition;
/// unpaired entries may hold either or both, and are never contrasted.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub dataset: String,
    pub id: String,
    pub optical: Option<ImageSource>,
    pub sar: Option<ImageSource>,
    pub paired: bool,
    pub label: Option<usize>,
}

impl Entry {
    pub fn source(&self, m: Modality) -> Option<&ImageSource> {
        match m {
            Modality::Optical => self.optical.as_ref(),
            Modality::Sar => self.sar.as_ref(),
        }
    }

    pub fn load(&self, m: Modality) -> Result<Tensor<f32>> {
        let src = self.source(m).ok_or_else(|| Error::Ingest {
            sample: self.id.clone(),
            detail: format!("no {} image", m.name()),
        })?;
        let img = src.load(m).map_err(|e| match e {
            Error::Ingest { .. } => e,
            other => Error::Ingest {
                sample: self.id.clone(),
                detail: other.to_string(),
            },
        })?;
        if img.shape()[0] != m.channels() {
            return Err(Error::Ingest {
                sample: self.id.clone(),
                detail: format!(
                    "{} image has {} channels, expected {}",
                    m.name(),
                    img.shape()[0],
                    m.channels()
                ),
            });
        }
        Ok(img)
    }
}

/// Collection of samples from one or more datasets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Registry {
    pub entries: Vec<Entry>,
}

impl Registry {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn paired_count(&self) -> usize {
        self.entries.iter().filter(|e| e.paired).count()
    }

    pub fn find(&self, id: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Every entry decoded into a sample; missing modalities stay `None`.
    pub fn samples(&self) -> Result<Vec<Sample<f32>>> {
        self.entries
            .iter()
            .map(|e| {
                let load = |m| e.source(m).map(|_| e.load(m)).transpose();
                Ok(Sample {
                    id: e.id.clone(),
                    dataset: e.dataset.clone(),
                    optical: load(Modality::Optical)?,
                    sar: load(Modality::Sar)?,
                    label: e.label,
                })
            })
            .collect()
    }

    /// Fits per-dataset, per-modality statistics over every image.
    pub fn fit_norm(&self) -> Result<NormStats> {
        let mut imgs = Vec::new();
        for e in &self.entries {
            for m in Modality::BOTH {
                if e.source(m).is_some() {
                    imgs.push((e.dataset.as_str(), m, e.load(m)?));
                }
            }
        }
        NormStats::fit(imgs.iter().map(|(d, m, t)| (*d, *m, t)))
    }

    /// Common spatial extent of all images, checked on load.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let mut size = None;
        for e in &self.entries {
            for m in Modality::BOTH {
                if e.source(m).is_none() {
                    continue;
                }
                let s = match e.source(m).unwrap() {
                    ImageSource::Memory(t) => (t.shape()[1], t.shape()[2]),
                    ImageSource::Png(p) => {
                        let (w, h) = image::image_dimensions(p).map_err(|err| Error::Ingest {
                            sample: e.id.clone(),
                            detail: format!("{}: {err}", p.display()),
                        })?;
                        (h as usize, w as usize)
                    }
                };
                match size {
                    None => size = Some(s),
                    Some(prev) if prev != s => {
                        return Err(Error::Ingest {
                            sample: e.id.clone(),
                            detail: format!(
                                "{} image is {}x{}, registry images are {}x{}",
                                m.name(),
                                s.0,
                                s.1,
                                prev.0,
                                prev.1
                            ),
                        })
                    }
                    _ => {}
                }
            }
        }
        size.ok_or_else(|| Error::Config("registry is empty".into()))
    }
}
