use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::Modality;
use crate::numcore::Tensor;

/// Channel statistics for one dataset and modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per dataset, per modality standardization table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormStats {
    pub entries: BTreeMap<(String, Modality), ChannelStats>,
}

impl NormStats {
    /// Fits channel means and standard deviations over every image of each
    /// (dataset, modality) group.
    pub fn fit<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Modality, &'a Tensor<f32>)>,
    {
        let mut acc: BTreeMap<(String, Modality), (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
        for (ds, m, img) in images {
            let c = img.shape()[0];
            let per = img.numel() / c;
            let e = acc
                .entry((ds.to_string(), m))
                .or_insert_with(|| (vec![0.0; c], vec![0.0; c], 0.0));
            if e.0.len() != c {
                return Err(Error::shape(
                    "norm stats",
                    format!("dataset {ds} {} images disagree on channel count", m.name()),
                ));
            }
            for ch in 0..c {
                for &v in &img.data()[ch * per..(ch + 1) * per] {
                    e.0[ch] += v as f64;
                    e.1[ch] += (v as f64) * (v as f64);
                }
            }
            e.2 += per as f64;
        }
        let mut out = NormStats::default();
        for ((ds, m), (s, sq, n)) in acc {
            let mean: Vec<f64> = s.iter().map(|v| v / n).collect();
            let mut std = Vec::with_capacity(mean.len());
            for (ch, (&q, &mu)) in sq.iter().zip(&mean).enumerate() {
                let var = (q / n - mu * mu).max(0.0);
                if var <= 1e-12 {
                    return Err(Error::ZeroVariance {
                        dataset: ds,
                        modality: m.name().to_string(),
                        channel: ch,
                    });
                }
                std.push(var.sqrt());
            }
            out.entries.insert((ds, m), ChannelStats { mean, std });
        }
        Ok(out)
    }

    pub fn get(&self, dataset: &str, modality: Modality) -> Result<&ChannelStats> {
        self.entries
            .get(&(dataset.to_string(), modality))
            .ok_or_else(|| {
                Error::Config(format!(
                    "no normalization statistics for dataset {dataset} ({})",
                    modality.name()
                ))
            })
    }

    fn apply(&self, img: &Tensor<f32>, dataset: &str, m: Modality, fwd: bool) -> Result<Tensor<f32>> {
        let st = self.get(dataset, m)?;
        let c = img.shape()[0];
        if c != st.mean.len() {
            return Err(Error::shape(
                "normalize",
                format!("{c} channels, statistics have {}", st.mean.len()),
            ));
        }
        let per = img.numel() / c;
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / per;
            let (mu, sd) = (st.mean[ch], st.std[ch]);
            *v = if fwd {
                ((*v as f64 - mu) / sd) as f32
            } else {
                (*v as f64 * sd + mu) as f32
            };
        }
        Ok(out)
    }

    pub fn normalize(&self, img: &Tensor<f32>, dataset: &str, m: Modality) -> Result<Tensor<f32>> {
        self.apply(img, dataset, m, true)
    }

    pub fn denormalize(&self, img: &Tensor<f32>, dataset: &str, m: Modality) -> Result<Tensor<f32>> {
        self.apply(img, dataset, m, false)
    }

    /// Tab-separated `dataset_id modality channel mean std` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("dataset_id\tmodality\tchannel\tmean\tstd\n");
        for ((ds, m), st) in &self.entries {
            for (ch, (mu, sd)) in st.mean.iter().zip(&st.std).enumerate() {
                writeln!(s, "{ds}\t{}\t{ch}\t{mu:?}\t{sd:?}", m.name()).unwrap();
            }
        }
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut out = NormStats::default();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("norm stats line {}: {line:?}", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let m = Modality::parse(f[1]).ok_or_else(bad)?;
            let ch: usize = f[2].parse().map_err(|_| bad())?;
            let mu: f64 = f[3].parse().map_err(|_| bad())?;
            let sd: f64 = f[4].parse().map_err(|_| bad())?;
            if sd.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(bad());
            }
            let e = out
                .entries
                .entry((f[0].to_string(), m))
                .or_insert_with(|| ChannelStats {
                    mean: Vec::new(),
                    std: Vec::new(),
                });
            if e.mean.len() != ch {
                return Err(bad());
            }
            e.mean.push(mu);
            e.std.push(sd);
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_is_rejected() {
        let img = Tensor::<f32>::full(&[1, 4, 4], 0.5);
        let r = NormStats::fit([("a", Modality::Sar, &img)]);
        assert!(matches!(r, Err(Error::ZeroVariance { channel: 0, .. })));
    }

    #[test]
    fn datasets_are_separate() {
        let a = Tensor::<f32>::from_fn(&[1, 2, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn(&[1, 2, 2], |i| 10.0 * i as f32);
        let st = NormStats::fit([("a", Modality::Sar, &a), ("b", Modality::Sar, &b)]).unwrap();
        assert_eq!(st.entries.len(), 2);
        assert!((st.get("b", Modality::Sar).unwrap().mean[0] - 15.0).abs() < 1e-12);
        assert!(st.get("a", Modality::Optical).is_err());
    }

    #[test]
    fn tsv_round_trip_is_exact() {
        let a = Tensor::<f32>::from_fn(&[3, 2, 2], |i| (i as f32).sqrt());
        let st = NormStats::fit([("x", Modality::Optical, &a)]).unwrap();
        assert_eq!(NormStats::from_tsv(&st.to_tsv()).unwrap(), st);
    }
}
