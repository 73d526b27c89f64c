use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::batch::Sample;
use super::ingest::{encode_png16, format_manifest, ManifestRow};
use super::registry::{Entry, ImageSource, Registry};
use super::render::{render_optical, render_sar, OpticalStyle, SarStyle};
use super::scene::{gen_scene, Scene, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Synthetic dataset recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub dataset: String,
    pub scenes: usize,
    pub size: usize,
    /// Upper bound on regions per scene; at least 3 are drawn.
    pub regions: usize,
    pub seed: u64,
    /// Fraction of scenes emitted as single-modality unpaired samples.
    pub unpaired_fraction: f64,
    /// Probability that the SAR acquisition sees a grown region.
    pub asynchrony: f64,
    /// Probability that a region takes the scene's dominant class instead
    /// of an independent one.
    pub class_coherence: f64,
    pub optical: OpticalStyle,
    pub sar: SarStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dataset: "synth".into(),
            scenes: 64,
            size: 64,
            regions: 6,
            seed: 0,
            unpaired_fraction: 0.0,
            asynchrony: 0.0,
            class_coherence: 0.0,
            optical: OpticalStyle::default(),
            sar: SarStyle::default(),
        }
    }
}

/// A rendered scene with both acquisitions.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub id: String,
    pub scene: Scene,
    pub optical: Tensor<f32>,
    pub sar: Tensor<f32>,
    pub label: usize,
}

fn mix(seed: u64, i: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(i);
    rng.random()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.size < 2 || self.regions < 3 {
            return Err(Error::Config(format!(
                "synthetic dataset needs scenes > 0, size >= 2 and regions >= 3 (got {}, {}, {})",
                self.scenes, self.size, self.regions
            )));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.unpaired_fraction) || !unit(self.asynchrony) || !unit(self.class_coherence) {
            return Err(Error::Config(
                "unpaired fraction, asynchrony and class coherence must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Scene `i`, rendered by both sensors.
    pub fn pair(&self, i: usize) -> Result<SynthPair> {
        let i64_ = i as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, i64_, 1));
        let regions = rng.random_range(3..=self.regions);
        let mut scene = gen_scene(mix(self.seed, i64_, 2), self.size, self.size, regions)?;
        if self.class_coherence > 0.0 {
            let mut crng = ChaCha8Rng::seed_from_u64(mix(self.seed, i64_, 7));
            let dominant = crng.random_range(0..NUM_CLASSES);
            for r in &mut scene.regions {
                if crng.random_bool(self.class_coherence) {
                    r.class = dominant;
                }
            }
        }
        let optical = render_optical(&scene, mix(self.seed, i64_, 3), &self.optical);
        let sar_scene = if rng.random_bool(self.asynchrony) {
            scene.perturbed(mix(self.seed, i64_, 4), 2)
        } else {
            scene.clone()
        };
        let sar = render_sar(&sar_scene, mix(self.seed, i64_, 5), &self.sar)?;
        Ok(SynthPair {
            id: format!("{}-{i:05}", self.dataset),
            label: scene.label(),
            scene,
            optical,
            sar,
        })
    }

    /// Indices of scenes emitted unpaired: exactly `round(fraction · scenes)`.
    pub fn unpaired_set(&self) -> Vec<bool> {
        let k = (self.unpaired_fraction * self.scenes as f64).round() as usize;
        let mut idx: Vec<usize> = (0..self.scenes).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(self.seed, 0, 6)));
        let mut out = vec![false; self.scenes];
        for &i in &idx[..k] {
            out[i] = true;
        }
        out
    }

    /// In-memory registry. Unpaired scenes alternate between keeping the
    /// optical and keeping the SAR image.
    pub fn registry(&self) -> Result<Registry> {
        self.validate()?;
        let unpaired = self.unpaired_set();
        let mut reg = Registry::default();
        let mut k = 0;
        for i in 0..self.scenes {
            let p = self.pair(i)?;
            let (keep_o, keep_s) = if unpaired[i] {
                k += 1;
                (k % 2 == 1, k % 2 == 0)
            } else {
                (true, true)
            };
            reg.entries.push(Entry {
                dataset: self.dataset.clone(),
                id: p.id,
                optical: keep_o.then_some(ImageSource::Memory(p.optical)),
                sar: keep_s.then_some(ImageSource::Memory(p.sar)),
                paired: !unpaired[i],
                label: Some(p.label),
            });
        }
        Ok(reg)
    }

    /// Every scene as a labeled pair, for evaluation.
    pub fn samples(&self) -> Result<Vec<Sample<f32>>> {
        self.validate()?;
        (0..self.scenes)
            .map(|i| {
                let p = self.pair(i)?;
                Ok(Sample {
                    id: p.id,
                    dataset: self.dataset.clone(),
                    optical: Some(p.optical),
                    sar: Some(p.sar),
                    label: Some(p.label),
                })
            })
            .collect()
    }

    /// Writes 16-bit PNGs, `manifest.tsv` and `norm_stats.tsv` under `out`.
    pub fn write(&self, out: &Path) -> Result<Registry> {
        let reg = self.registry()?;
        std::fs::create_dir_all(out.join("optical"))?;
        std::fs::create_dir_all(out.join("sar"))?;
        let mut rows = Vec::new();
        for e in &reg.entries {
            let save = |src: &Option<ImageSource>, dir: &str| -> Result<Option<String>> {
                let Some(ImageSource::Memory(t)) = src else {
                    return Ok(None);
                };
                let rel = format!("{dir}/{}.png", e.id);
                encode_png16(&out.join(&rel), t)?;
                Ok(Some(rel))
            };
            let optical = save(&e.optical, "optical")?;
            let sar = save(&e.sar, "sar")?;
            rows.push(ManifestRow {
                dataset: e.dataset.clone(),
                sample: e.id.clone(),
                optical,
                sar,
                paired: e.paired,
                label: e.label,
            });
        }
        std::fs::write(out.join("manifest.tsv"), format_manifest(&rows))?;
        let on_disk = super::ingest::load_image_dir(out, &out.join("manifest.tsv"))?;
        on_disk.fit_norm()?.write(&out.join("norm_stats.tsv"))?;
        Ok(on_disk)
    }
}
