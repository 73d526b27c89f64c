use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::mask::make_mask;
use super::norm::NormStats;
use super::registry::Registry;
use crate::error::{Error, Result};
use crate::model::{MaskPlan, Modality};
use crate::numcore::{Float, Tensor};

/// One training sample; unpaired samples carry a single modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T: Float = f32> {
    pub id: String,
    pub dataset: String,
    pub optical: Option<Tensor<T>>,
    pub sar: Option<Tensor<T>>,
    pub label: Option<usize>,
}

/// Materialized homogeneous batch with one mask per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T: Float = f32> {
    pub samples: Vec<Sample<T>>,
    pub plans: Vec<MaskPlan>,
    pub paired: bool,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Float> Batch<T> {
    /// Enforces the homogeneity contract: a paired batch holds only complete
    /// pairs, an unpaired batch only single-modality samples.
    pub fn check(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::MixedBatch("empty batch".into()));
        }
        if self.samples.len() != self.plans.len() {
            return Err(Error::MixedBatch(format!(
                "{} samples but {} mask plans",
                self.samples.len(),
                self.plans.len()
            )));
        }
        for s in &self.samples {
            let both = s.optical.is_some() && s.sar.is_some();
            let one = s.optical.is_some() != s.sar.is_some();
            if (self.paired && !both) || (!self.paired && !one) {
                return Err(Error::MixedBatch(format!(
                    "sample {} does not match a {} batch",
                    s.id,
                    if self.paired { "paired" } else { "unpaired" }
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> Batch<U> {
        Batch {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    dataset: s.dataset.clone(),
                    optical: s.optical.as_ref().map(|t| t.cast()),
                    sar: s.sar.as_ref().map(|t| t.cast()),
                    label: s.label,
                })
                .collect(),
            plans: self.plans.clone(),
            paired: self.paired,
            epoch: self.epoch,
            step: self.step,
        }
    }
}

/// Schedule entry for one sample of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanItem {
    /// Index into the registry.
    pub entry: usize,
    /// `None` for both modalities of a pair.
    pub modality: Option<Modality>,
    pub flip: bool,
}

/// Which samples form a batch and how each is masked.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub ids: Vec<String>,
    pub items: Vec<PlanItem>,
    pub paired: bool,
    pub plans: Vec<MaskPlan>,
    pub epoch: usize,
    pub step: usize,
}

/// Batching knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfig {
    pub batch_size: usize,
    /// Relative frequency of paired batches.
    pub paired_weight: f64,
    /// Relative frequency of unpaired batches.
    pub unpaired_weight: f64,
    pub mask_ratio: f64,
    /// Random horizontal flips, shared by both images of a pair.
    pub flip: bool,
    pub seed: u64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            batch_size: 8,
            paired_weight: 1.0,
            unpaired_weight: 1.0,
            mask_ratio: 0.75,
            flip: true,
            seed: 0,
        }
    }
}

/// Deterministic epoch-by-epoch batch schedule over a registry.
#[derive(Clone, Debug)]
pub struct BatchScheduler {
    config: BatchConfig,
    tokens: usize,
    paired: Vec<usize>,
    optical: Vec<usize>,
    sar: Vec<usize>,
    ids: Vec<String>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Endless reshuffled cycle over a pool.
struct Cycle<'a> {
    pool: &'a [usize],
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Cycle<'a> {
    fn new(pool: &'a [usize]) -> Self {
        Cycle {
            pool,
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = self.pool.to_vec();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

impl BatchScheduler {
    pub fn new(registry: &Registry, config: BatchConfig, tokens: usize) -> Result<Self> {
        if registry.is_empty() {
            return Err(Error::Config("dataset registry is empty".into()));
        }
        if config.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size {} is below 2",
                config.batch_size
            )));
        }
        let (pw, uw) = (config.paired_weight, config.unpaired_weight);
        if !(pw >= 0.0 && uw >= 0.0 && pw + uw > 0.0) || !(pw + uw).is_finite() {
            return Err(Error::Config(format!(
                "paired:unpaired batch ratio {pw}:{uw} is invalid"
            )));
        }
        let mut s = BatchScheduler {
            tokens,
            paired: Vec::new(),
            optical: Vec::new(),
            sar: Vec::new(),
            ids: registry.entries.iter().map(|e| e.id.clone()).collect(),
            config,
        };
        for (i, e) in registry.entries.iter().enumerate() {
            if e.paired {
                s.paired.push(i);
            } else {
                if e.optical.is_some() {
                    s.optical.push(i);
                }
                if e.sar.is_some() {
                    s.sar.push(i);
                }
            }
        }
        if pw > 0.0 && s.paired.is_empty() {
            return Err(Error::Config(
                "paired batches requested but the registry has no paired samples".into(),
            ));
        }
        if uw > 0.0 && (s.optical.is_empty() || s.sar.is_empty()) {
            return Err(Error::Config(
                "unpaired batches requested but the registry lacks unpaired optical or SAR samples"
                    .into(),
            ));
        }
        make_mask(tokens, s.config.mask_ratio, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(s)
    }

    pub fn config(&self) -> &BatchConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        let mut n = 0;
        if self.config.paired_weight > 0.0 {
            n += self.paired.len();
        }
        if self.config.unpaired_weight > 0.0 {
            n += self.optical.len() + self.sar.len();
        }
        (n / self.config.batch_size).max(1)
    }

    /// All batch plans of one epoch; a pure function of (config, epoch).
    pub fn epoch(&self, epoch: usize) -> Result<Vec<BatchPlan>> {
        let mut rng = epoch_rng(self.config.seed, epoch);
        let (pw, uw) = (self.config.paired_weight, self.config.unpaired_weight);
        let p = pw / (pw + uw);
        let b = self.config.batch_size;
        let mut cp = Cycle::new(&self.paired);
        let mut co = Cycle::new(&self.optical);
        let mut cs = Cycle::new(&self.sar);
        let mut out = Vec::new();
        for step in 0..self.steps_per_epoch() {
            let paired = rng.random_bool(p);
            let mut items = Vec::with_capacity(b);
            if paired {
                for _ in 0..b {
                    items.push((cp.next(&mut rng), None));
                }
            } else {
                for k in 0..b {
                    if k < b.div_ceil(2) {
                        items.push((co.next(&mut rng), Some(Modality::Optical)));
                    } else {
                        items.push((cs.next(&mut rng), Some(Modality::Sar)));
                    }
                }
            }
            let mut plans = Vec::with_capacity(b);
            let mut plan_items = Vec::with_capacity(b);
            for (entry, modality) in items {
                plans.push(make_mask(self.tokens, self.config.mask_ratio, &mut rng)?);
                let flip = self.config.flip && rng.random_bool(0.5);
                plan_items.push(PlanItem {
                    entry,
                    modality,
                    flip,
                });
            }
            out.push(BatchPlan {
                ids: plan_items.iter().map(|i| self.ids[i.entry].clone()).collect(),
                items: plan_items,
                paired,
                plans,
                epoch,
                step,
            });
        }
        Ok(out)
    }
}

fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(s, |i| {
        let (c, r) = (i / (h * w), i % (h * w));
        let (y, x) = (r / w, r % w);
        img.data()[c * h * w + y * w + (w - 1 - x)]
    })
}

/// Loads, normalizes and flips the images of a plan.
pub fn materialize(plan: &BatchPlan, registry: &Registry, norm: Option<&NormStats>) -> Result<Batch<f32>> {
    let mut samples = Vec::with_capacity(plan.items.len());
    for item in &plan.items {
        let e = &registry.entries[item.entry];
        let load = |m: Modality| -> Result<Tensor<f32>> {
            let mut img = e.load(m)?;
            if let Some(n) = norm {
                img = n.normalize(&img, &e.dataset, m)?;
            }
            Ok(if item.flip { hflip(&img) } else { img })
        };
        let want = |m: Modality| item.modality.is_none() || item.modality == Some(m);
        let optical = want(Modality::Optical).then(|| load(Modality::Optical)).transpose()?;
        let sar = want(Modality::Sar).then(|| load(Modality::Sar)).transpose()?;
        if let (Some(o), Some(s)) = (&optical, &sar) {
            if o.shape()[1..] != s.shape()[1..] {
                return Err(Error::Ingest {
                    sample: e.id.clone(),
                    detail: "optical and SAR extents differ".into(),
                });
            }
        }
        samples.push(Sample {
            id: e.id.clone(),
            dataset: e.dataset.clone(),
            optical,
            sar,
            label: e.label,
        });
    }
    let batch = Batch {
        samples,
        plans: plan.plans.clone(),
        paired: plan.paired,
        epoch: plan.epoch,
        step: plan.step,
    };
    batch.check()?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::super::registry::{Entry, ImageSource};
    use super::*;

    fn registry(paired: usize, unpaired: usize) -> Registry {
        let img = |c| ImageSource::Memory(Tensor::from_fn(&[c, 8, 8], |i| (i % 5) as f32));
        let mut r = Registry::default();
        for i in 0..paired {
            r.entries.push(Entry {
                dataset: "d".into(),
                id: format!("p{i}"),
                optical: Some(img(3)),
                sar: Some(img(1)),
                paired: true,
                label: None,
            });
        }
        for i in 0..unpaired {
            let opt = i % 2 == 0;
            r.entries.push(Entry {
                dataset: "d".into(),
                id: format!("u{i}"),
                optical: opt.then(|| img(3)),
                sar: (!opt).then(|| img(1)),
                paired: false,
                label: None,
            });
        }
        r
    }

    fn cfg(pw: f64, uw: f64, seed: u64) -> BatchConfig {
        BatchConfig {
            batch_size: 4,
            paired_weight: pw,
            unpaired_weight: uw,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn paired_only_ratio() {
        let s = BatchScheduler::new(&registry(16, 0), cfg(1.0, 0.0, 0), 4).unwrap();
        assert!(s.epoch(0).unwrap().iter().all(|b| b.paired));
    }

    #[test]
    fn unpaired_only_registry_rejects_paired_requests() {
        assert!(BatchScheduler::new(&registry(0, 8), cfg(1.0, 1.0, 0), 4).is_err());
        assert!(BatchScheduler::new(&registry(0, 8), cfg(0.0, 1.0, 0), 4).is_ok());
    }

    #[test]
    fn unpaired_batches_are_balanced() {
        let reg = registry(8, 8);
        let s = BatchScheduler::new(&reg, cfg(1.0, 1.0, 3), 4).unwrap();
        for e in 0..20 {
            for p in s.epoch(e).unwrap() {
                let b = materialize(&p, &reg, None).unwrap();
                if !b.paired {
                    let o = b.samples.iter().filter(|s| s.optical.is_some()).count();
                    assert_eq!(o, 2);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_epoch() {
        let s = BatchScheduler::new(&registry(8, 8), cfg(1.0, 1.0, 5), 4).unwrap();
        assert_eq!(s.epoch(2).unwrap(), s.epoch(2).unwrap());
        assert_ne!(s.epoch(2).unwrap(), s.epoch(3).unwrap());
    }

    #[test]
    fn mixed_batches_are_rejected() {
        let reg = registry(2, 2);
        let s = BatchScheduler::new(&reg, cfg(1.0, 0.0, 0), 4).unwrap();
        let mut b = materialize(&s.epoch(0).unwrap()[0], &reg, None).unwrap();
        b.samples[0].sar = None;
        assert!(matches!(b.check(), Err(Error::MixedBatch(_))));
    }

    #[test]
    fn flip_is_shared_by_a_pair() {
        let mut reg = registry(1, 0);
        let o = Tensor::from_fn(&[3, 8, 8], |i| (i % 8) as f32);
        let s = Tensor::from_fn(&[1, 8, 8], |i| (i % 8) as f32);
        reg.entries[0].optical = Some(ImageSource::Memory(o));
        reg.entries[0].sar = Some(ImageSource::Memory(s));
        let plan = BatchPlan {
            ids: vec!["p0".into()],
            items: vec![PlanItem {
                entry: 0,
                modality: None,
                flip: true,
            }],
            paired: true,
            plans: vec![MaskPlan::full(4)],
            epoch: 0,
            step: 0,
        };
        let b = materialize(&plan, &reg, None).unwrap();
        let (o, s) = (b.samples[0].optical.as_ref().unwrap(), b.samples[0].sar.as_ref().unwrap());
        assert_eq!(o.data()[0], 7.0);
        assert_eq!(s.data()[0], 7.0);
        assert_eq!(&o.data()[..64], s.data());
    }
}
