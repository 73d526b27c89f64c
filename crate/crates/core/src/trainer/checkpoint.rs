use std::path::Path;

use super::config::TrainConfig;
use super::metrics::MetricsRecord;
use super::optim::AdamState;
use super::Trainer;
use crate::error::{Error, Result};
use crate::io::Archive;
use crate::model::ModelState;
use crate::numcore::{ParamStore, Tensor};

/// Records kept in the checkpoint header for quick inspection.
pub const HISTORY_TAIL: usize = 32;

/// Parameters, optimizer moments, step counter, resolved config and the
/// recent loss history. The data stream is a pure function of the seed and
/// the step, so no generator state needs saving.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub archive: Archive,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let mut a = Archive::default();
        a.set_meta("kind", "codemae-checkpoint");
        a.set_meta("step", t.step);
        a.set_meta("epoch", t.step / t.steps_per_epoch());
        a.set_meta("config_hash", t.config.hash());
        a.set_meta("adam_step", t.adam.step);
        for line in t.config.to_text().lines() {
            let (k, v) = line.split_once(" = ").expect("config line");
            a.set_meta(&format!("config.{k}"), v);
        }
        for (k, e) in t.model.store.entries().iter().enumerate() {
            a.push(format!("param/{}", e.name), &e.tensor);
            let shape = e.tensor.shape();
            a.push(format!("adam_m/{}", e.name), &Tensor::new(shape, t.adam.m[k].clone()).expect("moment shape"));
            a.push(format!("adam_v/{}", e.name), &Tensor::new(shape, t.adam.v[k].clone()).expect("moment shape"));
        }
        let tail: Vec<&MetricsRecord> = t.metrics.iter().rev().take(HISTORY_TAIL).rev().collect();
        let rows: Vec<f64> = tail.iter().flat_map(|r| r.to_row()).collect();
        if !tail.is_empty() {
            a.push("history", &Tensor::new(&[tail.len(), 9], rows).expect("history shape"));
        }
        Checkpoint { archive: a }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.archive.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        if archive.meta("kind") != Some("codemae-checkpoint") {
            return Err(Error::Format(format!("{} is not a training checkpoint", path.display())));
        }
        Ok(Checkpoint { archive })
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.archive.require_meta(key)?;
        v.parse().map_err(|_| Error::Format(format!("metadata {key}={v}")))
    }

    pub fn step(&self) -> Result<usize> {
        self.num("step")
    }

    pub fn config(&self) -> Result<TrainConfig> {
        let mut text = String::new();
        for (k, v) in &self.archive.meta {
            if let Some(key) = k.strip_prefix("config.") {
                text.push_str(&format!("{key} = {v}\n"));
            }
        }
        let c = TrainConfig::parse(&text)?;
        let stored = self.archive.require_meta("config_hash")?;
        if c.hash() != stored {
            return Err(Error::Format("checkpoint config does not match its hash".into()));
        }
        Ok(c)
    }

    /// Model with the stored parameters, checked name by name.
    pub fn model(&self, config: &TrainConfig) -> Result<ModelState<f32>> {
        let mut m = ModelState::<f32>::init(&config.model, config.seed)?;
        load_params(&self.archive, &mut m.store, "param/")?;
        Ok(m)
    }

    pub fn adam(&self, store: &ParamStore<f32>) -> Result<AdamState> {
        let mut s = AdamState::new(store);
        s.step = self.num("adam_step")?;
        for (k, e) in store.entries().iter().enumerate() {
            s.m[k] = self.archive.tensor::<f64>(&format!("adam_m/{}", e.name))?.into_data();
            s.v[k] = self.archive.tensor::<f64>(&format!("adam_v/{}", e.name))?.into_data();
        }
        Ok(s)
    }

    pub fn metrics_tail(&self) -> Result<Vec<MetricsRecord>> {
        match self.archive.get("history") {
            None => Ok(Vec::new()),
            Some(e) => {
                let cols = 9;
                e.tensor.data().chunks(cols).map(MetricsRecord::from_row).collect()
            }
        }
    }
}

/// Overwrites every parameter of `store` from `prefix{name}` entries.
pub fn load_params(a: &Archive, store: &mut ParamStore<f32>, prefix: &str) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}{}", store.name(id));
        let t: Tensor<f32> = a.tensor(&name)?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Format(format!(
                "{name}: stored shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}
