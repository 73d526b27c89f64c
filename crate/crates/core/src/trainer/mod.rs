//! AdamW pretraining loop with warmup/cosine schedule, checkpoints and a
//! per-step metrics log.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;

pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use metrics::MetricsRecord;
pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamConfig, AdamState};

use std::path::Path;

use crate::data::{materialize, Batch, BatchPlan, BatchScheduler, NormStats, Registry, SynthConfig};
use crate::error::{Error, Result};
use crate::model::{ModelState, TeacherHandle};
use crate::numcore::Graph;
use crate::objectives::{total_loss, LossBreakdown};

/// Builds the dataset a config describes: the manifest under `data_dir`,
/// or synthetic scenes.
pub fn load_registry(cfg: &TrainConfig) -> Result<Registry> {
    if cfg.data_dir.is_empty() {
        SynthConfig {
            scenes: cfg.synth_scenes,
            size: cfg.model.image_size,
            regions: cfg.synth_regions,
            seed: cfg.synth_seed,
            unpaired_fraction: cfg.synth_unpaired_fraction,
            ..Default::default()
        }
        .registry()
    } else {
        let root = Path::new(&cfg.data_dir);
        crate::data::load_image_dir(root, &root.join("manifest.tsv"))
    }
}

pub fn load_teacher(cfg: &TrainConfig) -> Result<TeacherHandle<f32>> {
    if cfg.teacher == "random" {
        TeacherHandle::frozen_random(&cfg.model, cfg.teacher_seed)
    } else {
        TeacherHandle::from_feature_file(Path::new(&cfg.teacher), cfg.model.width, cfg.teacher_seed)
    }
}

/// Training state: model, optimizer moments, data schedule and log.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelState<f32>,
    pub teacher: TeacherHandle<f32>,
    pub adam: AdamState,
    pub registry: Registry,
    pub norm: Option<NormStats>,
    pub scheduler: BatchScheduler,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub metrics: Vec<MetricsRecord>,
    plans: Option<(usize, Vec<BatchPlan>)>,
}

impl Trainer {
    /// Checks every data/model incompatibility up front.
    pub fn new(config: TrainConfig, registry: Registry, teacher: TeacherHandle<f32>) -> Result<Self> {
        config.validate()?;
        let model = ModelState::init(&config.model, config.seed)?;
        Self::assemble(config, registry, teacher, model)
    }

    fn assemble(
        config: TrainConfig,
        registry: Registry,
        teacher: TeacherHandle<f32>,
        model: ModelState<f32>,
    ) -> Result<Self> {
        let (h, w) = registry.image_size()?;
        if (h, w) != (config.model.image_size, config.model.image_size) {
            return Err(Error::Config(format!(
                "data is {h}x{w} but the model expects {0}x{0}",
                config.model.image_size
            )));
        }
        if teacher.width != config.model.width {
            return Err(Error::Config(format!(
                "teacher emits width {}, encoder width is {}",
                teacher.width, config.model.width
            )));
        }
        if config.flip && config.objective.enable_okd && !matches!(teacher.source, crate::model::TeacherSource::FrozenRandom(_)) {
            return Err(Error::Config(
                "precomputed teacher features cannot follow flipped inputs; set flip = false".into(),
            ));
        }
        let norm = if config.normalize {
            Some(registry.fit_norm()?)
        } else {
            None
        };
        let scheduler = BatchScheduler::new(&registry, config.batch(), config.model.tokens())?;
        Ok(Trainer {
            adam: AdamState::new(&model.store),
            config,
            model,
            teacher,
            registry,
            norm,
            scheduler,
            step: 0,
            metrics: Vec::new(),
            plans: None,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.scheduler.steps_per_epoch()
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        lr_schedule(
            step,
            self.total_steps(),
            self.config.warmup_epochs * self.steps_per_epoch(),
            self.config.lr,
        )
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
            weight_decay: self.config.weight_decay,
        }
    }

    /// The batch the next step will consume.
    pub fn next_batch(&mut self) -> Result<Batch<f32>> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (self.step / spe, self.step % spe);
        if self.plans.as_ref().map(|p| p.0) != Some(epoch) {
            self.plans = Some((epoch, self.scheduler.epoch(epoch)?));
        }
        let plan = &self.plans.as_ref().unwrap().1[k];
        materialize(plan, &self.registry, self.norm.as_ref())
    }

    /// One forward/backward/update; returns the loss before the update.
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let batch = self.next_batch()?;
        let lr = self.lr_at(self.step);
        let mut g = Graph::new();
        let out = total_loss(&mut g, &batch, &self.model, &self.teacher, &self.config.objective)?;
        g.backward(out.total)?;
        let mut grads = g.param_grads(&self.model.store);
        optim::check_grads(&self.model.store, &grads)?;
        if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.config.grad_clip);
        }
        let cfg = self.adam_config();
        adamw_step(&mut self.model.store, &grads, &mut self.adam, lr, &cfg)?;
        let rec = MetricsRecord::new(self.step, batch.epoch, lr, &out.breakdown);
        self.step += 1;
        self.metrics.push(rec.clone());
        Ok(rec)
    }

    /// Evaluates the loss of the next batch without updating anything.
    pub fn peek_loss(&mut self) -> Result<LossBreakdown> {
        let batch = self.next_batch()?;
        let mut g = Graph::new();
        Ok(total_loss(&mut g, &batch, &self.model, &self.teacher, &self.config.objective)?.breakdown)
    }

    /// Trains to the end, calling `on_epoch(self, epoch)` after each epoch.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, usize) -> Result<()>) -> Result<()> {
        let spe = self.steps_per_epoch();
        while !self.is_done() {
            self.train_step()?;
            if self.step % spe == 0 {
                on_epoch(self, self.step / spe)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self)
    }

    /// Resumes from a checkpoint over the same registry and teacher.
    pub fn resume(ckpt: &Checkpoint, registry: Registry, teacher: TeacherHandle<f32>) -> Result<Self> {
        let config = ckpt.config()?;
        let model = ckpt.model(&config)?;
        let mut t = Self::assemble(config, registry, teacher, model)?;
        t.adam = ckpt.adam(&t.model.store)?;
        t.step = ckpt.step()?;
        t.metrics = ckpt.metrics_tail()?;
        Ok(t)
    }
}
