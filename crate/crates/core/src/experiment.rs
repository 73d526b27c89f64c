//! Toy-scale variant comparison: trains the ablation variants on identical
//! synthetic data and seeds, then measures token-spectrum effective rank
//! and linear-probe accuracy of the frozen encoders.

use std::fmt;
use std::str::FromStr;

use crate::data::{NormStats, Sample, SynthConfig};
use crate::diagnostics::{
    linear_probe, pooled_matrix, singular_spectrum, token_matrix, Matrix, ProbeConfig, SpectrumReport,
};
use crate::error::{Error, Result};
use crate::model::{Modality, ModelState};
use crate::trainer::{load_registry, load_teacher, MetricsRecord, TrainConfig, Trainer};

/// Objective combinations compared in the ordering experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Baseline + contrastive loss on raw pooled embeddings.
    Rigid,
    /// MAE, plus OKD when the base config enables it.
    Baseline,
    /// Baseline + conditioned contrastive loss.
    Ccl,
    /// Full objective.
    CclCdr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Rigid, Variant::Baseline, Variant::Ccl, Variant::CclCdr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rigid => "rigid",
            Variant::Baseline => "baseline",
            Variant::Ccl => "ccl",
            Variant::CclCdr => "ccl+cdr",
        }
    }

    pub fn apply(self, c: &mut TrainConfig) {
        let o = &mut c.objective;
        (o.enable_ccl, o.rigid_contrastive, o.enable_cdr) = match self {
            Variant::Rigid => (true, true, false),
            Variant::Baseline => (false, false, false),
            Variant::Ccl => (true, false, false),
            Variant::CclCdr => (true, false, true),
        };
    }

    /// The variant whose flags a config carries, if any.
    pub fn of(c: &TrainConfig) -> Option<Variant> {
        let o = &c.objective;
        Variant::ALL
            .into_iter()
            .find(|v| (o.enable_ccl, o.rigid_contrastive, o.enable_cdr) == v.flags())
    }

    fn flags(self) -> (bool, bool, bool) {
        let mut c = TrainConfig::default();
        self.apply(&mut c);
        (c.objective.enable_ccl, c.objective.rigid_contrastive, c.objective.enable_cdr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Shared settings of one comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub base: TrainConfig,
    /// Labeled scenes the encoders are evaluated on (never trained on).
    pub eval_scenes: usize,
    /// Class coherence of the evaluation scenes, so the majority label
    /// describes most of the image.
    pub eval_coherence: f64,
    /// Images whose tokens feed the spectrum.
    pub spectrum_images: usize,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    /// Small enough that one run takes seconds on a single core.
    pub fn toy() -> Self {
        let mut base = TrainConfig::default();
        for (k, v) in [
            ("epochs", "50"),
            ("warmup_epochs", "5"),
            ("batch_size", "8"),
            ("lr", "0.001"),
            ("image_size", "32"),
            ("patch", "8"),
            ("width", "32"),
            ("heads", "4"),
            ("encoder_depth", "2"),
            ("decoder_width", "32"),
            ("decoder_heads", "4"),
            ("decoder_depth", "2"),
            ("cdr_depth", "2"),
            ("synth_scenes", "64"),
            ("synth_unpaired_fraction", "0.25"),
        ] {
            base.set(k, v).expect("toy config key");
        }
        ExperimentConfig {
            base,
            eval_scenes: 200,
            eval_coherence: 0.7,
            spectrum_images: 64,
            probe: ProbeConfig::default(),
        }
    }

    /// Training config of one (variant, seed) cell. Data, initialization and
    /// teacher depend on the seed only.
    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        let mut c = self.base.clone();
        c.seed = seed;
        c.synth_seed = seed;
        c.teacher_seed = seed.wrapping_add(1);
        variant.apply(&mut c);
        c
    }

    pub fn eval_set(&self, seed: u64) -> Result<Vec<Sample<f32>>> {
        SynthConfig {
            scenes: self.eval_scenes,
            size: self.base.model.image_size,
            regions: self.base.synth_regions,
            seed: seed.wrapping_add(0x5eed_0000),
            class_coherence: self.eval_coherence,
            ..Default::default()
        }
        .samples()
    }
}

/// Spectrum and probe measurements of one frozen encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Optical and SAR tokens stacked, centered.
    pub spectrum: SpectrumReport,
    pub rank_optical: f64,
    pub rank_sar: f64,
    pub probe_optical: f64,
    pub probe_sar: f64,
}

impl Evaluation {
    pub fn effective_rank(&self) -> f64 {
        self.spectrum.effective_rank
    }
}

pub fn evaluate(
    model: &ModelState<f32>,
    samples: &[Sample<f32>],
    norm: Option<&NormStats>,
    spectrum_images: usize,
    probe: &ProbeConfig,
    label: &str,
) -> Result<Evaluation> {
    let head = &samples[..spectrum_images.min(samples.len())];
    let to = token_matrix(model, head, Modality::Optical, norm)?;
    let ts = token_matrix(model, head, Modality::Sar, norm)?;
    let mut rows: Vec<Vec<f64>> = (0..to.rows).map(|r| to.row(r).to_vec()).collect();
    rows.extend((0..ts.rows).map(|r| ts.row(r).to_vec()));
    let joint = Matrix::from_rows(&rows);
    let mut acc = [0.0; 2];
    for (k, m) in [Modality::Optical, Modality::Sar].into_iter().enumerate() {
        let (x, y) = pooled_matrix(model, samples, m, norm)?;
        acc[k] = linear_probe(&x, &y, probe)?.accuracy;
    }
    Ok(Evaluation {
        spectrum: singular_spectrum(&joint, true, label)?,
        rank_optical: singular_spectrum(&to, true, label)?.effective_rank,
        rank_sar: singular_spectrum(&ts, true, label)?.effective_rank,
        probe_optical: acc[0],
        probe_sar: acc[1],
    })
}

/// Outcome of one trained (variant, seed) cell.
#[derive(Clone, Debug)]
pub struct Run {
    pub variant: Variant,
    pub seed: u64,
    pub eval: Evaluation,
    pub metrics: Vec<MetricsRecord>,
}

/// Trains one variant to completion and evaluates it.
pub fn run_variant(cfg: &ExperimentConfig, variant: Variant, seed: u64) -> Result<Run> {
    let tc = cfg.train_config(variant, seed);
    let registry = load_registry(&tc)?;
    let teacher = load_teacher(&tc)?;
    let mut t = Trainer::new(tc, registry, teacher)?;
    t.run(|_, _| Ok(()))?;
    let samples = cfg.eval_set(seed)?;
    let eval = evaluate(&t.model, &samples, t.norm.as_ref(), cfg.spectrum_images, &cfg.probe, variant.name())?;
    Ok(Run {
        variant,
        seed,
        eval,
        metrics: std::mem::take(&mut t.metrics),
    })
}

/// The same architecture at its initialization, never trained.
pub fn random_encoder(cfg: &ExperimentConfig, seed: u64) -> Result<Evaluation> {
    let tc = cfg.train_config(Variant::Baseline, seed);
    let model = ModelState::<f32>::init(&tc.model, seed)?;
    let norm = if tc.normalize {
        Some(load_registry(&tc)?.fit_norm()?)
    } else {
        None
    };
    let samples = cfg.eval_set(seed)?;
    evaluate(&model, &samples, norm.as_ref(), cfg.spectrum_images, &cfg.probe, "random")
}
