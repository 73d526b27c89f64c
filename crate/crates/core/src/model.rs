//! The assembled network: modality tokenizers, one shared encoder, a shared
//! reconstruction decoder, the auxiliary cross-modal decoder, the
//! cross-attention buffer and a frozen teacher.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::FeatureFile;
use crate::nn::{
    self, AttentionParams, BlockParams, LinearParams, NormParams, PatchEmbedParams,
};
use crate::numcore::{Float, Graph, ParamId, ParamStore, Tensor, Var, EPS_NORM};

pub use crate::nn::Modality;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input extent in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    pub decoder_depth: usize,
    pub cdr_depth: usize,
    pub mlp_ratio: usize,
    /// Channels predicted per pixel by the cross-modal head.
    pub cdr_channels: usize,
    pub init_std: f64,
    pub patch_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            width: 64,
            heads: 4,
            encoder_depth: 4,
            decoder_width: 64,
            decoder_heads: 4,
            decoder_depth: 8,
            cdr_depth: 8,
            mlp_ratio: 4,
            cdr_channels: 1,
            init_std: 0.02,
            patch_bias: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.decoder_heads == 0 || self.decoder_width % self.decoder_heads != 0 {
            return bad(format!(
                "decoder_width {} not divisible by decoder_heads {}",
                self.decoder_width, self.decoder_heads
            ));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 || self.cdr_depth == 0 {
            return bad("encoder, decoder and cdr depths must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be at least 1".into());
        }
        if !matches!(self.cdr_channels, 1 | 3) {
            return bad(format!("cdr_channels must be 1 or 3, got {}", self.cdr_channels));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad(format!("init_std must be positive, got {}", self.init_std));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch;
        (g, g)
    }

    pub fn tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }
}

/// Binary per-patch visibility shared by both modalities of a pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    mask: Vec<bool>,
    visible: Vec<usize>,
    masked: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from the visible patches in encoder order; every other
    /// patch is masked, in `masked_order`.
    pub fn new(tokens: usize, visible: Vec<usize>, masked: Vec<usize>) -> Result<Self> {
        let mut mask = vec![true; tokens];
        let mut seen = vec![false; tokens];
        for &i in visible.iter().chain(&masked) {
            if i >= tokens || seen[i] {
                return Err(Error::Contract(format!(
                    "mask plan index {i} out of range or repeated (M = {tokens})"
                )));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) || visible.is_empty() {
            return Err(Error::Contract(
                "mask plan must cover every patch and keep at least one visible".into(),
            ));
        }
        for &i in &visible {
            mask[i] = false;
        }
        Ok(MaskPlan {
            mask,
            visible,
            masked,
        })
    }

    /// Everything visible, in grid order.
    pub fn full(tokens: usize) -> Self {
        MaskPlan {
            mask: vec![false; tokens],
            visible: (0..tokens).collect(),
            masked: Vec::new(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.mask.len()
    }

    /// `m_i = true` marks a masked patch.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    pub fn n_visible(&self) -> usize {
        self.visible.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked.len()
    }

    pub fn ratio(&self) -> f64 {
        self.masked.len() as f64 / self.mask.len() as f64
    }

    /// Position of every grid patch within `visible ++ masked`.
    pub fn restore_index(&self) -> Vec<usize> {
        let mut out = vec![0; self.mask.len()];
        for (pos, &i) in self.visible.iter().chain(&self.masked).enumerate() {
            out[i] = pos;
        }
        out
    }

    fn check(&self, tokens: usize) -> Result<()> {
        if self.tokens() != tokens {
            return Err(Error::Contract(format!(
                "mask plan covers {} patches, model has {tokens}",
                self.tokens()
            )));
        }
        Ok(())
    }
}

/// Tokenizers, transformer blocks and final norm of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayout {
    pub embed: PatchEmbedParams,
    pub blocks: Vec<BlockParams>,
    pub norm: NormParams,
}

impl EncoderLayout {
    fn init<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let embed = PatchEmbedParams::init(
            store,
            rng,
            &format!("{prefix}embed"),
            (cfg.image_size, cfg.image_size),
            cfg.patch,
            cfg.width,
            cfg.patch_bias,
            cfg.init_std,
        )?;
        let blocks = (0..cfg.encoder_depth)
            .map(|i| {
                BlockParams::init(
                    store,
                    rng,
                    &format!("{prefix}encoder.{i}"),
                    cfg.width,
                    cfg.heads,
                    cfg.mlp_ratio,
                    cfg.init_std,
                )
            })
            .collect::<Result<_>>()?;
        let norm = NormParams::init(store, &format!("{prefix}encoder.norm"), cfg.width);
        Ok(EncoderLayout {
            embed,
            blocks,
            norm,
        })
    }

    /// Encodes the patches listed in `rows`, in that order.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        modality: Modality,
        rows: &[usize],
    ) -> Result<Var> {
        let mut x = nn::patch_embed_rows(g, store, &self.embed, image, modality, rows)?;
        for b in &self.blocks {
            x = nn::transformer_block(g, store, b, x)?;
        }
        self.norm.forward(g, store, x)
    }
}

/// A decoder stack fed from the encoder through a width adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayout {
    pub adapter: LinearParams,
    pub mask_token: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: NormParams,
}

impl DecoderLayout {
    fn init<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        depth: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let dw = cfg.decoder_width;
        let adapter =
            LinearParams::init(store, rng, &format!("{prefix}.adapter"), cfg.width, dw, true, cfg.init_std);
        let mask_token = store.add(
            format!("{prefix}.mask_token"),
            nn::trunc_normal(rng, &[1, dw], cfg.init_std),
            false,
        );
        let pos = store.add(format!("{prefix}.pos"), Tensor::zeros(&[cfg.tokens(), dw]), false);
        let blocks = (0..depth)
            .map(|i| {
                BlockParams::init(
                    store,
                    rng,
                    &format!("{prefix}.{i}"),
                    dw,
                    cfg.decoder_heads,
                    cfg.mlp_ratio,
                    cfg.init_std,
                )
            })
            .collect::<Result<_>>()?;
        let norm = NormParams::init(store, &format!("{prefix}.norm"), dw);
        Ok(DecoderLayout {
            adapter,
            mask_token,
            pos,
            blocks,
            norm,
        })
    }

    /// Full-grid decoder features `[M × D_dec]`.
    fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let rows = g.shape(x)[0];
        if rows != plan.n_visible() {
            return Err(Error::Contract(format!(
                "decoder got {rows} visible tokens, plan has {}",
                plan.n_visible()
            )));
        }
        let adapted = self.adapter.forward(g, store, x)?;
        let shuffled = if plan.n_masked() == 0 {
            adapted
        } else {
            let tok = g.param(store, self.mask_token);
            let fill = g.repeat_rows(tok, plan.n_masked())?;
            g.concat_rows(&[adapted, fill])?
        };
        let mut h = g.gather_rows(shuffled, &plan.restore_index())?;
        let pos = g.param(store, self.pos);
        h = g.add(h, pos)?;
        for b in &self.blocks {
            h = nn::transformer_block(g, store, b, h)?;
        }
        self.norm.forward(g, store, h)
    }
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub encoder: EncoderLayout,
    pub decoder: DecoderLayout,
    pub head_optical: LinearParams,
    pub head_sar: LinearParams,
    pub cdr: DecoderLayout,
    pub cdr_head: LinearParams,
    pub buffer: AttentionParams,
}

/// Coarse parameter grouping used by gradient-flow audits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Tokenizers,
    Encoder,
    Decoder,
    PixelHeads,
    CdrDecoder,
    Buffer,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Tokenizers,
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::PixelHeads,
        ParamGroup::CdrDecoder,
        ParamGroup::Buffer,
    ];

    pub fn of(name: &str) -> Option<ParamGroup> {
        let head = name.split('.').next()?;
        Some(match head {
            "embed" => ParamGroup::Tokenizers,
            "encoder" => ParamGroup::Encoder,
            "decoder" => ParamGroup::Decoder,
            "head" => ParamGroup::PixelHeads,
            "cdr" => ParamGroup::CdrDecoder,
            "buffer" => ParamGroup::Buffer,
            _ => return None,
        })
    }
}

/// All learnable parameters plus the handles that address them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Float = f32> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub store: ParamStore<T>,
}

impl<T: Float> ModelState<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let s = config.init_std;
        let pp = config.patch * config.patch;
        let encoder = EncoderLayout::init(&mut store, &mut rng, "", config)?;
        let decoder = DecoderLayout::init(&mut store, &mut rng, "decoder", config.decoder_depth, config)?;
        let dw = config.decoder_width;
        let head_optical = LinearParams::init(&mut store, &mut rng, "head.optical", dw, 3 * pp, true, s);
        let head_sar = LinearParams::init(&mut store, &mut rng, "head.sar", dw, pp, true, s);
        let cdr = DecoderLayout::init(&mut store, &mut rng, "cdr", config.cdr_depth, config)?;
        let cdr_head = LinearParams::init(
            &mut store,
            &mut rng,
            "cdr.head",
            dw,
            config.cdr_channels * pp,
            true,
            s,
        );
        let buffer = AttentionParams::init_buffer(&mut store, &mut rng, "buffer", config.width, s);
        Ok(ModelState {
            config: config.clone(),
            layout: Layout {
                encoder,
                decoder,
                head_optical,
                head_sar,
                cdr,
                cdr_head,
                buffer,
            },
            store,
        })
    }

    pub fn cast<U: Float>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            layout: self.layout.clone(),
            store: self.store.cast(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.config.tokens()
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| ParamGroup::of(self.store.name(id)) == Some(group))
            .collect()
    }

    /// Visible-token embeddings `[M_vis × D]` in plan order.
    pub fn encode_visible(
        &self,
        g: &mut Graph<T>,
        image: &Tensor<T>,
        modality: Modality,
        plan: &MaskPlan,
    ) -> Result<Var> {
        plan.check(self.tokens())?;
        self.layout
            .encoder
            .forward(g, &self.store, image, modality, plan.visible())
    }

    /// Per-patch pixel predictions `[M × C·p²]` for `modality`.
    pub fn decode_reconstruct(
        &self,
        g: &mut Graph<T>,
        x: Var,
        plan: &MaskPlan,
        modality: Modality,
    ) -> Result<Var> {
        plan.check(self.tokens())?;
        let h = self.layout.decoder.forward(g, &self.store, x, plan)?;
        let head = match modality {
            Modality::Optical => &self.layout.head_optical,
            Modality::Sar => &self.layout.head_sar,
        };
        head.forward(g, &self.store, h)
    }

    /// Cross-modal predictions `[M × c·p²]` from the auxiliary decoder; the
    /// same head serves both source modalities.
    pub fn decode_cdr(&self, g: &mut Graph<T>, x: Var, plan: &MaskPlan) -> Result<Var> {
        plan.check(self.tokens())?;
        let h = self.layout.cdr.forward(g, &self.store, x, plan)?;
        self.layout.cdr_head.forward(g, &self.store, h)
    }

    /// Conditions each modality on the other through the one shared buffer.
    pub fn condition(&self, g: &mut Graph<T>, x_o: Var, x_s: Var) -> Result<(Var, Var)> {
        let b = &self.layout.buffer;
        let o = nn::cross_attention(g, &self.store, b, x_o, x_s)?;
        let s = nn::cross_attention(g, &self.store, b, x_s, x_o)?;
        Ok((o, s))
    }

    /// Dense encoder tokens `[M × D]` outside of any training graph.
    pub fn encode_dense(&self, image: &Tensor<T>, modality: Modality) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let plan = MaskPlan::full(self.tokens());
        let x = self.encode_visible(&mut g, image, modality, &plan)?;
        g.ensure_finite()?;
        Ok(g.value(x).clone())
    }

    /// Mean-pooled dense encoder tokens, as used for probing.
    pub fn pooled_features(&self, image: &Tensor<T>, modality: Modality) -> Result<Vec<f64>> {
        let t = self.encode_dense(image, modality)?;
        let (m, d) = t.rows_cols();
        let mut out = vec![0.0; d];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(t.row(r)) {
                *o += Float::to_f64(*v);
            }
        }
        out.iter_mut().for_each(|v| *v /= m as f64);
        Ok(out)
    }
}

/// Token mean followed by l2 normalization: `[M' × D] -> [1 × D]`.
pub fn global_pool<T: Float>(g: &mut Graph<T>, tokens: Var) -> Result<Var> {
    let d = g.shape(tokens).last().copied().unwrap_or(0);
    let m = g.mean_rows(tokens)?;
    let m = g.reshape(m, &[1, d])?;
    Ok(g.l2_normalize(m, EPS_NORM))
}

/// Where teacher features come from.
#[derive(Clone, Debug, PartialEq)]
pub enum TeacherSource<T: Float> {
    /// A seeded, randomly initialised encoder with the student's architecture.
    FrozenRandom(EncoderLayout),
    /// Precomputed `[M × D_t]` features per sample id.
    Features(HashMap<String, Tensor<T>>),
}

/// Frozen feature provider for the distillation term.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherHandle<T: Float = f32> {
    pub source: TeacherSource<T>,
    /// Teacher output width `D_t`.
    pub width: usize,
    /// `D_t -> D` map, present only when the widths differ.
    pub adapter: Option<LinearParams>,
    /// Frozen parameters of the encoder and adapter.
    pub store: ParamStore<T>,
}

impl<T: Float> TeacherHandle<T> {
    pub fn frozen_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = EncoderLayout::init(&mut store, &mut rng, "teacher.", config)?;
        store.freeze();
        Ok(TeacherHandle {
            source: TeacherSource::FrozenRandom(enc),
            width: config.width,
            adapter: None,
            store,
        })
    }

    /// Features read from a file written by [`FeatureFile::write`]. A frozen
    /// random linear adapter maps `D_t` to `width` when they differ.
    pub fn from_feature_file(path: &Path, width: usize, seed: u64) -> Result<Self> {
        let file = FeatureFile::read(path)?;
        let d_t = file.width;
        let features = file
            .into_samples()
            .into_iter()
            .map(|(id, t)| (id, t.cast()))
            .collect();
        Self::from_features(features, d_t, width, seed)
    }

    pub fn from_features(
        features: HashMap<String, Tensor<T>>,
        teacher_width: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let adapter = (teacher_width != width).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let std = 1.0 / (teacher_width as f64).sqrt();
            LinearParams::init(&mut store, &mut rng, "teacher.adapter", teacher_width, width, false, std)
        });
        store.freeze();
        Ok(TeacherHandle {
            source: TeacherSource::Features(features),
            width: teacher_width,
            adapter,
            store,
        })
    }

    pub fn cast<U: Float>(&self) -> TeacherHandle<U> {
        TeacherHandle {
            source: match &self.source {
                TeacherSource::FrozenRandom(e) => TeacherSource::FrozenRandom(e.clone()),
                TeacherSource::Features(f) => {
                    TeacherSource::Features(f.iter().map(|(k, v)| (k.clone(), v.cast())).collect())
                }
            },
            width: self.width,
            adapter: self.adapter,
            store: self.store.cast(),
        }
    }

    /// Teacher tokens of the full optical image gathered at the plan's visible
    /// indices, `[M_vis × D]`. Never tracked for gradients.
    pub fn features(&self, optical: &Tensor<T>, sample_id: &str, plan: &MaskPlan) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let full = match &self.source {
            TeacherSource::FrozenRandom(enc) => {
                let all: Vec<usize> = (0..plan.tokens()).collect();
                let x = enc.forward(&mut g, &self.store, optical, Modality::Optical, &all)?;
                g.value(x).clone()
            }
            TeacherSource::Features(map) => map
                .get(sample_id)
                .ok_or_else(|| Error::Ingest {
                    sample: sample_id.to_string(),
                    detail: "no teacher features for this sample".into(),
                })?
                .clone(),
        };
        let (m, d) = full.rows_cols();
        if m != plan.tokens() || d != self.width {
            return Err(Error::Ingest {
                sample: sample_id.to_string(),
                detail: format!(
                    "teacher features are {m}x{d}, expected {}x{}",
                    plan.tokens(),
                    self.width
                ),
            });
        }
        let vis = full.gather_rows(plan.visible())?;
        match &self.adapter {
            None => Ok(vis),
            Some(a) => {
                let x = g.constant(vis);
                let y = a.forward(&mut g, &self.store, x)?;
                Ok(g.value(y).clone())
            }
        }
    }
}
