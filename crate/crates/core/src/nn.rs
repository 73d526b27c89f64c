//! Transformer building blocks over [`numcore`](crate::numcore).
//!
//! Parameters live in a [`ParamStore`]; the structs here only hold
//! [`ParamId`] handles, so two modules holding the same handle share weights.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numcore::{Float, Graph, ParamId, ParamStore, Tensor, Var, EPS_LAYER_NORM};

/// Input sensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Optical,
    Sar,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Optical, Modality::Sar];

    pub fn channels(self) -> usize {
        match self {
            Modality::Optical => 3,
            Modality::Sar => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Optical => "optical",
            Modality::Sar => "sar",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "optical" => Some(Modality::Optical),
            "sar" => Some(Modality::Sar),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Normal(0, std) truncated to ±2 std by rejection.
pub fn trunc_normal<T: Float, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break T::from_f64(z * std);
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl LinearParams {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            trunc_normal(rng, &[d_in, d_out], std),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), false));
        LinearParams {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    /// `x[n×d_in] · W + b`
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init<T: Float>(store: &mut ParamStore<T>, name: &str, d: usize) -> Self {
        NormParams {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]), false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), false),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, EPS_LAYER_NORM)
    }
}

/// Multi-head scaled dot-product attention. With one head and no output
/// projection this is exactly the single-head conditioning form.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: Option<LinearParams>,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionParams {
    /// Self-attention projections with biases and an output projection.
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        std: f64,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "width {width} is not divisible by {heads} heads"
            )));
        }
        Ok(AttentionParams {
            q: LinearParams::init(store, rng, &format!("{name}.q"), width, width, true, std),
            k: LinearParams::init(store, rng, &format!("{name}.k"), width, width, true, std),
            v: LinearParams::init(store, rng, &format!("{name}.v"), width, width, true, std),
            out: Some(LinearParams::init(
                store,
                rng,
                &format!("{name}.proj"),
                width,
                width,
                true,
                std,
            )),
            heads,
            head_dim: width / heads,
        })
    }

    /// Single-head, bias-free, projection-free cross-attention buffer.
    pub fn init_buffer<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        std: f64,
    ) -> Self {
        AttentionParams {
            q: LinearParams::init(store, rng, &format!("{name}.q"), width, width, false, std),
            k: LinearParams::init(store, rng, &format!("{name}.k"), width, width, false, std),
            v: LinearParams::init(store, rng, &format!("{name}.v"), width, width, false, std),
            out: None,
            heads: 1,
            head_dim: width,
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Attention output (before any residual) plus the per-head weight matrices.
pub fn attention_with_weights<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    x: Var,
    ctx: Var,
) -> Result<(Var, Vec<Var>)> {
    let d = p.width();
    for (what, v) in [("query", x), ("context", ctx)] {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != d {
            return Err(Error::shape(
                "attention",
                format!("{what} tokens {s:?}, model width {d}"),
            ));
        }
    }
    let q = p.q.forward(g, store, x)?;
    let k = p.k.forward(g, store, ctx)?;
    let v = p.v.forward(g, store, ctx)?;
    let scale = 1.0 / (p.head_dim as f64).sqrt();

    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            let s = h * p.head_dim;
            (
                g.slice_cols(q, s, p.head_dim)?,
                g.slice_cols(k, s, p.head_dim)?,
                g.slice_cols(v, s, p.head_dim)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax(scores, 1)?;
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = match &p.out {
        Some(o) => o.forward(g, store, merged)?,
        None => merged,
    };
    Ok((out, weights))
}

pub fn self_attention<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    tokens: Var,
) -> Result<Var> {
    Ok(attention_with_weights(g, store, p, tokens, tokens)?.0)
}

/// `x + softmax(x W_q (c W_k)ᵀ / √d) c W_v`, residual included.
pub fn cross_attention<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &AttentionParams,
    query_tokens: Var,
    context_tokens: Var,
) -> Result<Var> {
    let (a, _) = attention_with_weights(g, store, p, query_tokens, context_tokens)?;
    g.add(query_tokens, a)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

impl BlockParams {
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        std: f64,
    ) -> Result<Self> {
        let hidden = width * mlp_ratio;
        Ok(BlockParams {
            norm1: NormParams::init(store, &format!("{name}.norm1"), width),
            attn: AttentionParams::init(store, rng, &format!("{name}.attn"), width, heads, std)?,
            norm2: NormParams::init(store, &format!("{name}.norm2"), width),
            mlp: MlpParams {
                fc1: LinearParams::init(store, rng, &format!("{name}.mlp.fc1"), width, hidden, true, std),
                fc2: LinearParams::init(store, rng, &format!("{name}.mlp.fc2"), hidden, width, true, std),
            },
        })
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &BlockParams,
    x: Var,
) -> Result<Var> {
    let h = p.norm1.forward(g, store, x)?;
    let a = self_attention(g, store, &p.attn, h)?;
    let x = g.add(x, a)?;
    let h = p.norm2.forward(g, store, x)?;
    let h = p.mlp.fc1.forward(g, store, h)?;
    let h = g.gelu(h);
    let h = p.mlp.fc2.forward(g, store, h)?;
    g.add(x, h)
}

/// Per-modality patch projections and a positional table shared by both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedParams {
    pub optical: LinearParams,
    pub sar: LinearParams,
    pub patch: usize,
    pub grid: (usize, usize),
    pub pos: ParamId,
}

impl PatchEmbedParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Float, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        image: (usize, usize),
        patch: usize,
        width: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let (h, w) = image;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!(
                "image {h}x{w} is not divisible by patch size {patch}"
            )));
        }
        let grid = (h / patch, w / patch);
        let m = grid.0 * grid.1;
        let pp = patch * patch;
        Ok(PatchEmbedParams {
            optical: LinearParams::init(store, rng, &format!("{name}.optical"), 3 * pp, width, bias, std),
            sar: LinearParams::init(store, rng, &format!("{name}.sar"), pp, width, bias, std),
            patch,
            grid,
            pos: store.add(format!("{name}.pos"), Tensor::zeros(&[m, width]), false),
        })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn projection(&self, modality: Modality) -> &LinearParams {
        match modality {
            Modality::Optical => &self.optical,
            Modality::Sar => &self.sar,
        }
    }
}

/// Splits `[C×H×W]` into row-major patches `[M × C·p²]`, channel-major within a patch.
pub fn patchify<T: Float>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::shape("patchify", format!("expected [C,H,W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(
            "patchify",
            format!("{h}x{w} not divisible by patch {p}"),
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..p {
                    let row = ch * h * w + (py * p + dy) * w + px * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Tensor::new(&[gh * gw, c * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Float>(
    patches: &Tensor<T>,
    channels: usize,
    p: usize,
    grid: (usize, usize),
) -> Result<Tensor<T>> {
    let (m, d) = patches.rows_cols();
    if m != grid.0 * grid.1 || d != channels * p * p {
        return Err(Error::shape(
            "unpatchify",
            format!("{:?} for grid {grid:?}, {channels} channels, patch {p}", patches.shape()),
        ));
    }
    let (h, w) = (grid.0 * p, grid.1 * p);
    let mut out = vec![T::zero(); channels * h * w];
    for py in 0..grid.0 {
        for px in 0..grid.1 {
            let row = patches.row(py * grid.1 + px);
            for ch in 0..channels {
                for dy in 0..p {
                    let dst = ch * h * w + (py * p + dy) * w + px * p;
                    let src = ch * p * p + dy * p;
                    out[dst..dst + p].copy_from_slice(&row[src..src + p]);
                }
            }
        }
    }
    Tensor::new(&[channels, h, w], out)
}

/// Tokens for every patch: `flatten(patch_i) · W_mod + b + pos_i`.
pub fn patch_embed<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &PatchEmbedParams,
    image: &Tensor<T>,
    modality: Modality,
) -> Result<Var> {
    let all: Vec<usize> = (0..params.tokens()).collect();
    patch_embed_rows(g, store, params, image, modality, &all)
}

/// Tokens for the patches listed in `rows`, in that order.
pub fn patch_embed_rows<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &PatchEmbedParams,
    image: &Tensor<T>,
    modality: Modality,
    rows: &[usize],
) -> Result<Var> {
    let s = image.shape();
    if s.len() != 3 || s[0] != modality.channels() {
        return Err(Error::shape(
            "patch_embed",
            format!("{} image must be [{}, H, W], got {s:?}", modality.name(), modality.channels()),
        ));
    }
    if (s[1], s[2]) != (params.grid.0 * params.patch, params.grid.1 * params.patch) {
        return Err(Error::shape(
            "patch_embed",
            format!("image {}x{} does not match configured grid {:?}", s[1], s[2], params.grid),
        ));
    }
    let patches = patchify(image, params.patch)?.gather_rows(rows)?;
    let x = g.constant(patches);
    let x = params.projection(modality).forward(g, store, x)?;
    let pos = g.param(store, params.pos);
    let pos = g.gather_rows(pos, rows)?;
    g.add(x, pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        trunc_normal(&mut rng(seed), shape, 1.0)
    }

    #[test]
    fn patch_counts() {
        let mut store = ParamStore::<f32>::new();
        let p = PatchEmbedParams::init(&mut store, &mut rng(0), "e", (224, 224), 16, 8, true, 0.02)
            .unwrap();
        assert_eq!(p.tokens(), 196);
        let p = PatchEmbedParams::init(&mut store, &mut rng(0), "f", (32, 32), 8, 8, true, 0.02)
            .unwrap();
        assert_eq!(p.tokens(), 16);
        assert!(PatchEmbedParams::init(&mut store, &mut rng(0), "g", (30, 32), 8, 8, true, 0.02).is_err());
    }

    #[test]
    fn zero_image_zero_pos_gives_zero_tokens() {
        let mut store = ParamStore::<f32>::new();
        let p = PatchEmbedParams::init(&mut store, &mut rng(1), "e", (16, 16), 8, 4, false, 0.02)
            .unwrap();
        let mut g = Graph::new();
        let t = patch_embed(&mut g, &store, &p, &Tensor::zeros(&[3, 16, 16]), Modality::Optical).unwrap();
        assert_eq!(g.shape(t), &[4, 4]);
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patchify_round_trip_and_order() {
        let img = Tensor::<f64>::from_fn(&[2, 4, 4], |i| i as f64);
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.shape(), &[4, 8]);
        // second patch of the grid is the top-right block of channel 0
        assert_eq!(&p.row(1)[..4], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(unpatchify(&p, 2, 2, (2, 2)).unwrap(), img);
    }

    #[test]
    fn single_token_attention_passes_value() {
        let mut store = ParamStore::<f64>::new();
        let a = AttentionParams::init(&mut store, &mut rng(2), "a", 8, 2, 0.5).unwrap();
        let x = random(&[1, 8], 3);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, w) = attention_with_weights(&mut g, &store, &a, xv, xv).unwrap();
        for wv in w {
            assert_eq!(g.value(wv).data(), &[1.0]);
        }
        let v = a.v.forward(&mut g, &store, xv).unwrap();
        let expect = a.out.unwrap().forward(&mut g, &store, v).unwrap();
        for (p, q) in g.value(out).data().iter().zip(g.value(expect).data()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let a = AttentionParams::init(&mut store, &mut rng(4), "a", 8, 2, 0.5).unwrap();
        let x = random(&[6, 8], 5);
        let perm = [3, 0, 5, 1, 4, 2];
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self_attention(&mut g, &store, &a, xv).unwrap();
        let xp = g.constant(x.gather_rows(&perm).unwrap());
        let yp = self_attention(&mut g, &store, &a, xp).unwrap();
        let expect = g.value(y).gather_rows(&perm).unwrap();
        for (p, q) in g.value(yp).data().iter().zip(expect.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_zero_value_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let a = AttentionParams::init_buffer(&mut store, &mut rng(6), "ca", 8, 0.5);
        *store.get_mut(a.v.weight) = Tensor::zeros(&[8, 8]);
        let mut g = Graph::new();
        let x = g.constant(random(&[5, 8], 7).cast());
        let c = g.constant(random(&[3, 8], 8).cast());
        let y = cross_attention(&mut g, &store, &a, x, c).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn cross_attention_single_context_broadcasts() {
        let mut store = ParamStore::<f64>::new();
        let a = AttentionParams::init_buffer(&mut store, &mut rng(9), "ca", 4, 0.5);
        let x = random(&[3, 4], 10);
        let ctx = random(&[1, 4], 11);
        let cw = ctx.matmul(store.get(a.v.weight)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let cv = g.constant(ctx);
        let y = cross_attention(&mut g, &store, &a, xv, cv).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                let expect = x.row(r)[c] + cw.data()[c];
                assert!((g.value(y).row(r)[c] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one_f32() {
        let mut store = ParamStore::<f32>::new();
        let a = AttentionParams::init(&mut store, &mut rng(12), "a", 16, 4, 0.3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(random(&[7, 16], 13).cast());
        let (_, ws) = attention_with_weights(&mut g, &store, &a, x, x).unwrap();
        for w in ws {
            let t = g.value(w);
            for r in 0..7 {
                let s: f32 = t.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zeroed_residual_branches_make_block_identity() {
        let mut store = ParamStore::<f32>::new();
        let b = BlockParams::init(&mut store, &mut rng(14), "b", 8, 2, 4, 0.5).unwrap();
        *store.get_mut(b.attn.out.unwrap().weight) = Tensor::zeros(&[8, 8]);
        *store.get_mut(b.mlp.fc2.weight) = Tensor::zeros(&[32, 8]);
        let mut g = Graph::new();
        for m in [1, 5] {
            let x = g.constant(random(&[m, 8], 15).cast());
            let y = transformer_block(&mut g, &store, &b, x).unwrap();
            assert_eq!(g.value(y).data(), g.value(x).data());
        }
    }

    #[test]
    fn cross_attention_grad_check_over_projections() {
        let mut store = ParamStore::<f64>::new();
        let a = AttentionParams::init_buffer(&mut store, &mut rng(16), "ca", 4, 0.7);
        let x = random(&[3, 4], 17);
        let ctx = random(&[5, 4], 18);
        let check = crate::numcore::grad_check_params(
            |g, s| {
                let xv = g.constant(x.clone());
                let cv = g.constant(ctx.clone());
                let y = cross_attention(g, s, &a, xv, cv)?;
                let y = g.gelu(y);
                Ok(g.sum(y))
            },
            &store,
            1e-5,
        )
        .unwrap();
        assert!(check.max_rel_err < 1e-4, "{check:?}");
    }

    #[test]
    fn block_grad_check_on_input() {
        let mut store = ParamStore::<f64>::new();
        let b = BlockParams::init(&mut store, &mut rng(19), "b", 8, 2, 2, 0.4).unwrap();
        let x = random(&[4, 8], 20);
        let e = grad_check(
            |g, xv| {
                let y = transformer_block(g, &store, &b, xv)?;
                let w = g.constant(random(&[4, 8], 21));
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-4, "{e}");
    }
}
