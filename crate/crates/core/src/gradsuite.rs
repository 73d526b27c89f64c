//! Finite-difference audit of every graph op, network layer and loss term,
//! plus the composite objective over a tiny model, at 64-bit.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{make_mask, Batch, Sample};
use crate::error::{Error, Result};
use crate::model::{global_pool, MaskPlan, Modality, ModelConfig, ModelState, TeacherHandle};
use crate::nn::{self, AttentionParams, BlockParams, LinearParams, NormParams, PatchEmbedParams};
use crate::numcore::{grad_check_params, inject_sign_flip, five_point, rel_err, ParamCheck, Graph, OpKind, ParamStore, Tensor, Var};
use crate::objectives::{
    loss_ccl, loss_cdr, loss_mae, loss_okd, masked_mse, total_loss, DegradationMode, ObjectiveConfig, TAU,
};

/// Tolerance on the worst relative error for ops, layers and single losses.
pub const TOL_UNIT: f64 = 1e-4;
/// Tolerance for the composite objective through the whole model.
pub const TOL_MODEL: f64 = 1e-3;
/// Five-point stencil step.
pub const FD_STEP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Ops,
    Layers,
    Losses,
    Model,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Ops, Group::Layers, Group::Losses, Group::Model];

    pub fn name(self) -> &'static str {
        match self {
            Group::Ops => "ops",
            Group::Layers => "layers",
            Group::Losses => "losses",
            Group::Model => "model",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Group::Model => TOL_MODEL,
            _ => TOL_UNIT,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One checked function at one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub group: Group,
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    /// Parameter holding the worst coordinate.
    pub worst: String,
    pub coordinates: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.group.tolerance()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    pub groups: Vec<Group>,
    pub seeds: Vec<u64>,
    /// Negates the backward rule of one op while the suite runs, to prove
    /// the suite catches it.
    pub sign_flip: Option<OpKind>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            groups: Group::ALL.to_vec(),
            seeds: (0..20).collect(),
            sign_flip: None,
        }
    }
}

type LossFn = Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>;

struct Case {
    name: String,
    store: ParamStore<f64>,
    f: LossFn,
}

fn gauss(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random magnitudes in [0.3, 1.5] with random signs: away from the kink of |x|.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.3..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `Σ w ⊙ y` with fixed random weights, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7765_6967_6874);
    let w = gauss(&mut rng, g.shape(y), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(name: impl Into<String>, store: ParamStore<f64>, f: LossFn) -> Case {
    Case {
        name: name.into(),
        store,
        f,
    }
}

/// A store of named inputs; each name maps to one tensor.
fn inputs(items: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in items {
        s.add(n, t, false);
    }
    s
}

fn p(g: &mut Graph<f64>, s: &ParamStore<f64>, name: &str) -> Var {
    let id = s.find(name).expect("input registered");
    g.param(s, id)
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ws = seed;
    let mut out = Vec::new();
    let unary = |name: &str, x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>| {
        case(
            name,
            inputs(vec![("x", x)]),
            Box::new(move |g, s| {
                let x = p(g, s, "x");
                let y = op(g, x)?;
                weighted_sum(g, y, ws)
            }),
        )
    };
    let binary = |name: &str, a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>| {
        case(
            name,
            inputs(vec![("a", a), ("b", b)]),
            Box::new(move |g, s| {
                let a = p(g, s, "a");
                let b = p(g, s, "b");
                let y = op(g, a, b)?;
                weighted_sum(g, y, ws)
            }),
        )
    };
    let r = &mut rng;
    out.push(unary("leaf", gauss(r, &[3, 4], 1.0), |_, x| Ok(x)));
    out.push(binary("add", gauss(r, &[3, 4], 1.0), gauss(r, &[3, 4], 1.0), |g, a, b| g.add(a, b)));
    out.push(binary("sub", gauss(r, &[3, 4], 1.0), gauss(r, &[3, 4], 1.0), |g, a, b| g.sub(a, b)));
    out.push(binary("mul", gauss(r, &[3, 4], 1.0), gauss(r, &[3, 4], 1.0), |g, a, b| g.mul(a, b)));
    out.push(unary("scale", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.scale(x, -1.7))));
    out.push(unary("add_scalar", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.add_scalar(x, 0.3))));
    out.push(binary("add_row", gauss(r, &[3, 4], 1.0), gauss(r, &[4], 1.0), |g, a, b| g.add_row(a, b)));
    out.push(binary("matmul", gauss(r, &[3, 4], 1.0), gauss(r, &[4, 5], 1.0), |g, a, b| g.matmul(a, b)));
    out.push(binary("matmul_nt", gauss(r, &[3, 4], 1.0), gauss(r, &[5, 4], 1.0), |g, a, b| {
        g.matmul_nt(a, b)
    }));
    out.push(unary("transpose", gauss(r, &[3, 4], 1.0), |g, x| g.transpose(x)));
    out.push(unary("gelu", gauss(r, &[3, 4], 1.5), |g, x| Ok(g.gelu(x))));
    out.push(unary("abs", off_zero(r, &[3, 4]), |g, x| Ok(g.abs(x))));
    out.push(unary("square", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.square(x))));
    out.push(unary("exp", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.exp(x))));
    out.push(unary("log", uniform(r, &[3, 4], 0.5, 2.0), |g, x| Ok(g.log(x))));
    out.push(unary("sum", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.sum(x))));
    out.push(unary("mean", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.mean(x))));
    out.push(unary("mean_rows", gauss(r, &[3, 4], 1.0), |g, x| g.mean_rows(x)));
    out.push(unary("softmax", gauss(r, &[3, 4], 1.0), |g, x| g.softmax(x, 1)));
    out.push(unary("softmax_axis0", gauss(r, &[3, 4], 1.0), |g, x| g.softmax(x, 0)));
    out.push(unary("log_softmax", gauss(r, &[3, 4], 1.0), |g, x| g.log_softmax(x, 1)));
    out.push(case(
        "layer_norm",
        inputs(vec![
            ("x", gauss(r, &[3, 5], 1.0)),
            ("gamma", gauss(r, &[5], 1.0)),
            ("beta", gauss(r, &[5], 1.0)),
        ]),
        Box::new(move |g, s| {
            let (x, ga, be) = (p(g, s, "x"), p(g, s, "gamma"), p(g, s, "beta"));
            let y = g.layer_norm(x, ga, be, 1e-6)?;
            weighted_sum(g, y, ws)
        }),
    ));
    out.push(unary("l2_normalize", gauss(r, &[3, 4], 1.0), |g, x| Ok(g.l2_normalize(x, 1e-12))));
    out.push(unary("gather_rows", gauss(r, &[3, 4], 1.0), |g, x| g.gather_rows(x, &[2, 0, 2, 1])));
    out.push(binary("concat_rows", gauss(r, &[2, 4], 1.0), gauss(r, &[3, 4], 1.0), |g, a, b| {
        g.concat_rows(&[a, b, a])
    }));
    out.push(unary("slice_cols", gauss(r, &[3, 5], 1.0), |g, x| g.slice_cols(x, 1, 3)));
    out.push(binary("concat_cols", gauss(r, &[3, 2], 1.0), gauss(r, &[3, 4], 1.0), |g, a, b| {
        g.concat_cols(&[b, a])
    }));
    out.push(unary("repeat_rows", gauss(r, &[1, 4], 1.0), |g, x| g.repeat_rows(x, 3)));
    out.push(unary("reshape", gauss(r, &[3, 4], 1.0), |g, x| g.reshape(x, &[2, 6])));
    out
}

/// Store whose parameters are randomized well away from initialization
/// scale, so no gradient is vanishingly small.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn layer_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let ws = seed;
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let lin = LinearParams::init(&mut s, &mut rng, "lin", 4, 3, true, 0.5);
    s.add("x", gauss(&mut rng, &[5, 4], 1.0), false);
    randomize(&mut s, &mut rng, 0.3);
    out.push(case(
        "linear",
        s,
        Box::new(move |g, s| {
            let x = p(g, s, "x");
            let y = lin.forward(g, s, x)?;
            weighted_sum(g, y, ws)
        }),
    ));

    let mut s = ParamStore::new();
    let ln = NormParams::init(&mut s, "ln", 6);
    s.add("x", gauss(&mut rng, &[4, 6], 1.0), false);
    randomize(&mut s, &mut rng, 0.3);
    out.push(case(
        "norm",
        s,
        Box::new(move |g, s| {
            let x = p(g, s, "x");
            let y = ln.forward(g, s, x)?;
            weighted_sum(g, y, ws)
        }),
    ));

    let mut s = ParamStore::new();
    let att = AttentionParams::init(&mut s, &mut rng, "attn", 8, 2, 0.4)?;
    s.add("x", gauss(&mut rng, &[5, 8], 1.0), false);
    randomize(&mut s, &mut rng, 0.1);
    out.push(case(
        "self_attention",
        s,
        Box::new(move |g, s| {
            let x = p(g, s, "x");
            let y = nn::self_attention(g, s, &att, x)?;
            weighted_sum(g, y, ws)
        }),
    ));

    let mut s = ParamStore::new();
    let buf = AttentionParams::init_buffer(&mut s, &mut rng, "buffer", 6, 0.4);
    s.add("x", gauss(&mut rng, &[3, 6], 1.0), false);
    s.add("ctx", gauss(&mut rng, &[4, 6], 1.0), false);
    out.push(case(
        "cross_attention",
        s,
        Box::new(move |g, s| {
            let (x, c) = (p(g, s, "x"), p(g, s, "ctx"));
            let y = nn::cross_attention(g, s, &buf, x, c)?;
            weighted_sum(g, y, ws)
        }),
    ));

    let mut s = ParamStore::new();
    let blk = BlockParams::init(&mut s, &mut rng, "block", 8, 2, 2, 0.4)?;
    s.add("x", gauss(&mut rng, &[4, 8], 1.0), false);
    randomize(&mut s, &mut rng, 0.1);
    out.push(case(
        "transformer_block",
        s,
        Box::new(move |g, s| {
            let x = p(g, s, "x");
            let y = nn::transformer_block(g, s, &blk, x)?;
            weighted_sum(g, y, ws)
        }),
    ));

    let mut s = ParamStore::new();
    let emb = PatchEmbedParams::init(&mut s, &mut rng, "embed", (8, 8), 4, 5, true, 0.3)?;
    randomize(&mut s, &mut rng, 0.2);
    let img_o = uniform(&mut rng, &[3, 8, 8], 0.0, 1.0);
    let img_s = uniform(&mut rng, &[1, 8, 8], 0.0, 1.0);
    out.push(case(
        "patch_embed",
        s,
        Box::new(move |g, s| {
            let a = nn::patch_embed(g, s, &emb, &img_o, Modality::Optical)?;
            let b = nn::patch_embed_rows(g, s, &emb, &img_s, Modality::Sar, &[3, 1])?;
            let y = g.concat_rows(&[a, b])?;
            weighted_sum(g, y, ws)
        }),
    ));

    out.push(case(
        "global_pool",
        inputs(vec![("x", gauss(&mut rng, &[5, 6], 1.0))]),
        Box::new(move |g, s| {
            let x = p(g, s, "x");
            let y = global_pool(g, x)?;
            weighted_sum(g, y, ws)
        }),
    ));
    Ok(out)
}

fn random_plan(tokens: usize, seed: u64) -> Result<MaskPlan> {
    make_mask(tokens, 0.5, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b))
}

fn loss_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000));
    let (m, pch) = (8, 2);
    let plan = random_plan(m, seed)?;
    let mut out = Vec::new();

    let (t_o, t_s) = (gauss(&mut rng, &[m, 3 * pch * pch], 1.0), gauss(&mut rng, &[m, pch * pch], 1.0));
    let (pl, to, ts) = (plan.clone(), t_o.clone(), t_s.clone());
    out.push(case(
        "mae",
        inputs(vec![
            ("r_o", gauss(&mut rng, &[m, 3 * pch * pch], 1.0)),
            ("r_s", gauss(&mut rng, &[m, pch * pch], 1.0)),
        ]),
        Box::new(move |g, s| {
            let (a, b) = (p(g, s, "r_o"), p(g, s, "r_s"));
            loss_mae(g, a, b, &to, &ts, &pl, false)
        }),
    ));
    let (pl, ts) = (plan.clone(), t_s.clone());
    out.push(case(
        "mae_literal",
        inputs(vec![("r_s", gauss(&mut rng, &[m, pch * pch], 1.0))]),
        Box::new(move |g, s| {
            let a = p(g, s, "r_s");
            masked_mse(g, a, &ts, &pl, true)
        }),
    ));

    let d = 6;
    let teacher = gauss(&mut rng, &[plan.n_visible(), d], 1.0);
    let student = teacher.map(|_| 0.0);
    let mut st = student;
    for (v, t) in st.data_mut().iter_mut().zip(teacher.data()) {
        // keep every difference at least 0.3 away from the kink
        let m = rng.random_range(0.3..1.5);
        *v = if rng.random_bool(0.5) { t + m } else { t - m };
    }
    let pl = plan.clone();
    out.push(case(
        "okd",
        inputs(vec![("x_o", st)]),
        Box::new(move |g, s| {
            let x = p(g, s, "x_o");
            loss_okd(g, &teacher, x, &pl)
        }),
    ));

    for literal in [false, true] {
        out.push(case(
            if literal { "ccl_literal" } else { "ccl" },
            inputs(vec![("e_o", gauss(&mut rng, &[4, d], 1.0)), ("e_s", gauss(&mut rng, &[4, d], 1.0))]),
            Box::new(move |g, s| {
                let (a, b) = (p(g, s, "e_o"), p(g, s, "e_s"));
                let (a, b) = (g.l2_normalize(a, 1e-12), g.l2_normalize(b, 1e-12));
                // a larger temperature keeps the softmax away from saturation
                loss_ccl(g, a, b, 3.0 * TAU, literal)
            }),
        ));
    }

    let img_o = uniform(&mut rng, &[m, 3 * pch * pch], 0.0, 1.0);
    let img_s = uniform(&mut rng, &[m, pch * pch], 0.0, 1.0);
    for mode in DegradationMode::ALL {
        let c = mode.channels();
        let (pl, po, ps) = (plan.clone(), img_o.clone(), img_s.clone());
        out.push(case(
            format!("cdr_{}", mode.name()),
            inputs(vec![
                ("r_o", gauss(&mut rng, &[m, c * pch * pch], 1.0)),
                ("r_s", gauss(&mut rng, &[m, c * pch * pch], 1.0)),
            ]),
            Box::new(move |g, s| {
                let (a, b) = (p(g, s, "r_o"), p(g, s, "r_s"));
                loss_cdr(g, a, b, &po, &ps, &pl, pch, mode, false)
            }),
        ));
    }
    Ok(out)
}

/// Smallest network that still exercises every component.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch: 4,
        width: 4,
        heads: 2,
        encoder_depth: 1,
        decoder_width: 4,
        decoder_heads: 2,
        decoder_depth: 1,
        cdr_depth: 1,
        mlp_ratio: 2,
        cdr_channels: 1,
        init_std: 0.3,
        patch_bias: true,
    }
}

/// A paired batch of two random scenes with independent masks.
pub fn tiny_batch(cfg: &ModelConfig, seed: u64) -> Result<Batch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3000));
    let s = cfg.image_size;
    let samples = (0..2)
        .map(|i| Sample {
            id: format!("g{i}"),
            dataset: "gradcheck".into(),
            optical: Some(uniform(&mut rng, &[3, s, s], 0.0, 1.0)),
            sar: Some(uniform(&mut rng, &[1, s, s], 0.0, 1.0)),
            label: None,
        })
        .collect();
    let plans = (0..2)
        .map(|i| random_plan(cfg.tokens(), seed.wrapping_mul(31).wrapping_add(i)))
        .collect::<Result<_>>()?;
    Ok(Batch {
        samples,
        plans,
        paired: true,
        epoch: 0,
        step: 0,
    })
}

/// Smallest |teacher − student| over the distillation terms of a batch.
fn okd_margin(model: &ModelState<f64>, teacher: &TeacherHandle<f64>, batch: &Batch<f64>) -> Result<f64> {
    let mut margin = f64::INFINITY;
    for (s, plan) in batch.samples.iter().zip(&batch.plans) {
        let Some(img) = &s.optical else { continue };
        let mut g = Graph::new();
        let x = model.encode_visible(&mut g, img, Modality::Optical, plan)?;
        let t = teacher.features(img, &s.id, plan)?;
        for (a, b) in g.value(x).data().iter().zip(t.data()) {
            margin = margin.min((a - b).abs());
        }
    }
    Ok(margin)
}

/// Composite objective through the tiny model, checked over every parameter.
fn check_model(seed: u64) -> Result<ParamCheck> {
    let cfg = tiny_model_config();
    let mut model = ModelState::<f64>::init(&cfg, seed)?;
    randomize(&mut model.store, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(4000)), 0.2);
    let batch = tiny_batch(&cfg, seed)?;
    // |t − x| is not differentiable at 0: redraw the teacher until every
    // distillation difference sits well outside the stencil's reach
    let mut attempt = 0u64;
    let teacher = loop {
        let mut t = TeacherHandle::<f64>::frozen_random(&cfg, seed.wrapping_add(1))?;
        let salt = seed.wrapping_add(5000).wrapping_add(attempt << 32);
        randomize(&mut t.store, &mut ChaCha8Rng::seed_from_u64(salt), 0.5);
        if okd_margin(&model, &t, &batch)? > 50.0 * FD_STEP {
            break t;
        }
        attempt += 1;
    };
    let obj = ObjectiveConfig {
        tau: 3.0 * TAU,
        ..ObjectiveConfig::default()
    };
    let eval = |m: &ModelState<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = total_loss(&mut g, &batch, m, &teacher, &obj)?;
        Ok(g.scalar_value(out.total))
    };
    let mut g = Graph::new();
    let out = total_loss(&mut g, &batch, &model, &teacher, &obj)?;
    g.backward(out.total)?;
    let analytic = g.param_grads(&model.store);
    let mut res = ParamCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        for i in 0..model.store.get(id).numel() {
            let orig = model.store.get(id).data()[i];
            let numeric = five_point(
                |v| {
                    model.store.get_mut(id).data_mut()[i] = v;
                    eval(&model)
                },
                orig,
                FD_STEP,
            )?;
            model.store.get_mut(id).data_mut()[i] = orig;
            let e = rel_err(analytic[id.index()][i], numeric);
            if e > res.max_rel_err {
                res.max_rel_err = e;
                res.worst_param = model.store.name(id).to_string();
            }
            res.coordinates += 1;
        }
    }
    Ok(res)
}

fn cases(group: Group, seed: u64) -> Result<Vec<Case>> {
    match group {
        Group::Ops => Ok(op_cases(seed)),
        Group::Layers => layer_cases(seed),
        Group::Losses => loss_cases(seed),
        Group::Model => Ok(Vec::new()),
    }
}

/// Runs every requested check; numerical failures are rows, not errors.
pub fn run_suite(cfg: &SuiteConfig) -> Result<Vec<CheckRow>> {
    struct Reset;
    impl Drop for Reset {
        fn drop(&mut self) {
            inject_sign_flip(None);
        }
    }
    let _reset = Reset;
    inject_sign_flip(cfg.sign_flip);
    let mut rows = Vec::new();
    for &group in &cfg.groups {
        for &seed in &cfg.seeds {
            let mut checked = Vec::new();
            for c in cases(group, seed)? {
                checked.push((c.name, grad_check_params(&c.f, &c.store, FD_STEP)?));
            }
            if group == Group::Model {
                checked.push(("total".to_string(), check_model(seed)?));
            }
            for (name, r) in checked {
                rows.push(CheckRow {
                    group,
                    name,
                    seed,
                    max_rel_err: r.max_rel_err,
                    worst: r.worst_param,
                    coordinates: r.coordinates,
                });
            }
        }
    }
    Ok(rows)
}

/// Worst row per (group, name), in first-seen order.
pub fn summarize(rows: &[CheckRow]) -> Vec<CheckRow> {
    let mut out: Vec<CheckRow> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|o| o.group == r.group && o.name == r.name) {
            Some(o) if r.max_rel_err > o.max_rel_err => *o = r.clone(),
            Some(_) => {}
            None => out.push(r.clone()),
        }
    }
    out
}

pub fn parse_groups(s: &str) -> Result<Vec<Group>> {
    match s {
        "all" => Ok(Group::ALL.to_vec()),
        _ => s
            .split(',')
            .map(|p| {
                Group::ALL
                    .into_iter()
                    .find(|g| g.name() == p.trim())
                    .ok_or_else(|| Error::Config(format!("unknown gradient-check component {p:?}")))
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_kind_has_a_case() {
        let names: Vec<String> = op_cases(0).into_iter().map(|c| c.name).collect();
        for k in OpKind::ALL {
            assert!(names.iter().any(|n| n == k.name()), "{}", k.name());
        }
    }

    #[test]
    fn one_seed_passes() {
        let rows = run_suite(&SuiteConfig {
            seeds: vec![3],
            ..Default::default()
        })
        .unwrap();
        for r in &rows {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let rows = run_suite(&SuiteConfig {
            groups: vec![Group::Ops],
            seeds: vec![0],
            sign_flip: Some(OpKind::Gelu),
        })
        .unwrap();
        let bad: Vec<_> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert_eq!(bad, ["gelu"]);
    }
}
