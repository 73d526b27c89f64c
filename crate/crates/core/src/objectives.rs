//! Training losses: masked reconstruction, teacher distillation, conditioned
//! contrastive alignment and degraded cross-modal reconstruction.

use std::fmt;
use std::str::FromStr;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{global_pool, MaskPlan, Modality, ModelState, TeacherHandle};
use crate::nn::patchify;
use crate::numcore::{Float, Graph, Tensor, Var};

/// Luminance weights for RGB to grayscale.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Default contrastive temperature.
pub const TAU: f64 = 0.07;

/// Target transform for the cross-modal reconstruction term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DegradationMode {
    #[default]
    Grayscale,
    NoneRgb,
    SpatialMedian,
    SpatialAvgPool,
}

impl DegradationMode {
    pub const ALL: [DegradationMode; 4] = [
        DegradationMode::Grayscale,
        DegradationMode::NoneRgb,
        DegradationMode::SpatialMedian,
        DegradationMode::SpatialAvgPool,
    ];

    /// Channels per pixel of a degraded target.
    pub fn channels(self) -> usize {
        match self {
            DegradationMode::Grayscale => 1,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DegradationMode::Grayscale => "grayscale",
            DegradationMode::NoneRgb => "none-rgb",
            DegradationMode::SpatialMedian => "spatial-median",
            DegradationMode::SpatialAvgPool => "spatial-avgpool",
        }
    }
}

impl fmt::Display for DegradationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown degradation mode {s:?}")))
    }
}

/// Which terms run and how they are reduced.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub enable_okd: bool,
    pub enable_ccl: bool,
    pub enable_cdr: bool,
    /// Contrast raw pooled encoder outputs instead of conditioned ones.
    pub rigid_contrastive: bool,
    pub tau: f64,
    pub degradation: DegradationMode,
    /// Sum squared error over a patch instead of averaging it.
    pub literal_mae_norm: bool,
    /// Sum the contrastive term over the batch instead of averaging it.
    pub literal_ccl_sum: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            enable_okd: true,
            enable_ccl: true,
            enable_cdr: true,
            rigid_contrastive: false,
            tau: TAU,
            degradation: DegradationMode::Grayscale,
            literal_mae_norm: false,
            literal_ccl_sum: false,
        }
    }
}

/// Scalar values of one batch's loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_mae: f64,
    pub l_okd: f64,
    pub l_ccl: f64,
    pub l_cdr: f64,
    pub total: f64,
    pub paired: bool,
}

/// Graph handle of the total plus its reported parts.
#[derive(Clone, Copy, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Squared error on the masked rows of one prediction, averaged over masked
/// patches and (unless `literal`) over the elements of each patch.
pub fn masked_mse<T: Float>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    plan: &MaskPlan,
    literal: bool,
) -> Result<Var> {
    if plan.n_masked() == 0 {
        return Err(Error::DegenerateMask(
            "reconstruction needs at least one masked patch".into(),
        ));
    }
    if g.shape(pred) != target.shape() {
        return Err(Error::shape(
            "reconstruction",
            format!("prediction {:?}, target {:?}", g.shape(pred), target.shape()),
        ));
    }
    let p = g.gather_rows(pred, plan.masked())?;
    let t = g.constant(target.gather_rows(plan.masked())?);
    let d = g.sub(p, t)?;
    let sq = g.square(d);
    Ok(if literal {
        let s = g.sum(sq);
        g.scale(s, 1.0 / plan.n_masked() as f64)
    } else {
        g.mean(sq)
    })
}

/// Masked reconstruction over both modalities of a pair.
pub fn loss_mae<T: Float>(
    g: &mut Graph<T>,
    r_o: Var,
    r_s: Var,
    p_o: &Tensor<T>,
    p_s: &Tensor<T>,
    plan: &MaskPlan,
    literal: bool,
) -> Result<Var> {
    let a = masked_mse(g, r_o, p_o, plan, literal)?;
    let b = masked_mse(g, r_s, p_s, plan, literal)?;
    g.add(a, b)
}

/// `(1/M_vis) Σ ‖t_i − x_i‖₁` over visible tokens.
pub fn loss_okd<T: Float>(
    g: &mut Graph<T>,
    teacher: &Tensor<T>,
    x_o: Var,
    plan: &MaskPlan,
) -> Result<Var> {
    if g.shape(x_o) != teacher.shape() || g.shape(x_o)[0] != plan.n_visible() {
        return Err(Error::shape(
            "distillation",
            format!(
                "student {:?}, teacher {:?}, {} visible",
                g.shape(x_o),
                teacher.shape(),
                plan.n_visible()
            ),
        ));
    }
    let t = g.constant(teacher.clone());
    let d = g.sub(t, x_o)?;
    let a = g.abs(d);
    let s = g.sum(a);
    Ok(g.scale(s, 1.0 / plan.n_visible() as f64))
}

/// Symmetric InfoNCE between row-normalized `[N × D]` embeddings.
pub fn loss_ccl<T: Float>(
    g: &mut Graph<T>,
    pooled_o: Var,
    pooled_s: Var,
    tau: f64,
    literal_sum: bool,
) -> Result<Var> {
    let so = g.shape(pooled_o).to_vec();
    if so.len() != 2 || g.shape(pooled_s) != so.as_slice() {
        return Err(Error::shape(
            "contrastive",
            format!("{so:?} vs {:?}", g.shape(pooled_s)),
        ));
    }
    let n = so[0];
    if n < 2 {
        return Err(Error::ContrastiveDegenerate(n));
    }
    for v in [pooled_o, pooled_s] {
        let t = g.value(v);
        for r in 0..n {
            let norm = t.row(r).iter().map(|x| Float::to_f64(*x).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::Contract(format!(
                    "contrastive inputs must be unit rows, row {r} has norm {norm}"
                )));
            }
        }
    }
    let eye = g.constant(Tensor::eye(n));
    let mut terms = Vec::with_capacity(2);
    for (a, b) in [(pooled_s, pooled_o), (pooled_o, pooled_s)] {
        let logits = g.matmul_nt(a, b)?;
        let logits = g.scale(logits, 1.0 / tau);
        let ls = g.log_softmax(logits, 1)?;
        let diag = g.mul(ls, eye)?;
        terms.push(g.sum(diag));
    }
    let both = g.add(terms[0], terms[1])?;
    let per = if literal_sum { 1.0 } else { 1.0 / n as f64 };
    Ok(g.scale(both, -0.5 * per))
}

/// Applies `mode` to patch pixels `[M × C·p²]` (channel-major within a patch).
pub fn degrade<T: Float>(
    patches: &Tensor<T>,
    channels: usize,
    patch: usize,
    mode: DegradationMode,
) -> Result<Tensor<T>> {
    if !matches!(channels, 1 | 3) {
        return Err(Error::shape("degrade", format!("{channels} channels")));
    }
    let pp = patch * patch;
    let (m, d) = patches.rows_cols();
    if d != channels * pp {
        return Err(Error::shape(
            "degrade",
            format!("row width {d} for {channels} channels of {patch}x{patch}"),
        ));
    }
    let out_c = mode.channels();
    let mut out = Vec::with_capacity(m * out_c * pp);
    let mut plane = vec![T::zero(); pp];
    for r in 0..m {
        let row = patches.row(r);
        match mode {
            DegradationMode::Grayscale => {
                if channels == 1 {
                    out.extend_from_slice(row);
                } else {
                    let w = LUMA.map(T::from_f64);
                    for i in 0..pp {
                        out.push(w[0] * row[i] + w[1] * row[pp + i] + w[2] * row[2 * pp + i]);
                    }
                }
            }
            _ => {
                for oc in 0..out_c {
                    let src = &row[(oc % channels) * pp..(oc % channels + 1) * pp];
                    match mode {
                        DegradationMode::NoneRgb => plane.copy_from_slice(src),
                        DegradationMode::SpatialMedian => median3(src, patch, &mut plane),
                        DegradationMode::SpatialAvgPool => avgpool2(src, patch, &mut plane)?,
                        DegradationMode::Grayscale => unreachable!(),
                    }
                    out.extend_from_slice(&plane);
                }
            }
        }
    }
    Tensor::new(&[m, out_c * pp], out)
}

/// 3×3 median with edge replication.
fn median3<T: Float>(src: &[T], p: usize, out: &mut [T]) {
    let mut win = [T::zero(); 9];
    for y in 0..p {
        for x in 0..p {
            let mut k = 0;
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let yy = (y as i64 + dy).clamp(0, p as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, p as i64 - 1) as usize;
                    win[k] = src[yy * p + xx];
                    k += 1;
                }
            }
            win.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            out[y * p + x] = win[4];
        }
    }
}

/// 2×2 average pooling followed by nearest upsampling.
fn avgpool2<T: Float>(src: &[T], p: usize, out: &mut [T]) -> Result<()> {
    if p % 2 != 0 {
        return Err(Error::shape("degrade", format!("average pooling needs an even patch, got {p}")));
    }
    let q = T::from_f64(0.25);
    for y in (0..p).step_by(2) {
        for x in (0..p).step_by(2) {
            let v = (src[y * p + x] + src[y * p + x + 1] + src[(y + 1) * p + x] + src[(y + 1) * p + x + 1]) * q;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                out[(y + dy) * p + x + dx] = v;
            }
        }
    }
    Ok(())
}

/// Cross-modal term: each branch predicts the degraded counterpart patches.
#[allow(clippy::too_many_arguments)]
pub fn loss_cdr<T: Float>(
    g: &mut Graph<T>,
    rcdr_o: Var,
    rcdr_s: Var,
    p_o: &Tensor<T>,
    p_s: &Tensor<T>,
    plan: &MaskPlan,
    patch: usize,
    mode: DegradationMode,
    literal: bool,
) -> Result<Var> {
    let t_s = degrade(p_s, 1, patch, mode)?;
    let t_o = degrade(p_o, 3, patch, mode)?;
    let a = masked_mse(g, rcdr_o, &t_s, plan, literal)?;
    let b = masked_mse(g, rcdr_s, &t_o, plan, literal)?;
    g.add(a, b)
}

fn mean_of<T: Float>(g: &mut Graph<T>, terms: &[Var]) -> Result<Option<Var>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(Some(g.scale(acc, 1.0 / terms.len() as f64)))
}

/// Full forward pass over a batch and the unit-weighted sum of all terms.
///
/// Unpaired batches skip the contrastive and cross-modal work entirely; those
/// terms are exact zeros and their parameters never enter the graph.
pub fn total_loss<T: Float>(
    g: &mut Graph<T>,
    batch: &Batch<T>,
    model: &ModelState<T>,
    teacher: &TeacherHandle<T>,
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    batch.check()?;
    if cfg.degradation.channels() != model.config.cdr_channels && cfg.enable_cdr {
        return Err(Error::Config(format!(
            "degradation {} needs {} output channels, model has {}",
            cfg.degradation,
            cfg.degradation.channels(),
            model.config.cdr_channels
        )));
    }
    let p = model.config.patch;
    let lit = cfg.literal_mae_norm;
    let mut mae = Vec::new();
    let mut okd = Vec::new();
    let mut cdr = Vec::new();
    let mut pooled_o = Vec::new();
    let mut pooled_s = Vec::new();

    for (sample, plan) in batch.samples.iter().zip(&batch.plans) {
        let enc = |g: &mut Graph<T>, img: &Tensor<T>, m: Modality| -> Result<(Var, Tensor<T>)> {
            let x = model.encode_visible(g, img, m, plan)?;
            Ok((x, patchify(img, p)?))
        };
        let o = sample.optical.as_ref().map(|i| enc(g, i, Modality::Optical)).transpose()?;
        let s = sample.sar.as_ref().map(|i| enc(g, i, Modality::Sar)).transpose()?;

        let mut rec = Vec::new();
        if let Some((x, t)) = &o {
            let r = model.decode_reconstruct(g, *x, plan, Modality::Optical)?;
            rec.push(masked_mse(g, r, t, plan, lit)?);
            if cfg.enable_okd {
                let tf = teacher.features(sample.optical.as_ref().unwrap(), &sample.id, plan)?;
                okd.push(loss_okd(g, &tf, *x, plan)?);
            }
        }
        if let Some((x, t)) = &s {
            let r = model.decode_reconstruct(g, *x, plan, Modality::Sar)?;
            rec.push(masked_mse(g, r, t, plan, lit)?);
        }
        let r = if rec.len() == 2 { g.add(rec[0], rec[1])? } else { rec[0] };
        mae.push(r);

        if let (true, Some((xo, to)), Some((xs, ts))) = (batch.paired, &o, &s) {
            if cfg.enable_ccl {
                let (co, cs) = if cfg.rigid_contrastive {
                    (*xo, *xs)
                } else {
                    model.condition(g, *xo, *xs)?
                };
                pooled_o.push(global_pool(g, co)?);
                pooled_s.push(global_pool(g, cs)?);
            }
            if cfg.enable_cdr {
                let ro = model.decode_cdr(g, *xo, plan)?;
                let rs = model.decode_cdr(g, *xs, plan)?;
                cdr.push(loss_cdr(g, ro, rs, to, ts, plan, p, cfg.degradation, lit)?);
            }
        }
    }

    let zero = || Tensor::scalar(T::zero());
    let l_mae = mean_of(g, &mae)?.expect("batch is non-empty");
    let l_okd = match mean_of(g, &okd)? {
        Some(v) => v,
        None => g.constant(zero()),
    };
    let l_ccl = if pooled_o.is_empty() {
        g.constant(zero())
    } else {
        let po = g.concat_rows(&pooled_o)?;
        let ps = g.concat_rows(&pooled_s)?;
        loss_ccl(g, po, ps, cfg.tau, cfg.literal_ccl_sum)?
    };
    let l_cdr = match mean_of(g, &cdr)? {
        Some(v) => v,
        None => g.constant(zero()),
    };
    let t = g.add(l_mae, l_okd)?;
    let t = g.add(t, l_ccl)?;
    let total = g.add(t, l_cdr)?;
    g.ensure_finite()?;
    let val = |v: Var| g.scalar_value(v).to_f64();
    Ok(LossOutput {
        total,
        breakdown: LossBreakdown {
            l_mae: val(l_mae),
            l_okd: val(l_okd),
            l_ccl: val(l_ccl),
            l_cdr: val(l_cdr),
            total: val(total),
            paired: batch.paired,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan4() -> MaskPlan {
        MaskPlan::new(4, vec![1], vec![0, 2, 3]).unwrap()
    }

    #[test]
    fn mae_examples() {
        let mut g = Graph::<f64>::new();
        let p_o = Tensor::from_fn(&[4, 12], |i| i as f64 * 0.1);
        let p_s = Tensor::from_fn(&[4, 4], |i| -(i as f64));
        let r_o = g.constant(p_o.clone());
        let r_s = g.constant(p_s.clone());
        let l = loss_mae(&mut g, r_o, r_s, &p_o, &p_s, &plan4(), false).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);
        let r_o = g.constant(p_o.map(|v| v + 1.0));
        let r_s = g.constant(p_s.map(|v| v - 1.0));
        let l = loss_mae(&mut g, r_o, r_s, &p_o, &p_s, &plan4(), false).unwrap();
        assert!((g.scalar_value(l) - 2.0).abs() < 1e-12);
        let l = loss_mae(&mut g, r_o, r_s, &p_o, &p_s, &plan4(), true).unwrap();
        assert!((g.scalar_value(l) - 16.0).abs() < 1e-12);
        let full = MaskPlan::full(4);
        assert!(matches!(
            loss_mae(&mut g, r_o, r_s, &p_o, &p_s, &full, false),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn okd_example() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_f64(&[1, 4], &[0.5, -0.5, 0.0, 2.0]).unwrap();
        let x = g.constant(Tensor::from_f64(&[1, 4], &[0.0, 0.0, 0.0, 2.0]).unwrap());
        let plan = MaskPlan::new(4, vec![2], vec![0, 1, 3]).unwrap();
        let l = loss_okd(&mut g, &t, x, &plan).unwrap();
        assert_eq!(g.scalar_value(l), 1.0);
    }

    #[test]
    fn ccl_identities() {
        let mut g = Graph::<f64>::new();
        let v = Tensor::from_f64(&[2, 2], &[0.6, 0.8, 0.6, 0.8]).unwrap();
        let a = g.constant(v.clone());
        let b = g.constant(v);
        let l = loss_ccl(&mut g, a, b, TAU, false).unwrap();
        assert!((g.scalar_value(l) - 2f64.ln()).abs() < 1e-12);
        let e = g.constant(Tensor::eye(2));
        let l = loss_ccl(&mut g, e, e, TAU, false).unwrap();
        let expect = (1.0 + (-1.0 / TAU).exp()).ln();
        assert!((g.scalar_value(l) - expect).abs() < 1e-15);
        assert!((expect - 6.2e-7).abs() < 0.05e-7);
    }

    #[test]
    fn ccl_rejects_bad_inputs() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        assert!(matches!(
            loss_ccl(&mut g, one, one, TAU, false),
            Err(Error::ContrastiveDegenerate(1))
        ));
        let un = g.constant(Tensor::from_f64(&[2, 2], &[2.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(matches!(loss_ccl(&mut g, un, un, TAU, false), Err(Error::Contract(_))));
    }

    #[test]
    fn grayscale_examples() {
        let white = Tensor::<f64>::ones(&[1, 3]);
        let g = degrade(&white, 3, 1, DegradationMode::Grayscale).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-15);
        let red = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(degrade(&red, 3, 1, DegradationMode::Grayscale).unwrap().data(), &[0.299]);
        assert!(degrade(&red, 2, 1, DegradationMode::Grayscale).is_err());
    }

    #[test]
    fn spatial_modes_keep_three_channels() {
        let x = Tensor::<f64>::from_fn(&[2, 16], |i| (i % 7) as f64);
        for mode in [DegradationMode::SpatialMedian, DegradationMode::SpatialAvgPool, DegradationMode::NoneRgb] {
            let y = degrade(&x, 1, 4, mode).unwrap();
            assert_eq!(y.shape(), &[2, 48]);
            assert_eq!(&y.row(0)[..16], &y.row(0)[16..32]);
        }
        let c = Tensor::<f64>::full(&[1, 12], 0.25);
        for mode in [DegradationMode::SpatialMedian, DegradationMode::SpatialAvgPool] {
            assert_eq!(degrade(&c, 3, 2, mode).unwrap(), c);
        }
        let odd = Tensor::<f64>::zeros(&[1, 9]);
        assert!(degrade(&odd, 1, 3, DegradationMode::SpatialAvgPool).is_err());
    }

    #[test]
    fn mode_names_parse_back() {
        for m in DegradationMode::ALL {
            assert_eq!(m.name().parse::<DegradationMode>().unwrap(), m);
        }
        assert!("hog".parse::<DegradationMode>().is_err());
    }
}
