use crate::error::{Error, Result};
use crate::numcore::{Float, ParamStore};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, kept in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<T: Float>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.entries().iter().map(|e| vec![0.0; e.tensor.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Rejects non-finite gradients, naming the first offending parameter.
pub fn check_grads<T: Float>(store: &ParamStore<T>, grads: &[Vec<T>]) -> Result<()> {
    for (e, g) in store.entries().iter().zip(grads) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(e.name.clone()));
        }
    }
    Ok(())
}

/// Scales gradients in place so their global norm is at most `max_norm`.
pub fn clip_grad_norm<T: Float>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = Float::to_f64(*v);
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = T::from_f64(Float::to_f64(*v) * s);
            }
        }
    }
    norm
}

/// One bias-corrected AdamW update with decoupled weight decay applied
/// only to parameters flagged for it.
pub fn adamw_step<T: Float>(
    store: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(
            "adamw",
            format!("{} params, {} grads, {} moments", store.len(), grads.len(), state.m.len()),
        ));
    }
    check_grads(store, grads)?;
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let decay = store.entry(id).decay && cfg.weight_decay > 0.0;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let t = store.get_mut(id);
        for (((p, g), mk), vk) in t.data_mut().iter_mut().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = Float::to_f64(*g);
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * g;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * g * g;
            let mhat = *mk / bc1;
            let vhat = *vk / bc2;
            let mut x = Float::to_f64(*p);
            let shrink = if decay { lr * cfg.weight_decay * x } else { 0.0 };
            x -= lr * mhat / (vhat.sqrt() + cfg.eps) + shrink;
            *p = T::from_f64(x);
        }
    }
    Ok(())
}
