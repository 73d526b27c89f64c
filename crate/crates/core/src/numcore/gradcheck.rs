//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor of [`rel_err`]: gradients that are exactly zero in
/// theory come out of central differences at roughly `1e-10`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// Relative error used throughout: `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Five-point central difference `f'(x0)` of a scalar function.
pub fn five_point<F>(mut f: F, x0: f64, h: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    let d1 = f(x0 + h)? - f(x0 - h)?;
    let d2 = f(x0 + 2.0 * h)? - f(x0 - 2.0 * h)?;
    Ok((8.0 * d1 - d2) / (12.0 * h))
}

/// Largest relative error over coordinates of `x` between the backward pass of
/// `f` and five-point central differences with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    g.backward(loss)?;
    let analytic = g
        .grad(xv)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.leaf(t);
        let l = f(&mut g, v)?;
        g.ensure_finite()?;
        Ok(g.scalar_value(l))
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let numeric = five_point(
            |v| {
                let mut t = x.clone();
                t.data_mut()[i] = v;
                eval(t)
            },
            x.data()[i],
            eps,
        )?;
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Result of checking every coordinate of every parameter in a store.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst coordinate.
    pub worst_param: String,
    pub coordinates: usize,
}

/// Finite-difference check of `loss(store)` with respect to every stored parameter.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, eps: f64) -> Result<ParamCheck>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let analytic = g.param_grads(store);

    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = f(&mut g, work)?;
        g.ensure_finite()?;
        Ok(g.scalar_value(l))
    };

    let mut out = ParamCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        coordinates: 0,
    };
    for id in store.ids() {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let numeric = five_point(
                |v| {
                    work.get_mut(id).data_mut()[i] = v;
                    eval(&work)
                },
                orig,
                eps,
            )?;
            work.get_mut(id).data_mut()[i] = orig;
            let e = rel_err(analytic[id.index()][i], numeric);
            if e > out.max_rel_err {
                out.max_rel_err = e;
                out.worst_param = store.name(id).to_string();
            }
            out.coordinates += 1;
        }
    }
    Ok(out)
}
