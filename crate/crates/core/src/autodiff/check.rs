//! Central-difference gradient checking.

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// `|analytic − numeric| / max(1, |analytic|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(g: &Graph, v: Var) -> Result<f64> {
    match g.value(v) {
        [s] => Ok(*s),
        other => Err(Error::Contract(format!(
            "grad_check needs a scalar function, got {} values",
            other.len()
        ))),
    }
}

/// Maximum relative error between the tape gradient of `f` at `x` and
/// central differences with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x, true);
    let out = f(&mut g, xv)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic = g
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::inference();
        let v = g.input(t, false);
        let out = f(&mut g, v)?;
        scalar_of(&g, out)
    };
    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Gradient check with respect to stored parameters.
///
/// `coords` selects `(param, flat index)` pairs to probe; pass every
/// coordinate for an exhaustive check.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let mut analytic = ParamStore::clone(store);
    analytic.zero_grads();
    g.accumulate_into(&mut analytic, 1.0);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, s)?;
        scalar_of(&g, out)
    };
    let mut probe = store.clone();
    let mut worst = 0.0_f64;
    for &(id, i) in coords {
        let orig = store.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.get_mut(id).data_mut()[i] = orig;
        let a = analytic.get(id).grad().map_or(0.0, |g| g[i]);
        worst = worst.max(relative_error(a, (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

/// Every coordinate of every parameter in `store`.
pub fn all_coords(store: &ParamStore) -> Vec<(ParamId, usize)> {
    store
        .iter()
        .flat_map(|(id, _, t)| (0..t.len()).map(move |i| (id, i)))
        .collect()
}
