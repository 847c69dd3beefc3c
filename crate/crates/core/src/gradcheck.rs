//! Central-difference gradient verification.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{lit, Real, Tensor};

fn scalar<T: Real>(g: &Graph<T>, v: Var) -> Result<f64> {
    if g.value(v).numel() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar function, got {:?}", g.shape(v))));
    }
    Ok(g.value(v).item().to_f64().unwrap())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Max over coordinates of `|analytic - central difference| / (|analytic| + 1e-8)`
/// for the scalar function `f` at `x`.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.input(x.clone(), true);
    let out = f(&mut g, xv)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.wrt(xv).unwrap_or(&zeros).to_vec();

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(probe, false);
        let out = f(&mut g, v)?;
        scalar(&g, out)
    };
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + lit(h);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - lit(h);
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(a.to_f64().unwrap(), numeric));
    }
    Ok(worst)
}

/// Same check, perturbing one parameter of `store` instead of an input.
pub fn finite_diff_check_param<T, F>(f: F, store: &ParamStore<T>, id: ParamId, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    scalar(&g, out)?;
    let grads = g.backward(out)?;
    let n = store.tensor(id).numel();
    let analytic = grads.param(id).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); n]);

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let orig = store.tensor(id).data()[i];
        probe.tensor_mut(id).data_mut()[i] = orig + lit(h);
        let mut g = Graph::new();
        let out = f(&mut g, &probe)?;
        let up = scalar(&g, out)?;
        probe.tensor_mut(id).data_mut()[i] = orig - lit(h);
        let mut g = Graph::new();
        let out = f(&mut g, &probe)?;
        let down = scalar(&g, out)?;
        probe.tensor_mut(id).data_mut()[i] = orig;
        worst = worst.max(rel_err(a.to_f64().unwrap(), (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Runs [`finite_diff_check_param`] over every parameter and returns the worst error.
pub fn finite_diff_check_all_params<T, F>(f: F, store: &ParamStore<T>, h: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for (id, _) in store.iter() {
        worst = worst.max(finite_diff_check_param(&f, store, id, h)?);
    }
    Ok(worst)
}
