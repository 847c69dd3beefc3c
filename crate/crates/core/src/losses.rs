//! Training objectives: Charbonnier reconstruction, expert load balance,
//! and a Fourier-domain L1 term.

use std::fmt;

use crate::autodiff::{Graph, Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub charb_eps: f64,
    pub balance_eps: f64,
    /// Use `sigma^2 / mu^2` instead of `sigma / mu^2` in the balance terms.
    pub cv_squared: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.01, lambda2: 0.1, charb_eps: 1e-3, balance_eps: 1e-8, cv_squared: false }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.charb_eps, self.balance_eps];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and nonnegative: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub charbonnier: f64,
    pub balance: f64,
    pub fft: f64,
    pub total: f64,
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.8e} {:.8e} {:.8e} {:.8e}", self.charbonnier, self.balance, self.fft, self.total)
    }
}

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `mean(sqrt((pred - target)^2 + eps^2))`.
pub fn charbonnier<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, eps: f64) -> Result<Var> {
    same_shape(g, pred, target, "charbonnier")?;
    let r = g.sub(pred, target)?;
    let r2 = g.unary(r, Unary::Square);
    let s = g.sqrt_eps(r2, eps);
    Ok(g.mean(s))
}

/// Mean absolute difference of the stacked real and imaginary spectra.
pub fn fft_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(g, pred, target, "fft loss")?;
    let fp = g.fft2_stacked(pred)?;
    let ft = g.fft2_stacked(target)?;
    let d = g.sub(fp, ft)?;
    let a = g.unary(d, Unary::Abs);
    Ok(g.mean(a))
}

fn dispersion(values: &[f64], eps: f64, squared: bool) -> f64 {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
    let num = if squared { sd * sd } else { sd };
    num / (mu * mu + eps)
}

/// `sigma_W / (mu_W^2 + eps) + sigma_S / (mu_S^2 + eps)` on per-expert totals.
pub fn balance_value(w_totals: &[f64], s_totals: &[f64], eps: f64, cv_squared: bool) -> Result<f64> {
    if w_totals.is_empty() || w_totals.len() != s_totals.len() {
        return Err(Error::InvalidArgument(format!(
            "balance loss needs matching nonempty totals, got {} and {}",
            w_totals.len(),
            s_totals.len()
        )));
    }
    Ok(dispersion(w_totals, eps, cv_squared) + dispersion(s_totals, eps, cv_squared))
}

/// Balance loss on the tape. `score` is the `[B, N, H, W]` router output, whose
/// per-expert sums form `W`; `s_totals` are the hard selection counts and
/// enter as a constant.
pub fn balance_loss<T: Real>(
    g: &mut Graph<T>,
    score: Var,
    s_totals: &[f64],
    eps: f64,
    cv_squared: bool,
) -> Result<Var> {
    let w = g.sum_per_channel(score)?;
    let n = g.shape(w)[0];
    if n == 0 || s_totals.len() != n {
        return Err(Error::InvalidArgument(format!("balance loss over {n} experts got {} counts", s_totals.len())));
    }
    let mu = g.mean(w);
    let sd = g.std_pop(w);
    let num = if cv_squared { g.mul(sd, sd)? } else { sd };
    let mu2 = g.mul(mu, mu)?;
    let den = g.add_scalar(mu2, eps);
    let term = g.div(num, den)?;
    Ok(g.add_scalar(term, dispersion(s_totals, eps, cv_squared)))
}

/// Combined objective. `balance` is an already averaged balance term, or
/// `None` when the model has no routing.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    balance: Option<Var>,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let c = charbonnier(g, pred, target, w.charb_eps)?;
    let f = fft_loss(g, pred, target)?;
    let mut total = c;
    if w.lambda2 != 0.0 {
        let sf = g.scale(f, w.lambda2);
        total = g.add(total, sf)?;
    }
    let mut bal = 0.0;
    if let Some(b) = balance {
        bal = g.value(b).item().to_f64().unwrap();
        if w.lambda1 != 0.0 {
            let sb = g.scale(b, w.lambda1);
            total = g.add(total, sb)?;
        }
    }
    let val = |v: Var| g.value(v).item().to_f64().unwrap();
    let report = LossReport { charbonnier: val(c), balance: bal, fft: val(f), total: val(total) };
    Ok((total, report))
}
