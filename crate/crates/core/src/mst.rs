//! Gated attention block: a sigmoid mask selects what the channel attention
//! sees, and a second sigmoid gate decides what leaves it.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::{Depthwise, LayerNorm, Pointwise};
use crate::params::ParamStore;
use crate::restormer::{Gdfn, GdfnConfig, Mdta, MdtaConfig};
use crate::tensor::{dims4, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MstConfig {
    pub channels: usize,
    pub heads: usize,
    pub gdfn: GdfnConfig,
}

impl MstConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        Self { channels, heads, gdfn: GdfnConfig::new(channels) }
    }
}

/// Gated attention. `wl1` projects the input, `wd` turns the projection into
/// a sigmoid mask that multiplies it before attention, `wl2` is the output
/// gate and `wl3` the final projection.
#[derive(Clone, Debug)]
pub struct Msa {
    pub wl1: Pointwise,
    pub wd: Depthwise,
    pub mdta: Mdta,
    pub wl2: Pointwise,
    pub wl3: Pointwise,
}

/// Intermediate values of one gated-attention pass.
#[derive(Clone, Copy, Debug)]
pub struct MsaTrace {
    pub out: Var,
    /// `sigmoid(wd(wl1 x))`, applied to `wl1 x` before attention.
    pub mask: Var,
    /// `sigmoid(wl2 x)`, the output gate.
    pub gate: Var,
}

impl Msa {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, channels: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            wl1: Pointwise::new(ps, &format!("{name}.wl1"), channels, channels)?,
            wd: Depthwise::with_bias(ps, &format!("{name}.wd"), channels)?,
            mdta: Mdta::new(ps, &format!("{name}.mdta"), MdtaConfig::new(channels, heads))?,
            wl2: Pointwise::new(ps, &format!("{name}.wl2"), channels, channels)?,
            wl3: Pointwise::new(ps, &format!("{name}.wl3"), channels, channels)?,
        })
    }

    /// Expects an already normalized input.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.trace(g, ps, x)?.out)
    }

    pub fn trace<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<MsaTrace> {
        let p = self.wl1.forward(g, ps, x)?;
        let m = self.wd.forward(g, ps, p)?;
        let mask = g.sigmoid(m);
        let masked = g.mul(p, mask)?;
        let attended = self.mdta.forward(g, ps, masked)?;
        let gate = self.wl2.forward(g, ps, x)?;
        let gate = g.sigmoid(gate);
        let gated = g.mul(attended, gate)?;
        let out = self.wl3.forward(g, ps, gated)?;
        Ok(MsaTrace { out, mask, gate })
    }

    /// Channel mean of the output gate, `[B, 1, H, W]`, values in (0, 1).
    pub fn gate_map<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Tensor<T>> {
        let gate = self.wl2.forward(g, ps, x)?;
        let gate = g.sigmoid(gate);
        channel_mean(g.value(gate))
    }
}

pub(crate) fn channel_mean<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = t.dims4()?;
    let hw = h * w;
    let d = t.data();
    let mut out = vec![T::zero(); b * hw];
    for bi in 0..b {
        for p in 0..hw {
            let s: f64 = (0..c).map(|ci| d[(bi * c + ci) * hw + p].to_f64().unwrap()).sum();
            out[bi * hw + p] = T::from_f64(s / c as f64).unwrap();
        }
    }
    Tensor::new(&[b, 1, h, w], out)
}

/// `y = x + msa(ln(x)); out = y + gdfn(y)`.
#[derive(Clone, Debug)]
pub struct Mst {
    pub cfg: MstConfig,
    pub norm: LayerNorm,
    pub msa: Msa,
    pub gdfn: Gdfn,
}

impl Mst {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: MstConfig) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), cfg.channels)?,
            msa: Msa::new(ps, &format!("{name}.msa"), cfg.channels, cfg.heads)?,
            gdfn: Gdfn::new(ps, &format!("{name}.gdfn"), GdfnConfig { channels: cfg.channels, ..cfg.gdfn.clone() })?,
            cfg,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        dims4(g.shape(x))?;
        let n = self.norm.forward(g, ps, x)?;
        let a = self.msa.forward(g, ps, n)?;
        let y = g.add(x, a)?;
        let f = self.gdfn.forward(g, ps, y)?;
        g.add(y, f)
    }

    /// Gate map of this block's attention for input `x` (before normalization).
    pub fn gate_map<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Tensor<T>> {
        let n = self.norm.forward(g, ps, x)?;
        self.msa.gate_map(g, ps, n)
    }
}
