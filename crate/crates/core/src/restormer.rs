//! Transposed channel attention and gated depthwise feed-forward sub-blocks.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Depthwise, LayerNorm, Pointwise};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{dims4, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct MdtaConfig {
    pub channels: usize,
    pub heads: usize,
    pub temperature_init: f64,
}

impl MdtaConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        Self { channels, heads, temperature_init: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "attention heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GdfnConfig {
    pub channels: usize,
    pub expansion: f64,
}

impl GdfnConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, expansion: 2.66 }
    }

    pub fn hidden(&self) -> usize {
        (self.channels as f64 * self.expansion).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.expansion <= 0.0 || self.hidden() == 0 {
            return Err(Error::Config(format!("bad feed-forward config {self:?}")));
        }
        Ok(())
    }
}

/// Multi-head attention across channels: each head builds a `d x d` map
/// (`d = C / heads`) from L2-normalized queries and keys over all pixels.
#[derive(Clone, Debug)]
pub struct Mdta {
    pub cfg: MdtaConfig,
    pub q: Pointwise,
    pub k: Pointwise,
    pub v: Pointwise,
    pub q_dw: Depthwise,
    pub k_dw: Depthwise,
    pub v_dw: Depthwise,
    pub temperature: ParamId,
    pub proj: Pointwise,
}

impl Mdta {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: MdtaConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            q: Pointwise::new(ps, &format!("{name}.q"), c, c)?,
            k: Pointwise::new(ps, &format!("{name}.k"), c, c)?,
            v: Pointwise::new(ps, &format!("{name}.v"), c, c)?,
            q_dw: Depthwise::new(ps, &format!("{name}.q_dw"), c)?,
            k_dw: Depthwise::new(ps, &format!("{name}.k_dw"), c)?,
            v_dw: Depthwise::new(ps, &format!("{name}.v_dw"), c)?,
            temperature: ps.register(
                format!("{name}.temperature"),
                &[cfg.heads],
                Init::Constant(cfg.temperature_init),
            )?,
            proj: Pointwise::new(ps, &format!("{name}.proj"), c, c)?,
            cfg,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        Ok(self.forward_cross(g, ps, x, x)?.0)
    }

    /// Queries from `query`, keys and values from `context`. Returns the
    /// output and the `[B, heads, d, d]` attention map.
    pub fn forward_cross<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        query: Var,
        context: Var,
    ) -> Result<(Var, Var)> {
        let (b, c, h, w) = dims4(g.shape(query))?;
        if c != self.cfg.channels || g.shape(context) != g.shape(query) {
            return Err(Error::Shape(format!(
                "attention over {} channels got query {:?}, context {:?}",
                self.cfg.channels,
                g.shape(query),
                g.shape(context)
            )));
        }
        let heads = self.cfg.heads;
        let split = [b, heads, c / heads, h * w];

        let q = self.q.forward(g, ps, query)?;
        let q = self.q_dw.forward(g, ps, q)?;
        let k = self.k.forward(g, ps, context)?;
        let k = self.k_dw.forward(g, ps, k)?;
        let v = self.v.forward(g, ps, context)?;
        let v = self.v_dw.forward(g, ps, v)?;

        let q = g.reshape(q, &split)?;
        let k = g.reshape(k, &split)?;
        let v = g.reshape(v, &split)?;
        let q = g.l2_normalize_last(q);
        let k = g.l2_normalize_last(k);

        let logits = g.matmul_t(q, k, false, true)?;
        let tau = g.param(ps, self.temperature);
        let logits = g.mul_channel(logits, tau)?;
        let attn = g.softmax_axis(logits, 3)?;
        let out = g.matmul(attn, v)?;
        let out = g.reshape(out, &[b, c, h, w])?;
        Ok((self.proj.forward(g, ps, out)?, attn))
    }
}

/// Layer norm, two expanded depthwise branches, gelu gate, projection back.
/// The caller adds the residual.
#[derive(Clone, Debug)]
pub struct Gdfn {
    pub cfg: GdfnConfig,
    pub norm: LayerNorm,
    pub in1: Pointwise,
    pub in2: Pointwise,
    pub dw1: Depthwise,
    pub dw2: Depthwise,
    pub out: Pointwise,
}

impl Gdfn {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: GdfnConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, hid) = (cfg.channels, cfg.hidden());
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c)?,
            in1: Pointwise::new(ps, &format!("{name}.in1"), c, hid)?,
            in2: Pointwise::new(ps, &format!("{name}.in2"), c, hid)?,
            dw1: Depthwise::new(ps, &format!("{name}.dw1"), hid)?,
            dw2: Depthwise::new(ps, &format!("{name}.dw2"), hid)?,
            out: Pointwise::new(ps, &format!("{name}.out"), hid, c)?,
            cfg,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let c = dims4(g.shape(x))?.1;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!("feed-forward over {} channels got {c}", self.cfg.channels)));
        }
        let n = self.norm.forward(g, ps, x)?;
        let a = self.in1.forward(g, ps, n)?;
        let a = self.dw1.forward(g, ps, a)?;
        let a = g.gelu(a);
        let b = self.in2.forward(g, ps, n)?;
        let b = self.dw2.forward(g, ps, b)?;
        let gated = g.mul(a, b)?;
        self.out.forward(g, ps, gated)
    }
}
