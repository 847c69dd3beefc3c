//! Parameterized layers: thin handles onto a [`ParamStore`].

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Real;

pub(crate) const WEIGHT_STD: f64 = 0.02;

/// 1x1 convolution `C_in -> C_out` with bias.
#[derive(Clone, Debug)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
}

impl Pointwise {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            w: ps.register(format!("{name}.w"), &[cout, cin], Init::TruncNormal(WEIGHT_STD))?,
            b: ps.register(format!("{name}.b"), &[cout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.conv_pointwise(x, w, Some(b))
    }
}

/// Depthwise 3x3 convolution, bias optional.
#[derive(Clone, Debug)]
pub struct Depthwise {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Depthwise {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self { w: ps.register(format!("{name}.w"), &[c, 3, 3], Init::TruncNormal(WEIGHT_STD))?, b: None })
    }

    pub fn with_bias<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        let mut dw = Self::new(ps, name, c)?;
        dw.b = Some(ps.register(format!("{name}.b"), &[c], Init::Zeros)?);
        Ok(dw)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w);
        let y = g.conv_depthwise3x3(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(ps, b);
                g.add_channel(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Dense 3x3 convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv3 {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Conv3 {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            w: ps.register(format!("{name}.w"), &[cout, cin, 3, 3], Init::TruncNormal(WEIGHT_STD))?,
            b: ps.register(format!("{name}.b"), &[cout], Init::Zeros)?,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        g.conv3x3(x, w, Some(b), self.stride)
    }
}

/// Channel layer norm with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.register(format!("{name}.gamma"), &[c], Init::Ones)?,
            beta: ps.register(format!("{name}.beta"), &[c], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(ps, self.gamma), g.param(ps, self.beta));
        g.layernorm_channel(x, gm, bt)
    }
}

/// Affine map on `[B, D_in] -> [B, D_out]`; weight stored `[D_in, D_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            w: ps.register(format!("{name}.w"), &[din, dout], Init::TruncNormal(WEIGHT_STD))?,
            b: ps.register(format!("{name}.b"), &[dout], Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(ps, self.w), g.param(ps, self.b));
        let y = g.matmul(x, w)?;
        g.add_channel(y, b)
    }
}
