//! Degradation priors for the expert router.
//!
//! Two interchangeable providers produce a feature vector and a probability
//! vector over degradation descriptors: an oracle that reads the synthesis
//! label, and a small convolutional encoder trained from the image.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3, Linear};
use crate::params::ParamStore;
use crate::tensor::{dims4, lit, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DegradationKind {
    Noise,
    Rain,
    Haze,
    Blur,
    LowLight,
    Snow,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 6] = [
        DegradationKind::Noise,
        DegradationKind::Rain,
        DegradationKind::Haze,
        DegradationKind::Blur,
        DegradationKind::LowLight,
        DegradationKind::Snow,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DegradationKind::Noise => "noise",
            DegradationKind::Rain => "rain",
            DegradationKind::Haze => "haze",
            DegradationKind::Blur => "blur",
            DegradationKind::LowLight => "lowlight",
            DegradationKind::Snow => "snow",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown degradation kind {s:?}")))
    }
}

/// Which degradations were applied, each with an intensity in [0, 1].
/// An empty label denotes a clean image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DegradationLabel {
    pub entries: Vec<(DegradationKind, f64)>,
}

impl DegradationLabel {
    pub fn clean() -> Self {
        Self::default()
    }

    pub fn single(kind: DegradationKind, intensity: f64) -> Self {
        Self { entries: vec![(kind, intensity)] }
    }

    pub fn is_clean(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (k, v)) in self.entries.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::InvalidArgument(format!("intensity {v} of {k} outside [0, 1]")));
            }
            if self.entries[..i].iter().any(|(o, _)| o == k) {
                return Err(Error::InvalidArgument(format!("duplicate degradation kind {k}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorMode {
    Oracle,
    Learned,
}

impl FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(PriorMode::Oracle),
            "learned" => Ok(PriorMode::Learned),
            _ => Err(Error::Config(format!("prior mode must be oracle or learned, got {s:?}"))),
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PriorMode::Oracle => "oracle",
            PriorMode::Learned => "learned",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorProviderConfig {
    pub mode: PriorMode,
    /// Feature dimension.
    pub feature_dim: usize,
    /// Descriptor set; its length is the similarity dimension.
    pub kinds: Vec<DegradationKind>,
    /// Seed of the oracle's embedding table.
    pub seed: u64,
}

impl Default for PriorProviderConfig {
    fn default() -> Self {
        Self {
            mode: PriorMode::Oracle,
            feature_dim: 16,
            kinds: vec![DegradationKind::Noise, DegradationKind::Rain, DegradationKind::Haze],
            seed: 0x0d15ea5e,
        }
    }
}

impl PriorProviderConfig {
    pub fn similarity_dim(&self) -> usize {
        self.kinds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.kinds.is_empty() {
            return Err(Error::Config("prior needs a feature dim and at least one kind".into()));
        }
        let mut sorted = self.kinds.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.kinds.len() {
            return Err(Error::Config("duplicate prior kinds".into()));
        }
        Ok(())
    }

    fn slot(&self, kind: DegradationKind) -> Result<usize> {
        self.kinds
            .iter()
            .position(|&k| k == kind)
            .ok_or_else(|| Error::InvalidArgument(format!("degradation kind {kind} not in the configured set")))
    }
}

/// Per-image degradation features `[B, d_f]` and descriptor similarity `[B, d_s]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorBundle<T = f32> {
    pub features: Tensor<T>,
    pub similarity: Tensor<T>,
}

impl<T: Real> PriorBundle<T> {
    /// Stacks single-image bundles along the batch axis.
    pub fn stack(items: &[PriorBundle<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("empty prior batch".into()))?;
        let (df, ds) = (first.features.shape()[1], first.similarity.shape()[1]);
        let mut f = Vec::new();
        let mut s = Vec::new();
        for it in items {
            f.extend_from_slice(it.features.data());
            s.extend_from_slice(it.similarity.data());
        }
        Ok(Self { features: Tensor::new(&[items.len(), df], f)?, similarity: Tensor::new(&[items.len(), ds], s)? })
    }

    pub fn record(&self, g: &mut Graph<T>) -> PriorVars {
        PriorVars { features: g.constant(self.features.clone()), similarity: g.constant(self.similarity.clone()) }
    }
}

/// A prior recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PriorVars {
    pub features: Var,
    pub similarity: Var,
}

fn embedding_table(cfg: &PriorProviderConfig) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..cfg.kinds.len() * cfg.feature_dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Prior read straight from the synthesis label.
///
/// Similarity is the intensity vector normalized to sum to one (uniform over
/// present kinds when all intensities are zero, uniform over every descriptor
/// for a clean label). Features sum a seeded embedding row per present kind.
pub fn oracle_prior<T: Real>(label: &DegradationLabel, cfg: &PriorProviderConfig) -> Result<PriorBundle<T>> {
    label.validate()?;
    let ds = cfg.similarity_dim();
    let mut sim = vec![0.0f64; ds];
    let mut present = vec![false; ds];
    for &(kind, v) in &label.entries {
        let slot = cfg.slot(kind)?;
        sim[slot] = v;
        present[slot] = true;
    }
    let total: f64 = sim.iter().sum();
    if label.is_clean() {
        sim.fill(1.0 / ds as f64);
    } else if total > 0.0 {
        sim.iter_mut().for_each(|v| *v /= total);
    } else {
        let n = present.iter().filter(|&&p| p).count() as f64;
        for (v, &p) in sim.iter_mut().zip(&present) {
            *v = if p { 1.0 / n } else { 0.0 };
        }
    }
    let table = embedding_table(cfg);
    let df = cfg.feature_dim;
    let mut feat = vec![0.0f64; df];
    for (slot, _) in present.iter().enumerate().filter(|(_, &p)| p) {
        for (f, &e) in feat.iter_mut().zip(&table[slot * df..(slot + 1) * df]) {
            *f += e;
        }
    }
    Ok(PriorBundle {
        features: Tensor::new(&[1, df], feat.into_iter().map(lit).collect())?,
        similarity: Tensor::new(&[1, ds], sim.into_iter().map(lit).collect())?,
    })
}

/// Three stride-2 convolutions, global pooling, and two linear heads.
#[derive(Clone, Debug)]
pub struct LearnedPrior {
    pub convs: [Conv3; 3],
    pub features: Linear,
    pub logits: Linear,
}

impl LearnedPrior {
    pub const MIN_SIZE: usize = 16;
    const WIDTHS: [usize; 4] = [3, 16, 32, 32];

    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &PriorProviderConfig) -> Result<Self> {
        let w = Self::WIDTHS;
        Ok(Self {
            convs: [
                Conv3::new(ps, &format!("{name}.conv0"), w[0], w[1], 2)?,
                Conv3::new(ps, &format!("{name}.conv1"), w[1], w[2], 2)?,
                Conv3::new(ps, &format!("{name}.conv2"), w[2], w[3], 2)?,
            ],
            features: Linear::new(ps, &format!("{name}.features"), w[3], cfg.feature_dim)?,
            logits: Linear::new(ps, &format!("{name}.logits"), w[3], cfg.similarity_dim())?,
        })
    }

    /// Prior for a `[B, 3, H, W]` image batch. Also returns the raw logits.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, image: Var) -> Result<(PriorVars, Var)> {
        let (_, c, h, w) = dims4(g.shape(image))?;
        if c != 3 || h < Self::MIN_SIZE || w < Self::MIN_SIZE {
            return Err(Error::Shape(format!(
                "learned prior needs [B,3,H,W] with H,W >= {}, got {:?}",
                Self::MIN_SIZE,
                g.shape(image)
            )));
        }
        let mut x = image;
        for conv in &self.convs {
            x = conv.forward(g, ps, x)?;
            x = g.gelu(x);
        }
        let pooled = g.global_avg_pool(x)?;
        let features = self.features.forward(g, ps, pooled)?;
        let logits = self.logits.forward(g, ps, pooled)?;
        let similarity = g.softmax_axis(logits, 1)?;
        Ok((PriorVars { features, similarity }, logits))
    }
}

/// Mean cross-entropy between predicted similarity `[B, d_s]` and target
/// distributions of the same shape.
pub fn similarity_cross_entropy<T: Real>(g: &mut Graph<T>, similarity: Var, target: Var) -> Result<Var> {
    let logp = g.unary(similarity, crate::autodiff::Unary::Ln);
    let prod = g.mul(logp, target)?;
    let b = g.shape(similarity)[0] as f64;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / b))
}
