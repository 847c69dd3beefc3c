//! The full U-shaped restoration network.
//!
//! Encoder stages `E0..E3` run at widths `C, 2C, 4C, 8C`, separated by a
//! pointwise halving followed by pixel unshuffle. The decoder mirrors them:
//! pointwise doubling plus pixel shuffle, concatenation with the matching
//! encoder output, and a 1x1 fuse. Decoder stages `D2, D1, D0` are each
//! followed by an expert-collaboration block whose output is added back onto
//! the decoder features. A refinement stage `R` at width `C` precedes the
//! output convolution, whose residual is added to the input.

use crate::adec::{Adec, AdecConfig, AdecOutput, RoutingStats};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::losses::balance_loss;
use crate::mst::{Mst, MstConfig};
use crate::nn::{Conv3, Pointwise};
use crate::params::ParamStore;
use crate::priors::{LearnedPrior, PriorBundle, PriorMode, PriorProviderConfig, PriorVars};
use crate::tensor::{dims4, Real, Tensor};

pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub blocks_per_stage: [usize; STAGES],
    pub heads_per_stage: [usize; STAGES],
    pub experts: usize,
    pub top_k: usize,
    /// Tokens the prior vector is expanded into inside each fusion block.
    pub prior_tokens: usize,
    pub prior: PriorProviderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            blocks_per_stage: [1, 1, 1, 2],
            heads_per_stage: [1, 2, 4, 8],
            experts: 4,
            top_k: 2,
            prior_tokens: 4,
            prior: PriorProviderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (STAGES - 1)
    }

    fn adec_config(&self, stage: usize) -> AdecConfig {
        AdecConfig {
            channels: self.stage_channels(stage),
            experts: self.experts,
            top_k: self.top_k,
            heads: self.heads_per_stage[stage],
            feature_dim: self.prior.feature_dim,
            similarity_dim: self.prior.similarity_dim(),
            prior_tokens: self.prior_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.base_channels;
        if c == 0 || !c.is_multiple_of(2) {
            return Err(Error::Config(format!("base_channels must be even and positive, got {c}")));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        for s in 0..STAGES {
            let (ch, h) = (self.stage_channels(s), self.heads_per_stage[s]);
            if h == 0 || ch % h != 0 {
                return Err(Error::Config(format!("stage {s}: {h} heads do not divide {ch} channels")));
            }
        }
        self.prior.validate()?;
        for s in 0..STAGES - 1 {
            self.adec_config(s).validate()?;
        }
        Ok(())
    }
}

fn stage<T: Real>(ps: &mut ParamStore<T>, name: &str, n: usize, c: usize, heads: usize) -> Result<Vec<Mst>> {
    (0..n).map(|i| Mst::new(ps, &format!("{name}.{i}"), MstConfig::new(c, heads))).collect()
}

fn run<T: Real>(blocks: &[Mst], g: &mut Graph<T>, ps: &ParamStore<T>, mut x: Var) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, ps, x)?;
    }
    Ok(x)
}

/// One decoder level: upsample, concatenate the skip, fuse, then blocks.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub up: Pointwise,
    pub fuse: Pointwise,
    pub blocks: Vec<Mst>,
}

/// Everything a forward pass produces besides the image.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub out: Var,
    /// Expert blocks in decoder order (deepest first).
    pub adec: Vec<AdecOutput>,
    pub prior: PriorVars,
    /// Similarity logits when the prior is learned.
    pub prior_logits: Option<Var>,
}

impl ModelOutput {
    /// Balance loss averaged over the expert blocks.
    pub fn balance<T: Real>(&self, g: &mut Graph<T>, eps: f64, cv_squared: bool) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for a in &self.adec {
            let b = balance_loss(g, a.score, &a.stats.s_totals, eps, cv_squared)?;
            acc = Some(match acc {
                Some(s) => g.add(s, b)?,
                None => b,
            });
        }
        Ok(acc.map(|s| g.scale(s, 1.0 / self.adec.len() as f64)))
    }

    pub fn stats(&self) -> Vec<&RoutingStats> {
        self.adec.iter().map(|a| &a.stats).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stem: Conv3,
    pub encoders: Vec<Vec<Mst>>,
    pub downs: Vec<Pointwise>,
    /// Decoders for stages 2, 1, 0.
    pub decoders: Vec<DecoderStage>,
    pub adec: Vec<Adec>,
    pub refine: Vec<Mst>,
    pub output: Conv3,
    pub learned_prior: Option<LearnedPrior>,
}

/// Builds the network and registers its parameters in `ps`, in a fixed order.
pub fn build_model<T: Real>(cfg: &ModelConfig, ps: &mut ParamStore<T>) -> Result<Model> {
    cfg.validate()?;
    let c = cfg.base_channels;
    let stem = Conv3::new(ps, "stem", 3, c, 1)?;
    let mut encoders = Vec::with_capacity(STAGES);
    let mut downs = Vec::with_capacity(STAGES - 1);
    for s in 0..STAGES {
        let ch = cfg.stage_channels(s);
        encoders.push(stage(ps, &format!("enc{s}"), cfg.blocks_per_stage[s], ch, cfg.heads_per_stage[s])?);
        if s + 1 < STAGES {
            downs.push(Pointwise::new(ps, &format!("down{s}"), ch, ch / 2)?);
        }
    }
    let mut decoders = Vec::with_capacity(STAGES - 1);
    let mut adec = Vec::with_capacity(STAGES - 1);
    for s in (0..STAGES - 1).rev() {
        let ch = cfg.stage_channels(s);
        decoders.push(DecoderStage {
            up: Pointwise::new(ps, &format!("up{s}"), 2 * ch, 4 * ch)?,
            fuse: Pointwise::new(ps, &format!("dec{s}.fuse"), 2 * ch, ch)?,
            blocks: stage(ps, &format!("dec{s}"), cfg.blocks_per_stage[s], ch, cfg.heads_per_stage[s])?,
        });
        adec.push(Adec::new(ps, &format!("adec{s}"), cfg.adec_config(s))?);
    }
    let refine = stage(ps, "refine", cfg.blocks_per_stage[0], c, cfg.heads_per_stage[0])?;
    let output = Conv3::new(ps, "output", c, 3, 1)?;
    let learned_prior = match cfg.prior.mode {
        PriorMode::Learned => Some(LearnedPrior::new(ps, "prior", &cfg.prior)?),
        PriorMode::Oracle => None,
    };
    Ok(Model { cfg: cfg.clone(), stem, encoders, downs, decoders, adec, refine, output, learned_prior })
}

impl Model {
    fn check_input<T: Real>(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let (_, c, h, w) = dims4(g.shape(x))?;
        let m = self.cfg.size_multiple();
        if c != 3 || h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "model input must be [B,3,H,W] with H,W multiples of {m}, got {:?}",
                g.shape(x)
            )));
        }
        Ok(())
    }

    /// Restores `x`. `prior` is required with the oracle provider and ignored
    /// with the learned one.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        prior: Option<&PriorBundle<T>>,
    ) -> Result<ModelOutput> {
        self.check_input(g, x)?;
        let (prior, prior_logits) = match (&self.learned_prior, prior) {
            (Some(lp), _) => {
                let (p, l) = lp.forward(g, ps, x)?;
                (p, Some(l))
            }
            (None, Some(b)) => {
                if b.features.shape()[0] != g.shape(x)[0] {
                    return Err(Error::Shape(format!(
                        "prior batch {} vs image batch {}",
                        b.features.shape()[0],
                        g.shape(x)[0]
                    )));
                }
                (b.record(g), None)
            }
            (None, None) => return Err(Error::InvalidArgument("oracle prior mode needs a prior bundle".into())),
        };

        let mut h = self.stem.forward(g, ps, x)?;
        let mut skips = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            h = run(&self.encoders[s], g, ps, h)?;
            if s + 1 < STAGES {
                skips.push(h);
                let d = self.downs[s].forward(g, ps, h)?;
                h = g.pixel_unshuffle(d, 2)?;
            }
        }
        let mut adec = Vec::with_capacity(STAGES - 1);
        for (i, (dec, block)) in self.decoders.iter().zip(&self.adec).enumerate() {
            let u = dec.up.forward(g, ps, h)?;
            let u = g.pixel_shuffle(u, 2)?;
            let skip = skips[STAGES - 2 - i];
            let cat = g.concat_channels(&[u, skip])?;
            h = dec.fuse.forward(g, ps, cat)?;
            h = run(&dec.blocks, g, ps, h)?;
            let a = block.forward(g, ps, h, prior)?;
            h = g.add(h, a.out)?;
            adec.push(a);
        }
        h = run(&self.refine, g, ps, h)?;
        let r = self.output.forward(g, ps, h)?;
        let out = g.add(x, r)?;
        Ok(ModelOutput { out, adec, prior, prior_logits })
    }

    /// Output gate map of the first encoder block, `[B, 1, H, W]`.
    pub fn gate_map<T: Real>(&self, ps: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        self.check_input(&g, xv)?;
        let h = self.stem.forward(&mut g, ps, xv)?;
        self.encoders[0][0].gate_map(&mut g, ps, h)
    }
}
