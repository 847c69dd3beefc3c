//! Prior-guided per-pixel expert routing.
//!
//! A degradation prior is fused into a spatial map by cross-attention, a
//! router scores `N` specialized experts per pixel, the top `K` of them plus
//! an always-on shared expert are mixed, and the mixture is fused back into
//! the input features by channel cross-attention.

use std::fmt;
use std::rc::Rc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::mst::{Mst, MstConfig};
use crate::nn::{Depthwise, LayerNorm, Linear, Pointwise, WEIGHT_STD};
use crate::params::{Init, ParamId, ParamStore};
use crate::priors::PriorVars;
use crate::restormer::{Mdta, MdtaConfig};
use crate::tensor::{dims4, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdecConfig {
    pub channels: usize,
    /// Specialized experts `N`.
    pub experts: usize,
    /// Specialized experts kept per pixel `K`.
    pub top_k: usize,
    /// Heads of the fusion block and the final cross-attention.
    pub heads: usize,
    pub feature_dim: usize,
    pub similarity_dim: usize,
    /// Number of prior tokens the prior vector is expanded into.
    pub prior_tokens: usize,
}

impl AdecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.experts == 0 || self.prior_tokens == 0 {
            return Err(Error::Config(format!("degenerate expert config {self:?}")));
        }
        if self.top_k == 0 || self.top_k > self.experts {
            return Err(Error::Config(format!("top_k must be in 1..={}, got {}", self.experts, self.top_k)));
        }
        MdtaConfig::new(self.channels, self.heads).validate()
    }
}

/// Per-pixel two-layer channel network `C -> 2C -> C` with gelu.
#[derive(Clone, Debug)]
pub struct Expert {
    pub fc1: Pointwise,
    pub fc2: Pointwise,
}

impl Expert {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            fc1: Pointwise::new(ps, &format!("{name}.fc1"), c, 2 * c)?,
            fc2: Pointwise::new(ps, &format!("{name}.fc2"), 2 * c, c)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, ps, h)
    }
}

/// `N` specialized experts plus one shared expert, addressed as index `N`.
#[derive(Clone, Debug)]
pub struct ExpertLibrary {
    pub specialized: Vec<Expert>,
    pub shared: Expert,
}

impl ExpertLibrary {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize, n: usize) -> Result<Self> {
        let specialized = (0..n).map(|i| Expert::new(ps, &format!("{name}.e{i}"), c)).collect::<Result<_>>()?;
        Ok(Self { specialized, shared: Expert::new(ps, &format!("{name}.shared"), c)? })
    }

    pub fn len(&self) -> usize {
        self.specialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specialized.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&Expert> {
        match id.cmp(&self.specialized.len()) {
            std::cmp::Ordering::Less => Ok(&self.specialized[id]),
            std::cmp::Ordering::Equal => Ok(&self.shared),
            std::cmp::Ordering::Greater => Err(Error::InvalidArgument(format!("expert index {id} out of range"))),
        }
    }
}

/// Selected experts per pixel. Pixels are flat `b * H * W + y * W + x`;
/// each holds `K + 1` `(id, weight)` slots sorted by descending weight with
/// the shared expert (id `N`) first among equals.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub experts: usize,
    pub top_k: usize,
    pub dims: [usize; 3],
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
}

impl RoutingDecision {
    pub fn pixels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn slots(&self) -> usize {
        self.top_k + 1
    }

    pub fn ids_at(&self, pixel: usize) -> &[usize] {
        let k = self.slots();
        &self.ids[pixel * k..(pixel + 1) * k]
    }

    pub fn weights_at(&self, pixel: usize) -> &[f64] {
        let k = self.slots();
        &self.weights[pixel * k..(pixel + 1) * k]
    }

    /// Pixels routed to `expert`, ascending.
    pub fn pixels_for(&self, expert: usize) -> Vec<usize> {
        (0..self.pixels()).filter(|&p| self.ids_at(p).contains(&expert)).collect()
    }
}

/// Keeps the `K + 1` largest entries of `softmax([score'; 1])` at each pixel.
///
/// Selection is not differentiable; the returned weights are plain values.
pub fn select_experts<T: Real>(score: &Tensor<T>, top_k: usize) -> Result<RoutingDecision> {
    let (b, n, h, w) = score.dims4()?;
    if top_k == 0 || top_k > n {
        return Err(Error::InvalidArgument(format!("top_k {top_k} outside 1..={n}")));
    }
    let hw = h * w;
    let slots = top_k + 1;
    let d = score.data();
    let mut ids = Vec::with_capacity(b * hw * slots);
    let mut weights = Vec::with_capacity(b * hw * slots);
    let mut probs = vec![0.0f64; n + 1];
    let mut order: Vec<usize> = Vec::with_capacity(n + 1);
    for bi in 0..b {
        for p in 0..hw {
            for (e, v) in probs.iter_mut().enumerate().take(n) {
                *v = d[(bi * n + e) * hw + p].to_f64().unwrap();
            }
            probs[n] = 1.0;
            let m = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            probs.iter_mut().for_each(|v| *v = (*v - m).exp());
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|v| *v /= z);

            order.clear();
            order.extend(0..=n);
            // descending weight, shared slot first, then ascending index
            order.sort_by(|&a, &c| {
                probs[c].total_cmp(&probs[a]).then_with(|| (c == n).cmp(&(a == n))).then_with(|| a.cmp(&c))
            });
            for &e in &order[..slots] {
                ids.push(e);
                weights.push(probs[e]);
            }
        }
    }
    Ok(RoutingDecision { experts: n, top_k, dims: [b, h, w], ids, weights })
}

/// Confidence map `W` (router probabilities of the specialized experts),
/// binary selection map, and their per-expert totals.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    pub experts: usize,
    pub top_k: usize,
    /// `[B, N, H, W]`.
    pub confidence: Tensor<f64>,
    /// `[B, N, H, W]` with entries in {0, 1}; the shared expert is excluded.
    pub selection: Tensor<f64>,
    pub w_totals: Vec<f64>,
    pub s_totals: Vec<f64>,
}

impl RoutingStats {
    pub fn new<T: Real>(score: &Tensor<T>, decision: &RoutingDecision) -> Result<Self> {
        let (b, n, h, w) = score.dims4()?;
        if decision.dims != [b, h, w] || decision.experts != n {
            return Err(Error::Shape(format!(
                "routing decision {:?}/{} does not match scores {:?}",
                decision.dims,
                decision.experts,
                score.shape()
            )));
        }
        let hw = h * w;
        let confidence: Tensor<f64> = score.cast();
        let mut sel = vec![0.0f64; b * n * hw];
        for px in 0..b * hw {
            let (bi, p) = (px / hw, px % hw);
            for &e in decision.ids_at(px).iter().filter(|&&e| e < n) {
                sel[(bi * n + e) * hw + p] = 1.0;
            }
        }
        let totals = |d: &[f64]| -> Vec<f64> {
            (0..n)
                .map(|e| (0..b).map(|bi| d[(bi * n + e) * hw..(bi * n + e + 1) * hw].iter().sum::<f64>()).sum())
                .collect()
        };
        let w_totals = totals(confidence.data());
        let s_totals = totals(&sel);
        Ok(Self {
            experts: n,
            top_k: decision.top_k,
            selection: Tensor::new(&[b, n, h, w], sel)?,
            confidence,
            w_totals,
            s_totals,
        })
    }

    /// Standard deviation over mean (population statistics); 0 for a zero mean.
    pub fn coefficient_of_variation(values: &[f64]) -> f64 {
        let n = values.len() as f64;
        let mu = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        if mu == 0.0 {
            0.0
        } else {
            var.sqrt() / mu
        }
    }

    pub fn cv_w(&self) -> f64 {
        Self::coefficient_of_variation(&self.w_totals)
    }

    pub fn cv_s(&self) -> f64 {
        Self::coefficient_of_variation(&self.s_totals)
    }

    /// Adds another image's totals into this one (maps are not merged).
    pub fn accumulate_totals(&mut self, other: &RoutingStats) -> Result<()> {
        if other.experts != self.experts {
            return Err(Error::Shape("routing stats with different expert counts".into()));
        }
        self.w_totals.iter_mut().zip(&other.w_totals).for_each(|(a, b)| *a += b);
        self.s_totals.iter_mut().zip(&other.s_totals).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

impl fmt::Display for RoutingStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (w, s)) in self.w_totals.iter().zip(&self.s_totals).enumerate() {
            writeln!(f, "expert {n} W {w:.4} S {s}")?;
        }
        write!(f, "cv_W {:.6} cv_S {:.6}", self.cv_w(), self.cv_s())
    }
}

/// Prior fusion: expands `[features; similarity]` into `T` tokens and lets
/// each pixel of the feature map attend over them.
#[derive(Clone, Debug)]
pub struct Dacp {
    pub channels: usize,
    pub tokens: usize,
    pub embed: Linear,
    pub q: Pointwise,
    pub k: ParamId,
    pub v: ParamId,
    pub out: Pointwise,
}

impl Dacp {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: &AdecConfig) -> Result<Self> {
        let (c, t) = (cfg.channels, cfg.prior_tokens);
        Ok(Self {
            channels: c,
            tokens: t,
            embed: Linear::new(ps, &format!("{name}.embed"), cfg.feature_dim + cfg.similarity_dim, t * c)?,
            q: Pointwise::new(ps, &format!("{name}.q"), c, c)?,
            k: ps.register(format!("{name}.k"), &[c, c], Init::TruncNormal(WEIGHT_STD))?,
            v: ps.register(format!("{name}.v"), &[c, c], Init::TruncNormal(WEIGHT_STD))?,
            out: Pointwise::new(ps, &format!("{name}.out"), c, c)?,
        })
    }

    /// Position-aware prior map `[B, C, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, prior: PriorVars, xhat: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(g.shape(xhat))?;
        let (pf, pd) = (g.shape(prior.features).to_vec(), g.shape(prior.similarity).to_vec());
        if c != self.channels || pf.len() != 2 || pd.len() != 2 || pf[0] != b || pd[0] != b {
            return Err(Error::Shape(format!(
                "prior fusion over {} channels got features {pf:?}, similarity {pd:?}, map {:?}",
                self.channels,
                g.shape(xhat)
            )));
        }
        let cat = g.concat_channels(&[prior.features, prior.similarity])?;
        let tok = self.embed.forward(g, ps, cat)?;
        let tok = g.reshape(tok, &[b, self.tokens, c])?;
        let (wk, wv) = (g.param(ps, self.k), g.param(ps, self.v));
        let k = g.matmul(tok, wk)?;
        let v = g.matmul(tok, wv)?;

        let q = self.q.forward(g, ps, xhat)?;
        let q = g.reshape(q, &[b, c, h * w])?;
        let scores = g.matmul_t(q, k, true, true)?;
        let scores = g.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = g.softmax_axis(scores, 2)?;
        let mixed = g.matmul(attn, v)?;
        let mixed = g.transpose_last2(mixed)?;
        let mixed = g.reshape(mixed, &[b, c, h, w])?;
        self.out.forward(g, ps, mixed)
    }
}

/// Per-pixel router over `[P; LN(xhat)]`.
#[derive(Clone, Debug)]
pub struct Router {
    pub norm: LayerNorm,
    pub proj: Pointwise,
}

impl Router {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, c: usize, n: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c)?,
            proj: Pointwise::new(ps, &format!("{name}.proj"), 2 * c, n)?,
        })
    }

    /// Routing probabilities `score'` of shape `[B, N, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, prior_map: Var, xhat: Var) -> Result<Var> {
        if g.shape(prior_map) != g.shape(xhat) {
            return Err(Error::Shape(format!("router inputs differ: {:?} vs {:?}", g.shape(prior_map), g.shape(xhat))));
        }
        let n = self.norm.forward(g, ps, xhat)?;
        let cat = g.concat_channels(&[prior_map, n])?;
        let logits = self.proj.forward(g, ps, cat)?;
        g.softmax_axis(logits, 1)
    }
}

/// `softmax([score'; 1])` over the expert axis, `[B, N + 1, H, W]`.
pub fn slot_probabilities<T: Real>(g: &mut Graph<T>, score: Var) -> Result<Var> {
    let (b, _, h, w) = dims4(g.shape(score))?;
    let ones = g.constant(Tensor::full(&[b, 1, h, w], T::one()));
    let cat = g.concat_channels(&[score, ones])?;
    g.softmax_axis(cat, 1)
}

/// Sparse mixture `sum_k weight_k * E_{id_k}(xhat)` at every pixel.
///
/// `probs` is the `[B, N + 1, H, W]` output of [`slot_probabilities`]; the
/// weights are read from it so that they carry gradient, while the expert
/// sets come from `decision`.
pub fn aggregate_experts<T: Real>(
    g: &mut Graph<T>,
    ps: &ParamStore<T>,
    lib: &ExpertLibrary,
    xhat: Var,
    probs: Var,
    decision: &RoutingDecision,
) -> Result<Var> {
    let (b, c, h, w) = dims4(g.shape(xhat))?;
    let n = lib.len();
    if decision.dims != [b, h, w] || decision.experts != n || g.shape(probs) != [b, n + 1, h, w] {
        return Err(Error::Shape(format!(
            "routing for {:?}/{} experts does not fit map {:?} and probabilities {:?}",
            decision.dims,
            decision.experts,
            g.shape(xhat),
            g.shape(probs)
        )));
    }
    if let Some(&bad) = decision.ids.iter().find(|&&e| e > n) {
        return Err(Error::InvalidArgument(format!("expert index {bad} out of range")));
    }
    let mut acc: Option<Var> = None;
    for e in 0..=n {
        let pixels = decision.pixels_for(e);
        if pixels.is_empty() {
            continue;
        }
        let m = pixels.len();
        let idx = Rc::new(pixels);
        let p = g.gather_pixels(probs, idx.clone())?;
        let p = g.index0(p, e)?;
        let p = g.reshape(p, &[1, m])?;
        let xe = g.gather_pixels(xhat, idx.clone())?;
        let xe = g.reshape(xe, &[1, c, m, 1])?;
        let ye = lib.get(e)?.forward(g, ps, xe)?;
        let ye = g.reshape(ye, &[c, m])?;
        let ye = g.mul_bcast(ye, p)?;
        let placed = g.scatter_pixels(ye, idx, [b, c, h, w])?;
        acc = Some(match acc {
            Some(a) => g.add(a, placed)?,
            None => placed,
        });
    }
    acc.ok_or_else(|| Error::InvalidArgument("routing selected no experts".into()))
}

/// Everything one expert-collaboration pass produces.
#[derive(Clone, Debug)]
pub struct AdecOutput {
    pub out: Var,
    /// Router probabilities `[B, N, H, W]`, differentiable.
    pub score: Var,
    pub decision: RoutingDecision,
    pub stats: RoutingStats,
}

/// Prior fusion, routing, sparse mixture, and fusion back into the input.
#[derive(Clone, Debug)]
pub struct Adec {
    pub cfg: AdecConfig,
    pub dacp: Dacp,
    pub router: Router,
    pub experts: ExpertLibrary,
    pub dw: Depthwise,
    pub refine: Mst,
    pub cross: Mdta,
}

impl Adec {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cfg: AdecConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            dacp: Dacp::new(ps, &format!("{name}.dacp"), &cfg)?,
            router: Router::new(ps, &format!("{name}.router"), c, cfg.experts)?,
            experts: ExpertLibrary::new(ps, &format!("{name}.experts"), c, cfg.experts)?,
            dw: Depthwise::new(ps, &format!("{name}.dw"), c)?,
            refine: Mst::new(ps, &format!("{name}.refine"), MstConfig::new(c, cfg.heads))?,
            cross: Mdta::new(ps, &format!("{name}.cross"), MdtaConfig::new(c, cfg.heads))?,
            cfg,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        xhat: Var,
        prior: PriorVars,
    ) -> Result<AdecOutput> {
        let p = self.dacp.forward(g, ps, prior, xhat)?;
        let score = self.router.forward(g, ps, p, xhat)?;
        let decision = select_experts(g.value(score), self.cfg.top_k)?;
        let stats = RoutingStats::new(g.value(score), &decision)?;
        let probs = slot_probabilities(g, score)?;
        let mixed = aggregate_experts(g, ps, &self.experts, xhat, probs, &decision)?;
        let ctx = self.dw.forward(g, ps, mixed)?;
        let ctx = self.refine.forward(g, ps, ctx)?;
        let (out, _) = self.cross.forward_cross(g, ps, xhat, ctx)?;
        Ok(AdecOutput { out, score, decision, stats })
    }
}
