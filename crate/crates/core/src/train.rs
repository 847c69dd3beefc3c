//! Training loop: batch sampling with crop and flip/rotate augmentation,
//! AdamW on the combined loss, a per-step metrics log, and checkpoints.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossReport, LossWeights};
use crate::manifest::Sample;
use crate::net::Model;
use crate::optim::{warmup_cosine, AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::priors::{oracle_prior, similarity_cross_entropy, DegradationLabel, LearnedPrior, PriorBundle};
use crate::tensor::Tensor;
use crate::Graph;

pub const METRICS_FILE: &str = "metrics.log";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Square crop side; a power of two.
    pub crop: usize,
    pub batch: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_init: f64,
    pub lr_min: f64,
    pub optim: AdamWConfig,
    pub augment_flip: bool,
    /// Random multiples of 90 degrees.
    pub augment_rotate: bool,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    /// Weight of the similarity cross-entropy that supervises a learned prior
    /// with the synthesis labels.
    pub prior_aux_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: 64,
            batch: 1,
            steps: 2000,
            warmup_steps: 100,
            lr_init: 2e-4,
            lr_min: 1e-6,
            optim: AdamWConfig::default(),
            augment_flip: true,
            augment_rotate: true,
            seed: 0,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            prior_aux_weight: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.crop.is_power_of_two() || self.crop < LearnedPrior::MIN_SIZE {
            return Err(Error::Config(format!(
                "crop must be a power of two >= {}, got {}",
                LearnedPrior::MIN_SIZE,
                self.crop
            )));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch and steps must be positive".into()));
        }
        if self.steps < self.warmup_steps {
            return Err(Error::Config(format!("steps {} < warmup_steps {}", self.steps, self.warmup_steps)));
        }
        if self.lr_init.is_nan()
            || self.lr_init <= 0.0
            || self.lr_min.is_nan()
            || self.lr_min < 0.0
            || self.lr_min > self.lr_init
        {
            return Err(Error::Config(format!(
                "need 0 <= lr_min <= lr_init, lr_init > 0: {} {}",
                self.lr_min, self.lr_init
            )));
        }
        if self.prior_aux_weight.is_nan() || self.prior_aux_weight < 0.0 {
            return Err(Error::Config("prior_aux_weight must be nonnegative".into()));
        }
        self.optim.validate()?;
        self.loss.validate()
    }

    pub fn lr(&self, step: usize) -> f64 {
        warmup_cosine(step, self.warmup_steps, self.steps, self.lr_init, self.lr_min)
    }
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossReport,
    pub lr: f64,
    /// Prior cross-entropy, zero unless the prior is learned.
    pub prior_aux: f64,
}

impl StepRecord {
    pub const HEADER: &'static str = "# step charbonnier balance fft total lr prior_aux";
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {:.8e} {:.8e}", self.step, self.loss, self.lr, self.prior_aux)
    }
}

/// `[3, H, W]` crop at `(top, left)`, optionally mirrored left-right, then
/// rotated counter-clockwise by `quarter_turns * 90` degrees.
pub fn crop_augment(
    img: &Tensor<f32>,
    top: usize,
    left: usize,
    size: usize,
    flip: bool,
    quarter_turns: usize,
) -> Result<Tensor<f32>> {
    let s = img.shape();
    if s.len() != 3 || top + size > s[1] || left + size > s[2] {
        return Err(Error::Shape(format!("crop {size} at ({top},{left}) outside {s:?}")));
    }
    let (c, w) = (s[0], s[2]);
    let d = img.data();
    let hw = s[1] * w;
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let (ch, y, x) = (i / (size * size), i / size % size, i % size);
        // invert the rotation, then the flip, to find the source pixel
        let (mut sy, mut sx) = (y, x);
        for _ in 0..quarter_turns % 4 {
            (sy, sx) = (sx, size - 1 - sy);
        }
        if flip {
            sx = size - 1 - sx;
        }
        d[ch * hw + (top + sy) * w + left + sx]
    }))
}

/// A training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub labels: Vec<DegradationLabel>,
}

/// Epoch-shuffled sampling with per-item random crops and augmentation.
#[derive(Clone, Debug)]
pub struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    pub fn new(seed: u64, len: usize) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..len).collect(), pos: len }
    }

    fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    pub fn next_batch(&mut self, data: &[Sample], tc: &TrainConfig) -> Result<Batch> {
        let n = tc.crop;
        let (mut deg, mut cln, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..tc.batch {
            let s = &data[self.next_index()];
            let (h, w) = (s.degraded.shape()[1], s.degraded.shape()[2]);
            if h < n || w < n {
                return Err(Error::Shape(format!("{}: {h}x{w} is smaller than the {n} crop", s.path)));
            }
            let top = self.rng.random_range(0..=h - n);
            let left = self.rng.random_range(0..=w - n);
            let flip = tc.augment_flip && self.rng.random::<bool>();
            let turns = if tc.augment_rotate { self.rng.random_range(0..4usize) } else { 0 };
            deg.extend_from_slice(crop_augment(&s.degraded, top, left, n, flip, turns)?.data());
            cln.extend_from_slice(crop_augment(&s.clean, top, left, n, flip, turns)?.data());
            labels.push(s.label.clone());
        }
        let shape = [tc.batch, 3, n, n];
        Ok(Batch { degraded: Tensor::new(&shape, deg)?, clean: Tensor::new(&shape, cln)?, labels })
    }
}

fn oracle_batch(model: &Model, labels: &[DegradationLabel]) -> Result<PriorBundle<f32>> {
    let items = labels.iter().map(|l| oracle_prior(l, &model.cfg.prior)).collect::<Result<Vec<_>>>()?;
    PriorBundle::stack(&items)
}

fn finite(component: &'static str, v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { component, step })
    }
}

/// Optimizer and sampler state around a model and its parameters.
pub struct Trainer<'m> {
    pub model: &'m Model,
    pub ps: ParamStore<f32>,
    pub cfg: TrainConfig,
    opt: AdamW,
    sampler: Sampler,
    step: usize,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m Model, ps: ParamStore<f32>, cfg: TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        if dataset_len == 0 {
            return Err(Error::InvalidArgument("training needs at least one sample".into()));
        }
        Ok(Self {
            opt: AdamW::new(cfg.optim, &ps),
            sampler: Sampler::new(cfg.seed, dataset_len),
            model,
            ps,
            cfg,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Runs one optimization step on a freshly sampled batch.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepRecord> {
        let batch = self.sampler.next_batch(data, &self.cfg)?;
        let step = self.step;
        let mut g = Graph::new();
        let x = g.constant(batch.degraded);
        let y = g.constant(batch.clean);
        let oracle = oracle_batch(self.model, &batch.labels)?;
        let out = self.model.forward(&mut g, &self.ps, x, Some(&oracle))?;
        let w = &self.cfg.loss;
        let bal = out.balance(&mut g, w.balance_eps, w.cv_squared)?;
        let (mut total, loss) = total_loss(&mut g, out.out, y, bal, w)?;
        finite("charbonnier", loss.charbonnier, step)?;
        finite("balance", loss.balance, step)?;
        finite("fft", loss.fft, step)?;
        let mut prior_aux = 0.0;
        if out.prior_logits.is_some() && self.cfg.prior_aux_weight > 0.0 {
            let target = g.constant(oracle.similarity.clone());
            let ce = similarity_cross_entropy(&mut g, out.prior.similarity, target)?;
            prior_aux = g.value(ce).item() as f64;
            finite("prior_aux", prior_aux, step)?;
            let sc = g.scale(ce, self.cfg.prior_aux_weight);
            total = g.add(total, sc)?;
        }
        finite("total", loss.total, step)?;
        let grads = g.backward(total)?;
        grads.accumulate_into(&mut self.ps);
        let lr = self.cfg.lr(step);
        self.opt.step(&mut self.ps, lr)?;
        self.step += 1;
        Ok(StepRecord { step, loss, lr, prior_aux })
    }
}

/// Trains for `cfg.steps` steps. With `out`, writes the metrics log and the
/// checkpoints there. Returns the updated parameters and every step record.
pub fn train(
    model: &Model,
    ps: ParamStore<f32>,
    data: &[Sample],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<(ParamStore<f32>, Vec<StepRecord>)> {
    let mut t = Trainer::new(model, ps, cfg.clone(), data.len())?;
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", StepRecord::HEADER).map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };
    let mut records = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let r = t.step(data)?;
        if let Some((w, path)) = &mut log {
            writeln!(w, "{r}").and_then(|_| w.flush()).map_err(|e| Error::io(&*path, e))?;
        }
        log::debug!("{r}");
        records.push(r);
        let done = r.step + 1;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
                Checkpoint::capture(&model.cfg, &t.ps).save(dir.join(format!("step_{done:06}.ckpt")))?;
            }
        }
    }
    if let Some(dir) = out {
        Checkpoint::capture(&model.cfg, &t.ps).save(dir.join(FINAL_CHECKPOINT))?;
    }
    Ok((t.ps, records))
}
