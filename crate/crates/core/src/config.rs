//! Plain-text configuration: `key = value` lines, `#` comments, keys named
//! after the fields of [`ModelConfig`] and [`TrainConfig`]. Lists are
//! comma-separated. Unknown and repeated keys are errors.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::net::{ModelConfig, STAGES};
use crate::priors::DegradationKind;
use crate::train::TrainConfig;

const WHAT: &str = "config";

fn bad(key: &str, val: &str) -> Error {
    Error::format(WHAT, format!("bad value {val:?} for {key}"))
}

fn scalar<V: FromStr>(key: &str, val: &str) -> Result<V> {
    val.parse().map_err(|_| bad(key, val))
}

fn flag(key: &str, val: &str) -> Result<bool> {
    match val {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, val)),
    }
}

fn list<V: FromStr>(key: &str, val: &str) -> Result<Vec<V>> {
    val.split(',').map(|s| scalar(key, s.trim())).collect()
}

fn stages(key: &str, val: &str) -> Result<[usize; STAGES]> {
    list::<usize>(key, val)?.try_into().map_err(|_| bad(key, val))
}

fn join<V: fmt::Display>(v: &[V]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Splits text into `(line number, key, value)` triples.
fn entries(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out: Vec<(usize, &str, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::format(WHAT, format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if out.iter().any(|(_, seen, _)| *seen == k) {
            return Err(Error::format(WHAT, format!("line {}: {k} given twice", i + 1)));
        }
        out.push((i + 1, k, v));
    }
    Ok(out)
}

impl ModelConfig {
    /// Applies one key; returns `false` when the key is not a model key.
    pub fn set(&mut self, key: &str, val: &str) -> Result<bool> {
        match key {
            "base_channels" => self.base_channels = scalar(key, val)?,
            "blocks_per_stage" => self.blocks_per_stage = stages(key, val)?,
            "heads_per_stage" => self.heads_per_stage = stages(key, val)?,
            "experts" => self.experts = scalar(key, val)?,
            "top_k" => self.top_k = scalar(key, val)?,
            "prior_tokens" => self.prior_tokens = scalar(key, val)?,
            "prior_mode" => self.prior.mode = scalar(key, val)?,
            "prior_feature_dim" => self.prior.feature_dim = scalar(key, val)?,
            "prior_kinds" => self.prior.kinds = list::<DegradationKind>(key, val)?,
            "prior_seed" => self.prior.seed = scalar(key, val)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = &self.prior;
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "blocks_per_stage = {}", join(&self.blocks_per_stage));
        let _ = writeln!(s, "heads_per_stage = {}", join(&self.heads_per_stage));
        let _ = writeln!(s, "experts = {}", self.experts);
        let _ = writeln!(s, "top_k = {}", self.top_k);
        let _ = writeln!(s, "prior_tokens = {}", self.prior_tokens);
        let _ = writeln!(s, "prior_mode = {}", p.mode);
        let _ = writeln!(s, "prior_feature_dim = {}", p.feature_dim);
        let _ = writeln!(s, "prior_kinds = {}", join(&p.kinds));
        let _ = writeln!(s, "prior_seed = {}", p.seed);
        s
    }

    /// Parses model keys only; the result is validated.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, k, v) in entries(text)? {
            if !cfg.set(k, v)? {
                return Err(Error::format(WHAT, format!("line {no}: unknown model key {k:?}")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    /// Applies one key; returns `false` when the key is not a training key.
    pub fn set(&mut self, key: &str, val: &str) -> Result<bool> {
        let l = &mut self.loss;
        let o = &mut self.optim;
        match key {
            "crop" => self.crop = scalar(key, val)?,
            "batch" => self.batch = scalar(key, val)?,
            "steps" => self.steps = scalar(key, val)?,
            "warmup_steps" => self.warmup_steps = scalar(key, val)?,
            "lr_init" => self.lr_init = scalar(key, val)?,
            "lr_min" => self.lr_min = scalar(key, val)?,
            "beta1" => o.beta1 = scalar(key, val)?,
            "beta2" => o.beta2 = scalar(key, val)?,
            "adam_eps" => o.eps = scalar(key, val)?,
            "weight_decay" => o.weight_decay = scalar(key, val)?,
            "augment_flip" => self.augment_flip = flag(key, val)?,
            "augment_rotate" => self.augment_rotate = flag(key, val)?,
            "seed" => self.seed = scalar(key, val)?,
            "checkpoint_every" => self.checkpoint_every = scalar(key, val)?,
            "lambda1" => l.lambda1 = scalar(key, val)?,
            "lambda2" => l.lambda2 = scalar(key, val)?,
            "charb_eps" => l.charb_eps = scalar(key, val)?,
            "balance_eps" => l.balance_eps = scalar(key, val)?,
            "cv_squared" => l.cv_squared = flag(key, val)?,
            "prior_aux_weight" => self.prior_aux_weight = scalar(key, val)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let (l, o) = (&self.loss, &self.optim);
        let _ = writeln!(s, "crop = {}", self.crop);
        let _ = writeln!(s, "batch = {}", self.batch);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "warmup_steps = {}", self.warmup_steps);
        let _ = writeln!(s, "lr_init = {}", self.lr_init);
        let _ = writeln!(s, "lr_min = {}", self.lr_min);
        let _ = writeln!(s, "beta1 = {}", o.beta1);
        let _ = writeln!(s, "beta2 = {}", o.beta2);
        let _ = writeln!(s, "adam_eps = {}", o.eps);
        let _ = writeln!(s, "weight_decay = {}", o.weight_decay);
        let _ = writeln!(s, "augment_flip = {}", self.augment_flip);
        let _ = writeln!(s, "augment_rotate = {}", self.augment_rotate);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "lambda1 = {}", l.lambda1);
        let _ = writeln!(s, "lambda2 = {}", l.lambda2);
        let _ = writeln!(s, "charb_eps = {}", l.charb_eps);
        let _ = writeln!(s, "balance_eps = {}", l.balance_eps);
        let _ = writeln!(s, "cv_squared = {}", l.cv_squared);
        let _ = writeln!(s, "prior_aux_weight = {}", self.prior_aux_weight);
        s
    }
}

/// A whole run configuration: model and training keys in one file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, k, v) in entries(text)? {
            if !cfg.model.set(k, v)? && !cfg.train.set(k, v)? {
                return Err(Error::format(WHAT, format!("line {no}: unknown key {k:?}")));
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("# model\n")?;
        f.write_str(&self.model.to_text())?;
        f.write_str("# training\n")?;
        f.write_str(&self.train.to_text())
    }
}
