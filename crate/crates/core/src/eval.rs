//! Full-image inference and dataset evaluation.

use std::fmt;

use rayon::prelude::*;

use crate::adec::RoutingStats;
use crate::error::Result;
use crate::manifest::Dataset;
use crate::metrics::{psnr, ssim};
use crate::net::Model;
use crate::params::ParamStore;
use crate::priors::{oracle_prior, DegradationLabel};
use crate::tensor::Tensor;
use crate::Graph;

/// Restored image and the routing statistics of each expert block.
#[derive(Clone, Debug)]
pub struct Restored {
    pub image: Tensor<f32>,
    pub routing: Vec<RoutingStats>,
}

/// Runs the network on one `[3, H, W]` image. `label` feeds the oracle prior
/// and is ignored by a learned one. The output is clamped to `[0, 1]`.
pub fn restore(model: &Model, ps: &ParamStore<f32>, img: &Tensor<f32>, label: &DegradationLabel) -> Result<Restored> {
    let mut shape = vec![1];
    shape.extend_from_slice(img.shape());
    let x = img.clone().reshape(&shape)?;
    let prior = oracle_prior(label, &model.cfg.prior)?;
    let mut g = Graph::inference();
    let xv = g.constant(x);
    let out = model.forward(&mut g, ps, xv, Some(&prior))?;
    let routing = out.adec.iter().map(|a| a.stats.clone()).collect();
    let data = g.data(out.out).iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Restored { image: Tensor::new(img.shape(), data)?, routing })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub path: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl fmt::Display for ImageScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.6} {:.6}", self.path, self.psnr, self.ssim)
    }
}

/// Per-image scores in manifest order, failures, and routing totals per
/// expert block.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub scores: Vec<ImageScore>,
    pub skipped: Vec<(String, String)>,
    pub routing: Vec<RoutingStats>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.scores.iter().map(|s| s.psnr).sum::<f64>() / self.scores.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.scores.iter().map(|s| s.ssim).sum::<f64>() / self.scores.len().max(1) as f64
    }

    /// Parses the `path psnr ssim` lines of a rendered report.
    pub fn parse_scores(text: &str) -> Vec<ImageScore> {
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("mean "))
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                let (path, p, s) = (it.next()?, it.next()?, it.next()?);
                if it.next().is_some() {
                    return None;
                }
                Some(ImageScore { path: path.into(), psnr: p.parse().ok()?, ssim: s.parse().ok()? })
            })
            .collect()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# path psnr ssim")?;
        for s in &self.scores {
            writeln!(f, "{s}")?;
        }
        writeln!(f, "mean {:.6} {:.6}", self.mean_psnr(), self.mean_ssim())?;
        for (path, why) in &self.skipped {
            writeln!(f, "# skipped {path}: {why}")?;
        }
        for (i, r) in self.routing.iter().enumerate() {
            writeln!(f, "# routing block {i}")?;
            for line in r.to_string().lines() {
                writeln!(f, "# {line}")?;
            }
        }
        Ok(())
    }
}

fn score_one(model: &Model, ps: &ParamStore<f32>, ds: &Dataset, i: usize) -> Result<(ImageScore, Vec<RoutingStats>)> {
    let s = ds.load_sample(i)?;
    let r = restore(model, ps, &s.degraded, &s.label)?;
    let score = ImageScore { psnr: psnr(&r.image, &s.clean)?, ssim: ssim(&r.image, &s.clean)?, path: s.path };
    Ok((score, r.routing))
}

/// Evaluates every manifest entry. Images that fail to load or run are
/// skipped with a warning and listed in the report.
pub fn evaluate(model: &Model, ps: &ParamStore<f32>, ds: &Dataset) -> Result<EvalReport> {
    let results: Vec<_> = (0..ds.manifest.len()).into_par_iter().map(|i| score_one(model, ps, ds, i)).collect();
    let mut report = EvalReport { scores: Vec::new(), skipped: Vec::new(), routing: Vec::new() };
    for (i, res) in results.into_iter().enumerate() {
        match res {
            Ok((score, routing)) => {
                report.scores.push(score);
                if report.routing.is_empty() {
                    report.routing = routing;
                } else {
                    for (acc, r) in report.routing.iter_mut().zip(&routing) {
                        acc.accumulate_totals(r)?;
                    }
                }
            }
            Err(e) => {
                let path = ds.manifest.records[i].path.clone();
                log::warn!("skipping {path}: {e}");
                report.skipped.push((path, e.to_string()));
            }
        }
    }
    Ok(report)
}
