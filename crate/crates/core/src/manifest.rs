//! Dataset manifests and on-disk dataset synthesis.
//!
//! A manifest is plain text. An optional `# seed=N` line carries the dataset
//! seed; every other non-empty, non-comment line is
//! `path<TAB>kinds<TAB>intensities` with comma-separated lists, `-` standing
//! for an empty list (a clean image). Paths point at degraded images relative
//! to the manifest; the clean target of `degraded/x.ppm` is `clean/x.ppm`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{synth_pair, DegradeSpec, ImagePair};
use crate::error::{Error, Result};
use crate::pnm::{read_ppm, write_ppm};
use crate::priors::{DegradationKind, DegradationLabel};
use crate::tensor::Tensor;

const WHAT: &str = "manifest";
pub const DEGRADED_DIR: &str = "degraded";
pub const CLEAN_DIR: &str = "clean";
pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub label: DegradationLabel,
}

impl ManifestRecord {
    /// Path of the clean target, following the `degraded/` to `clean/` convention.
    pub fn clean_path(&self) -> Result<String> {
        match self.path.strip_prefix(&format!("{DEGRADED_DIR}/")) {
            Some(rest) => Ok(format!("{CLEAN_DIR}/{rest}")),
            None => Err(Error::format(WHAT, format!("{} is not under {DEGRADED_DIR}/", self.path))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub records: Vec<ManifestRecord>,
}

fn join_or_dash<I: IntoIterator<Item = String>>(it: I) -> String {
    let v: Vec<String> = it.into_iter().collect();
    if v.is_empty() {
        "-".into()
    } else {
        v.join(",")
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# seed={}", self.seed)?;
        for r in &self.records {
            let kinds = join_or_dash(r.label.entries.iter().map(|(k, _)| k.to_string()));
            let vals = join_or_dash(r.label.entries.iter().map(|(_, v)| format!("{v}")));
            writeln!(f, "{}\t{kinds}\t{vals}", r.path)?;
        }
        Ok(())
    }
}

fn split_list(s: &str) -> Vec<&str> {
    if s == "-" {
        Vec::new()
    } else {
        s.split(',').collect()
    }
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (no, line) in text.lines().enumerate() {
            let no = no + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                if let Some(v) = c.trim().strip_prefix("seed=") {
                    m.seed = v.trim().parse().map_err(|_| Error::format(WHAT, format!("line {no}: bad seed {v:?}")))?;
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [path, kinds, vals] = cols[..] else {
                return Err(Error::format(WHAT, format!("line {no}: expected 3 tab-separated columns")));
            };
            if path.is_empty() || path.starts_with('/') || path.split('/').any(|p| p == "..") {
                return Err(Error::format(WHAT, format!("line {no}: path {path:?} must be relative and stay inside")));
            }
            let (kinds, vals) = (split_list(kinds), split_list(vals));
            if kinds.len() != vals.len() {
                return Err(Error::format(
                    WHAT,
                    format!("line {no}: {} kinds but {} intensities", kinds.len(), vals.len()),
                ));
            }
            let mut entries = Vec::with_capacity(kinds.len());
            for (k, v) in kinds.into_iter().zip(vals) {
                let kind: DegradationKind =
                    k.parse().map_err(|e: Error| Error::format(WHAT, format!("line {no}: {e}")))?;
                let v: f64 = v.parse().map_err(|_| Error::format(WHAT, format!("line {no}: bad intensity {v:?}")))?;
                entries.push((kind, v));
            }
            let label = DegradationLabel { entries };
            label.validate().map_err(|e| Error::format(WHAT, format!("line {no}: {e}")))?;
            m.records.push(ManifestRecord { path: path.to_string(), label });
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A manifest together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// One loaded record.
#[derive(Clone, Debug)]
pub struct Sample {
    pub path: String,
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
    pub label: DegradationLabel,
}

impl Sample {
    /// An in-memory sample from a synthesized pair.
    pub fn from_pair(path: impl Into<String>, pair: ImagePair) -> Self {
        Self { path: path.into(), degraded: pair.degraded, clean: pair.clean, label: pair.label }
    }
}

impl Dataset {
    /// Opens `dir/manifest.tsv`, or a manifest file directly.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { manifest: Manifest::load(&file)?, root })
    }

    pub fn load_sample(&self, index: usize) -> Result<Sample> {
        let r = &self.manifest.records[index];
        let degraded = read_ppm(self.root.join(&r.path))?;
        let clean = read_ppm(self.root.join(r.clean_path()?))?;
        if degraded.shape() != clean.shape() {
            return Err(Error::Shape(format!(
                "{}: degraded {:?} vs clean {:?}",
                r.path,
                degraded.shape(),
                clean.shape()
            )));
        }
        Ok(Sample { path: r.path.clone(), degraded, clean, label: r.label.clone() })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.manifest.len()).map(|i| self.load_sample(i)).collect()
    }
}

/// Parameters of an on-disk synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub spec: DegradeSpec,
}

/// Generates the pairs of a synthetic dataset in parallel; the result depends
/// only on the config.
pub fn synth_pairs(cfg: &SynthConfig) -> Result<Vec<ImagePair>> {
    (0..cfg.count).into_par_iter().map(|i| synth_pair(cfg.seed, i, cfg.size, &cfg.spec)).collect()
}

/// Writes `clean/`, `degraded/`, and `manifest.tsv` under `out`.
pub fn write_dataset(out: impl AsRef<Path>, cfg: &SynthConfig) -> Result<Manifest> {
    let out = out.as_ref();
    for d in [out.join(CLEAN_DIR), out.join(DEGRADED_DIR)] {
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let pairs = synth_pairs(cfg)?;
    let mut manifest = Manifest { seed: cfg.seed, records: Vec::with_capacity(pairs.len()) };
    for (i, p) in pairs.iter().enumerate() {
        let name = format!("img_{i:04}.ppm");
        write_ppm(out.join(CLEAN_DIR).join(&name), &p.clean)?;
        write_ppm(out.join(DEGRADED_DIR).join(&name), &p.degraded)?;
        manifest.records.push(ManifestRecord { path: format!("{DEGRADED_DIR}/{name}"), label: p.label.clone() });
    }
    let file = out.join(MANIFEST_FILE);
    fs::write(&file, manifest.to_string()).map_err(|e| Error::io(&file, e))?;
    Ok(manifest)
}
