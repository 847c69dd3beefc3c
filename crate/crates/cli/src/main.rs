use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use moe_restore::checkpoint::Checkpoint;
use moe_restore::config::Config;
use moe_restore::data::DegradeSpec;
use moe_restore::eval::{evaluate, restore};
use moe_restore::manifest::{write_dataset, Dataset, SynthConfig};
use moe_restore::net::{build_model, Model};
use moe_restore::pnm::{read_ppm, write_pgm};
use moe_restore::priors::{DegradationKind, DegradationLabel};
use moe_restore::train::train;
use moe_restore::{Error, ParamStore, Result, Tensor};

#[derive(Parser, Debug)]
#[command(name = "moe-restore", version, about = "All-in-one image restoration with prior-guided expert routing")]
struct Cli {
    /// Worker threads for data synthesis and evaluation (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset: clean/, degraded/ and manifest.tsv.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset; prints "path psnr ssim" lines.
    Eval(EvalArgs),
    /// Export the first block's gate map of an image as PGM.
    Gates(GatesArgs),
    /// Print per-expert confidence and selection totals.
    RouteStats(RouteArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Image side; a power of two >= 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Gaussian noise at this level (out of 255) on every image instead of mixed degradations.
    #[arg(long)]
    noise: Option<f64>,
    /// Confine the noise to a random region per image.
    #[arg(long, requires = "noise")]
    partial: bool,
    /// Kinds to cycle through for mixed degradations.
    #[arg(long, value_delimiter = ',', default_value = "noise,rain,haze")]
    kinds: Vec<DegradationKind>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed (parameter init and batch sampling).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelSource {
    #[arg(long, conflicts_with = "config")]
    checkpoint: Option<PathBuf>,
    /// Build a freshly initialized model from this config instead of a checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GatesArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RouteArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    image: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Degradation label for the oracle prior of a single image, e.g. "noise=0.5,rain=0.2".
    #[arg(long, default_value = "")]
    label: String,
}

fn parse_label(s: &str) -> Result<DegradationLabel> {
    let mut entries = Vec::new();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("label entry {part:?} is not kind=value")))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad intensity in {part:?}")))?;
        entries.push((k.trim().parse()?, v));
    }
    let label = DegradationLabel { entries };
    label.validate()?;
    Ok(label)
}

fn load_model(src: &ModelSource) -> Result<(Model, ParamStore<f32>)> {
    match (&src.checkpoint, &src.config) {
        (Some(path), _) => Checkpoint::load(path)?.restore(),
        (None, Some(path)) => {
            let cfg = Config::load(path)?;
            let mut ps = ParamStore::new(src.seed);
            let model = build_model(&cfg.model, &mut ps)?;
            Ok((model, ps))
        }
        (None, None) => Err(Error::InvalidArgument("need --checkpoint or --config".into())),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.into(), source: e })
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = match a.noise {
        Some(sigma_255) => DegradeSpec::Noise { sigma_255, partial: a.partial },
        None => DegradeSpec::Mixed(a.kinds.clone()),
    };
    let cfg = SynthConfig { count: a.count, size: a.size, seed: a.seed, spec };
    let m = write_dataset(&a.out, &cfg)?;
    println!("wrote {} pairs to {}", m.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let ds = Dataset::open(&a.data)?;
    let samples = ds.load_all()?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    write_text(&a.out.join("config.txt"), &cfg.to_string())?;
    eprint!("{cfg}");
    let mut ps = ParamStore::new(cfg.train.seed);
    let model = build_model(&cfg.model, &mut ps)?;
    let (_, records) = train(&model, ps, &samples, &cfg.train, Some(&a.out))?;
    if let Some(last) = records.last() {
        println!("{last}");
    }
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let (model, ps) = Checkpoint::load(&a.checkpoint)?.restore()?;
    let ds = Dataset::open(&a.data)?;
    let report = evaluate(&model, &ps, &ds)?.to_string();
    print!("{report}");
    if let Some(out) = &a.out {
        write_text(out, &report)?;
    }
    Ok(())
}

fn gates(a: &GatesArgs) -> Result<()> {
    let (model, ps) = load_model(&a.model)?;
    let img = read_ppm(&a.image)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let gate = model.gate_map(&ps, &img.reshape(&[1, 3, h, w])?)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io { path: a.out.clone(), source: e })?;
    let path = a.out.join("gate.pgm");
    write_pgm(&path, &gate.clone().reshape(&[1, h, w])?)?;
    println!("{} mean {:.6}", path.display(), gate.mean());
    Ok(())
}

fn route_stats(a: &RouteArgs) -> Result<()> {
    let (model, ps) = load_model(&a.model)?;
    let routing = match (&a.image, &a.data) {
        (Some(path), _) => {
            let img: Tensor<f32> = read_ppm(path)?;
            restore(&model, &ps, &img, &parse_label(&a.label)?)?.routing
        }
        (None, Some(dir)) => evaluate(&model, &ps, &Dataset::open(dir)?)?.routing,
        (None, None) => return Err(Error::InvalidArgument("need --image or --data".into())),
    };
    for (i, r) in routing.iter().enumerate() {
        println!("block {i}");
        println!("{r}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let res = match &cli.cmd {
        Cmd::Synth(a) => synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Gates(a) => gates(a),
        Cmd::RouteStats(a) => route_stats(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
