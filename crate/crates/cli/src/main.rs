use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use hsc_core::data::{synth_scene, HsiCube, SceneSpec};
use hsc_core::trainer::{labels_from_bytes, run_pipeline, TrainConfig};
use hsc_core::Scores;

mod convert;

use convert::{Dtype, Interleave, Layout, PixelOrder};

/// Deep subspace clustering of hyperspectral images.
#[derive(Debug, Parser)]
#[command(name = "hsc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic union-of-subspaces scene.
    Synth(SynthArgs),
    /// Run the full clustering pipeline on a labeled HSIC cube.
    Cluster(ClusterArgs),
    /// Score a label file against a cube's ground truth.
    Eval(EvalArgs),
    /// Build an HSIC cube from a raw matrix dump.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    w: usize,
    #[arg(long)]
    h: usize,
    /// Spectral bands.
    #[arg(long)]
    b: usize,
    /// Classes.
    #[arg(long)]
    k: usize,
    /// Subspace dimension per class, below the band count.
    #[arg(long)]
    q: usize,
    /// Noise deviation.
    #[arg(long, default_value_t = 0.01)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of clusters.
    #[arg(long)]
    k: usize,
    /// Run directory; created if missing.
    #[arg(long)]
    out: PathBuf,
    /// `key=value` file applied before the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Joint-training learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Basis dissimilarity weight.
    #[arg(long)]
    beta: Option<f64>,
    /// Mini-cluster (non-local) weight.
    #[arg(long)]
    beta1: Option<f64>,
    /// Spatial smoothing (local) weight.
    #[arg(long)]
    beta2: Option<f64>,
    /// Smoothing window edge: 3, 5 or 7.
    #[arg(long)]
    window: Option<usize>,
    /// Any configuration key, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Cube holding the ground truth.
    #[arg(long = "in")]
    input: PathBuf,
    /// Little-endian u16 ids, one per labeled pixel in raster order.
    #[arg(long)]
    labels: PathBuf,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Headerless spectral dump.
    #[arg(long)]
    raw: PathBuf,
    #[arg(long)]
    w: usize,
    #[arg(long)]
    h: usize,
    #[arg(long)]
    b: usize,
    #[arg(long, value_enum, default_value_t = Dtype::F32)]
    dtype: Dtype,
    #[arg(long, value_enum, default_value_t = Interleave::Bip)]
    interleave: Interleave,
    /// Pixel order of the dump; `column` for MATLAB or Fortran arrays.
    #[arg(long, value_enum, default_value_t = PixelOrder::Row)]
    order: PixelOrder,
    #[arg(long)]
    big_endian: bool,
    /// Headerless ground-truth dump, 0 for unlabeled pixels.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Dtype::U16)]
    label_dtype: Dtype,
    #[arg(long)]
    out: PathBuf,
}

fn load(path: &std::path::Path) -> Result<HsiCube> {
    HsiCube::load(path).with_context(|| format!("loading {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let cube = synth_scene(&SceneSpec {
        seed: a.seed,
        width: a.w,
        height: a.h,
        bands: a.b,
        classes: a.k,
        subspace_dim: a.q,
        noise: a.sigma,
    })?;
    cube.save(&a.out)?;
    let mut sizes = vec![0usize; a.k];
    for &l in cube.labels().unwrap_or_default() {
        sizes[l as usize - 1] += 1;
    }
    println!("wrote {} ({}x{}x{})", a.out.display(), a.w, a.h, a.b);
    for (j, n) in sizes.iter().enumerate() {
        println!("class {:>3}  {n}", j + 1);
    }
    Ok(())
}

fn cluster(a: ClusterArgs) -> Result<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    cfg.clusters = a.k;
    let flags = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr", a.lr.map(|v| v.to_string())),
        ("beta", a.beta.map(|v| v.to_string())),
        ("beta1", a.beta1.map(|v| v.to_string())),
        ("beta2", a.beta2.map(|v| v.to_string())),
        ("window", a.window.map(|v| v.to_string())),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| hsc_core::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    let cube = load(&a.input)?;
    let out = run_pipeline(&cube, &cfg, Some(&a.out))?;
    println!("run directory {}", a.out.display());
    print!("{}", out.scores.report());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cube = load(&a.input)?;
    ensure!(cube.labels().is_some(), "{} has no ground truth", a.input.display());
    let bytes = convert::read(&a.labels)?;
    let pred: Vec<usize> = labels_from_bytes(&bytes)?.into_iter().map(usize::from).collect();
    let truth: Vec<usize> = cube.masked_labels().into_iter().map(usize::from).collect();
    ensure!(
        pred.len() == truth.len(),
        "{} holds {} labels but the cube has {} labeled pixels",
        a.labels.display(),
        pred.len(),
        truth.len()
    );
    print!("{}", Scores::compute(&pred, &truth)?.report());
    Ok(())
}

fn convert_cmd(a: ConvertArgs) -> Result<()> {
    let layout = Layout {
        width: a.w,
        height: a.h,
        bands: a.b,
        interleave: a.interleave,
        order: a.order,
    };
    let values = convert::decode(&convert::read(&a.raw)?, a.dtype, a.big_endian, a.w * a.h * a.b)
        .with_context(|| format!("decoding {}", a.raw.display()))?;
    let labels = match &a.labels {
        Some(path) => {
            let v = convert::decode(&convert::read(path)?, a.label_dtype, a.big_endian, a.w * a.h)
                .with_context(|| format!("decoding {}", path.display()))?;
            Some(convert::labels_to_rows(&v, &layout)?)
        }
        None => None,
    };
    let cube = HsiCube::new(a.w, a.h, a.b, convert::to_bip(&values, &layout), labels)?;
    cube.save(&a.out)?;
    println!(
        "wrote {} ({}x{}x{}, {} labeled pixels)",
        a.out.display(),
        a.w,
        a.h,
        a.b,
        cube.masked_pixels().len()
    );
    Ok(())
}

/// Invalid configuration values are usage errors; everything else that goes
/// wrong after parsing is a runtime failure.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<hsc_core::Error>() {
        Some(hsc_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Cluster(a) => cluster(a),
        Command::Eval(a) => eval(a),
        Command::Convert(a) => convert_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
