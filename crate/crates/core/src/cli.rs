//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 contract violation. Every
//! command writes a JSON run manifest (`--run-manifest`, default
//! `<command>.run.json`) with its flags, seed, per-stage timings and the
//! files it produced.
//!
//! CSV headers:
//!
//! ```text
//! eval     name,psnr_db,ssim            (last row: mean)
//! train    step,epoch,lr,loss
//! bench    variant,width,height,iters,warmup,threads,mean_ms,median_ms,fps,macs,fixed_filter_macs,params,reference_params
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::bgnet::PoolingMode;
use crate::error::{Error, Result};
use crate::io::{random_image, read_image, read_manifest, write_image};
use crate::metrics::{correction_heatmap, psnr, ssim};
use crate::model::{flop_count, ModelConfig, ModelParams, Variant, MSLT_REFERENCE_MFLOPS};
use crate::pyramid::decompose_fixed;
use crate::tensor::Tensor;
use crate::training::{fit_with, HistoryRecord, SamplePair, TrainConfig};
use crate::weights::{load_weights_for, save_weights};

/// Token accepted by `--weights` for the built-in identity parameters.
pub const IDENTITY_WEIGHTS: &str = "identity";

#[derive(Debug, Parser)]
#[command(name = "mslt", version, about = "Multi-scale linear transformation exposure correction")]
pub struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Where to write the JSON run manifest.
    #[arg(long, global = true)]
    pub run_manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Correct one image.
    Correct(CorrectArgs),
    /// Train on a manifest of input/target pairs.
    Train(TrainArgs),
    /// Time the forward pass on a random image.
    Bench(BenchArgs),
    /// Score corrected inputs against targets.
    Eval(EvalArgs),
    /// Render the lightness change between two images.
    Heatmap(HeatmapArgs),
    /// Write the Laplacian pyramid layers of an image.
    Decompose(DecomposeArgs),
}

#[derive(Debug, Args)]
pub struct CorrectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// MSLTW weight file, or `identity`.
    #[arg(long)]
    pub weights: String,
    #[arg(long, default_value = "mslt")]
    pub variant: Variant,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_weights: PathBuf,
    #[arg(long, default_value = "mslt")]
    pub variant: Variant,
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Pyramid depth.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=5))]
    pub levels: u8,
    /// Number of feature decomposition stages.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=5))]
    pub cfd_count: u8,
    /// Pooling statistic: gap, gsp or gap+gsp.
    #[arg(long, default_value = "gap+gsp")]
    pub pooling: PoolingMode,
    /// One mask MLP per high-frequency level instead of a shared one.
    #[arg(long)]
    pub hf_unshared: bool,
    #[arg(long, default_value_t = 512)]
    pub crop: usize,
    #[arg(long, default_value_t = 30)]
    pub crops_per_image: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Loss history CSV; defaults to the weight path with `.loss.csv`.
    #[arg(long)]
    pub history_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value = "mslt")]
    pub variant: Variant,
    #[arg(long, default_value_t = 3840)]
    pub width: usize,
    #[arg(long, default_value_t = 2160)]
    pub height: usize,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the CSV row to this file.
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pairs_manifest: PathBuf,
    /// MSLTW weight file, or `identity`.
    #[arg(long)]
    pub weights: String,
    #[arg(long, default_value = "mslt")]
    pub variant: Variant,
    #[arg(long)]
    pub csv_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub corrected: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(2..=5))]
    pub levels: u8,
    #[arg(long)]
    pub out_dir: PathBuf,
}

/// Per-stage wall-clock time.
#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub stage: String,
    pub ms: f64,
}

/// Record of one command invocation.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub timings: Vec<Timing>,
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            ..Default::default()
        }
    }

    /// Runs `f`, recording its duration under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.timings.push(Timing {
            stage: stage.into(),
            ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| Error::io(format!("writing run manifest `{}`", path.display()), e))
    }
}

/// Identity parameters or a weight file checked against `variant`.
pub fn load_model(weights: &str, variant: Variant) -> Result<ModelParams> {
    if weights == IDENTITY_WEIGHTS {
        ModelParams::identity(variant, ModelConfig::default())
    } else {
        load_weights_for(weights, variant)
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(format!("writing `{}`", path.display()), io),
        other => Error::Contract(format!("csv `{}`: {other:?}", path.display())),
    }
}

fn write_csv<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing `{}`", path.display()), e))
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn cmd_correct(a: &CorrectArgs, run: &mut RunManifest) -> Result<()> {
    let mp = run.time("load_weights", || load_model(&a.weights, a.variant))?;
    let img = run.time("read", || read_image(&a.input))?;
    let t0 = Instant::now();
    let out = mp.infer(&img)?;
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    run.timings.push(Timing {
        stage: "forward".into(),
        ms,
    });
    run.time("write", || write_image(&a.output, &out))?;
    run.artifacts.push(a.output.clone());
    println!(
        "{} {}x{} -> {} in {ms:.2} ms",
        a.variant,
        img.width(),
        img.height(),
        a.output.display()
    );
    Ok(())
}

pub fn read_pairs(manifest: &Path) -> Result<Vec<SamplePair>> {
    read_manifest(manifest)?
        .into_par_iter()
        .map(|(i, t)| SamplePair::new(file_stem(&i), read_image(&i)?, read_image(&t)?))
        .collect()
}

pub fn cmd_train(a: &TrainArgs, run: &mut RunManifest) -> Result<()> {
    let config = ModelConfig {
        levels: a.levels as usize,
        cfd_count: a.cfd_count as usize,
        pooling: a.pooling,
        hf_shared: !a.hf_unshared,
    };
    let cfg = TrainConfig {
        lr_max: a.lr,
        batch_size: a.batch,
        crop: a.crop,
        crops_per_image: a.crops_per_image,
        epochs: a.epochs,
        seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    let data = run.time("read", || read_pairs(&a.manifest))?;
    if data.is_empty() {
        return Err(Error::Config(format!("manifest `{}` lists no pairs", a.manifest.display())));
    }
    let mp = ModelParams::init(a.variant, config, a.seed)?;
    let steps = cfg.steps_per_epoch(data.len()) * cfg.epochs;
    println!(
        "training {} ({} params) on {} pairs: {steps} steps",
        a.variant,
        mp.param_count(),
        data.len()
    );
    let every = (steps / 20).max(1);
    let fit = run.time("train", || {
        fit_with(&data, mp, None, &cfg, |r: &HistoryRecord| {
            if r.step % every == 0 || r.step + 1 == steps {
                println!("step {:>6}  epoch {:>3}  lr {:.3e}  loss {:.6}", r.step, r.epoch, r.lr, r.loss);
            }
        })
    })?;
    let history = a.history_csv.clone().unwrap_or_else(|| a.out_weights.with_extension("loss.csv"));
    let adam = with_suffix(&a.out_weights, ".adam");
    run.time("write", || -> Result<()> {
        save_weights(&fit.params, &a.out_weights)?;
        fit.adam.save(&adam)?;
        write_csv(
            &history,
            &["step", "epoch", "lr", "loss"],
            fit.history.iter().map(|r| (r.step, r.epoch, r.lr, r.loss)),
        )
    })?;
    run.artifacts.extend([a.out_weights.clone(), adam, history]);
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub variant: String,
    pub width: usize,
    pub height: usize,
    pub iters: usize,
    pub warmup: usize,
    pub threads: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub fps: f64,
    pub macs: u64,
    pub fixed_filter_macs: u64,
    pub params: usize,
    pub reference_params: usize,
}

pub const BENCH_HEADER: [&str; 13] = [
    "variant",
    "width",
    "height",
    "iters",
    "warmup",
    "threads",
    "mean_ms",
    "median_ms",
    "fps",
    "macs",
    "fixed_filter_macs",
    "params",
    "reference_params",
];

/// Times `iters` forward passes after `warmup` untimed ones. Only the
/// forward call is inside the measured region.
pub fn bench(variant: Variant, width: usize, height: usize, iters: usize, warmup: usize, seed: u64) -> Result<BenchReport> {
    if iters == 0 {
        return Err(Error::Config("--iters must be positive".into()));
    }
    let mp = ModelParams::init(variant, ModelConfig::default(), seed)?;
    let img = random_image(seed, height, width);
    for _ in 0..warmup {
        mp.infer(&img)?;
    }
    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t0 = Instant::now();
        let out = mp.infer(&img)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    let mean_ms = times.iter().sum::<f64>() / iters as f64;
    times.sort_by(f64::total_cmp);
    let median_ms = if iters % 2 == 1 {
        times[iters / 2]
    } else {
        0.5 * (times[iters / 2 - 1] + times[iters / 2])
    };
    let flops = flop_count(&mp, height, width);
    Ok(BenchReport {
        variant: variant.to_string(),
        width,
        height,
        iters,
        warmup,
        threads: rayon::current_num_threads(),
        mean_ms,
        median_ms,
        fps: 1e3 / mean_ms,
        macs: flops.total(),
        fixed_filter_macs: flops.fixed_filter,
        params: mp.param_count(),
        reference_params: variant.reference_params(),
    })
}

pub fn cmd_bench(a: &BenchArgs, run: &mut RunManifest) -> Result<()> {
    let r = run.time("bench", || bench(a.variant, a.width, a.height, a.iters, a.warmup, a.seed))?;
    let (ref_1k, ref_4k) = a.variant.reference_gflops();
    println!("variant      {}", r.variant);
    println!("size         {}x{}", r.width, r.height);
    println!("threads      {}", r.threads);
    println!("iterations   {} (+{} warmup)", r.iters, r.warmup);
    println!("mean         {:.3} ms/frame", r.mean_ms);
    println!("median       {:.3} ms/frame", r.median_ms);
    println!("throughput   {:.2} frames/s", r.fps);
    println!("MACs         {:.2}M", r.macs as f64 / 1e6);
    if r.fixed_filter_macs > 0 {
        println!("fixed filter {:.2}M (not counted)", r.fixed_filter_macs as f64 / 1e6);
    }
    match (r.width, r.height) {
        (1024, 1024) if a.variant == Variant::Mslt => {
            println!("reference    {MSLT_REFERENCE_MFLOPS:.2}M")
        }
        (1024, 1024) => println!("reference    {ref_1k:.2}G"),
        (3840, 2160) => println!("reference    {ref_4k:.2}G"),
        _ => {}
    }
    println!("params       {} (reference {})", r.params, r.reference_params);
    if r.params != r.reference_params {
        let note = format!(
            "counted {} parameters vs reference {} for {}: the grid predictor and mask internals are not fully published",
            r.params, r.reference_params, r.variant
        );
        run.notes.push(note);
    }
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.serialize(&r).map_err(|e| Error::Contract(e.to_string()))?;
    w.flush()?;
    if let Some(p) = &a.csv_out {
        write_csv(p, &BENCH_HEADER, [&r])?;
        run.artifacts.push(p.clone());
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Corrects each input, quantizes to 8 bits as `correct` would write it, and
/// scores against the target. Rows keep manifest order.
pub fn evaluate(pairs: &[SamplePair], mp: &ModelParams) -> Result<Vec<EvalRow>> {
    pairs
        .par_iter()
        .map(|p| {
            let out = mp.infer(&p.input)?.map(|v| crate::io::quantize(v) as f32 / 255.0);
            Ok(EvalRow {
                name: p.name.clone(),
                psnr_db: psnr(&out, &p.target)?,
                ssim: ssim(&out, &p.target)?,
            })
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs, run: &mut RunManifest) -> Result<()> {
    let mp = run.time("load_weights", || load_model(&a.weights, a.variant))?;
    let pairs = run.time("read", || read_pairs(&a.pairs_manifest))?;
    let rows = run.time("score", || evaluate(&pairs, &mp))?;
    let n = rows.len().max(1) as f64;
    let mean = EvalRow {
        name: "mean".into(),
        psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    };
    for r in rows.iter().chain([&mean]) {
        println!("{:<24} {:>8.3} dB  ssim {:.4}", r.name, r.psnr_db, r.ssim);
    }
    write_csv(&a.csv_out, &["name", "psnr_db", "ssim"], rows.iter().chain([&mean]))?;
    run.artifacts.push(a.csv_out.clone());
    Ok(())
}

pub fn cmd_heatmap(a: &HeatmapArgs, run: &mut RunManifest) -> Result<()> {
    let (i, o) = run.time("read", || Ok::<_, Error>((read_image(&a.input)?, read_image(&a.corrected)?)))?;
    let hm = run.time("heatmap", || correction_heatmap(&i, &o))?;
    run.time("write", || write_image(&a.out, &hm.render()))?;
    run.artifacts.push(a.out.clone());
    println!("r_max {:.4} -> {}", hm.r_max, a.out.display());
    Ok(())
}

/// High layers are written offset by +0.5 so negative values stay visible.
pub fn cmd_decompose(a: &DecomposeArgs, run: &mut RunManifest) -> Result<()> {
    let img = run.time("read", || read_image(&a.input))?;
    let p = run.time("decompose", || decompose_fixed(&img, a.levels as usize))?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(format!("creating `{}`", a.out_dir.display()), e))?;
    let mut layers: Vec<(String, Tensor)> = p
        .highs
        .iter()
        .enumerate()
        .map(|(i, h)| (format!("h{}.png", i + 1), h.map(|v| v + 0.5)))
        .collect();
    layers.push((format!("l{}.png", p.levels()), p.low.clone()));
    run.time("write", || -> Result<()> {
        for (name, t) in &layers {
            write_image(a.out_dir.join(name), t)?;
        }
        Ok(())
    })?;
    for (name, t) in &layers {
        println!("{name:<8} {}x{}", t.width(), t.height());
        run.artifacts.push(a.out_dir.join(name));
    }
    Ok(())
}

fn snapshot(cli: &Cli) -> (&'static str, serde_json::Value, Option<u64>) {
    let dbg = |v: &dyn std::fmt::Debug| serde_json::Value::String(format!("{v:?}"));
    match &cli.command {
        Command::Correct(a) => ("correct", dbg(a), None),
        Command::Train(a) => ("train", dbg(a), Some(a.seed)),
        Command::Bench(a) => ("bench", dbg(a), Some(a.seed)),
        Command::Eval(a) => ("eval", dbg(a), None),
        Command::Heatmap(a) => ("heatmap", dbg(a), None),
        Command::Decompose(a) => ("decompose", dbg(a), None),
    }
}

/// Runs a parsed command line inside a pool of `--threads` workers.
pub fn run(cli: &Cli) -> Result<RunManifest> {
    let (name, config, seed) = snapshot(cli);
    let mut run = RunManifest::new(name, config, seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Correct(a) => cmd_correct(a, &mut run),
        Command::Train(a) => cmd_train(a, &mut run),
        Command::Bench(a) => cmd_bench(a, &mut run),
        Command::Eval(a) => cmd_eval(a, &mut run),
        Command::Heatmap(a) => cmd_heatmap(a, &mut run),
        Command::Decompose(a) => cmd_decompose(a, &mut run),
    })?;
    let path = cli.run_manifest.clone().unwrap_or_else(|| PathBuf::from(format!("{name}.run.json")));
    run.write(&path)?;
    Ok(run)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
