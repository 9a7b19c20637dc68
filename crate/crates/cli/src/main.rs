use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use ternaus_core::data::{
    center_crop, load_manifest, read_ppm, synth_generate, write_pgm, CropSpec, Domain, Sample,
};
use ternaus_core::gradcheck::{
    run_suite, GradcheckOptions, DEFAULT_NETWORK_TOL, DEFAULT_STEP, DEFAULT_TOL,
};
use ternaus_core::loss::DEFAULT_THRESHOLD;
use ternaus_core::model::InitScheme;
use ternaus_core::parallel;
use ternaus_core::rng::Rng;
use ternaus_core::train::{evaluate, load_network, predict_mask, threshold_sweep, train, RunConfig};

/// TernausNet segmentation: synthetic data, training, evaluation and
/// prediction.
#[derive(Parser, Debug)]
#[command(name = "ternaus", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth(SynthArgs),
    /// Train a network and write curve.csv and weights.tnwt.
    Train(TrainArgs),
    /// Report per-image and mean IoU of a weight file on a manifest.
    Eval(EvalArgs),
    /// Write a 0/255 PGM mask for one PPM image.
    Predict(PredictArgs),
    /// Compare every backward pass against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// A (ellipses) or B (rectangles).
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    count: usize,
    /// Image side in pixels; a multiple of 32.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training manifest.
    #[arg(long)]
    train: PathBuf,
    /// Validation manifest.
    #[arg(long)]
    val: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Side of the random training crops.
    #[arg(long, default_value_t = 64)]
    crop: usize,
    /// Side of the central validation crops.
    #[arg(long, default_value_t = 64)]
    val_crop: usize,
    /// lecun, encoder:PATH or full:PATH.
    #[arg(long, default_value = "lecun")]
    init: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Single-threaded kernels; curve.csv is byte-identical across runs.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Also report mean IoU at thresholds 0.1, 0.2, …, 0.9.
    #[arg(long)]
    sweep: bool,
    /// Centre-crop every sample to this side first.
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Also write the report as CSV here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Binary PPM (P6) input.
    #[arg(long)]
    image: PathBuf,
    /// PGM (P5) mask to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Run only this op (conv2d, convtranspose2, maxpool2, relu, sigmoid,
    /// concat, network).
    #[arg(long)]
    op: Option<String>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    /// Tolerance of the whole-network check.
    #[arg(long, default_value_t = DEFAULT_NETWORK_TOL)]
    net_tol: f64,
    #[arg(long, default_value_t = DEFAULT_STEP)]
    step: f64,
    #[arg(long, default_value_t = GradcheckOptions::default().seed)]
    seed: u64,
    /// Harness self-test: corrupt each analytic gradient slightly.
    #[arg(long, hide = true)]
    perturb_backward: bool,
}

/// Failure classes, mapped to the process exit code.
enum Failure {
    /// Bad flags or configuration (exit 1).
    Usage(anyhow::Error),
    /// I/O, data or runtime error (exit 2).
    Runtime(anyhow::Error),
    /// A check ran and did not pass (exit 3).
    Check(String),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ternaus_core::Error> for Failure {
    fn from(e: ternaus_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn check_threshold(t: f64) -> Result<(), Failure> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(usage(anyhow!("threshold must lie in (0, 1), got {t}")))
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let m = synth_generate(a.domain, a.count, a.size, &mut Rng::new(a.seed), &a.out)?;
    println!("wrote {} domain-{} samples to {}", m.len(), a.domain, a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let init: InitScheme = a.init.parse().map_err(usage)?;
    let cfg = RunConfig {
        train_manifest: a.train,
        val_manifest: a.val,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        seed: a.seed,
        crop: CropSpec {
            train: a.crop,
            val: a.val_crop,
        },
        init,
        threshold: a.threshold,
        out_dir: a.out,
        deterministic: a.deterministic,
    };
    cfg.validate().map_err(usage)?;
    if cfg.deterministic {
        parallel::init(1);
    }
    info!("training with {} kernel thread(s), init {}", parallel::threads(), cfg.init);
    let out = train(&cfg)?;
    let last = out.records.last().expect("at least one epoch");
    println!(
        "final val_iou={:.4} after {} epochs; wrote {} and {}",
        last.val_iou,
        last.epoch,
        out.curve_path.display(),
        out.weights_path.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    check_threshold(a.threshold)?;
    let net = load_network(&a.weights)?;
    let manifest = load_manifest(&a.manifest)?;
    if manifest.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "manifest {} lists no samples",
            a.manifest.display()
        )));
    }
    let mut samples = manifest.load_samples()?;
    if let Some(side) = a.crop {
        samples = samples
            .iter()
            .map(|s| center_crop(s, side))
            .collect::<Result<Vec<Sample>, _>>()?;
    }
    let report = evaluate(&net, &samples, a.threshold, a.batch_size)?;

    let mut csv = String::from("image,iou\n");
    for (entry, iou) in manifest.entries.iter().zip(&report.per_image_iou) {
        println!("{}\t{iou:.6}", entry.image.display());
        writeln!(csv, "{},{iou:.6}", entry.image.display()).unwrap();
    }
    println!("mean_iou\t{:.6}\t(threshold {})", report.mean_iou, a.threshold);
    writeln!(csv, "mean,{:.6}", report.mean_iou).unwrap();

    if a.sweep {
        println!("threshold\tmean_iou");
        writeln!(csv, "threshold,mean_iou").unwrap();
        for (t, iou) in threshold_sweep(&net, &samples, a.batch_size)? {
            println!("{t:.1}\t{iou:.6}");
            writeln!(csv, "{t:.1},{iou:.6}").unwrap();
        }
    }
    if let Some(path) = a.report {
        fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), Failure> {
    check_threshold(a.threshold)?;
    let net = load_network(&a.weights)?;
    let image = read_ppm(&a.image)?;
    let mask = predict_mask(&net, &image, a.threshold)?;
    write_pgm(&mask, &a.out)?;
    println!("wrote {}×{} mask to {}", mask.width(), mask.height(), a.out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let opts = GradcheckOptions {
        step: a.step,
        tol: a.tol,
        network_tol: a.net_tol,
        seed: a.seed,
        perturb_backward: a.perturb_backward,
    };
    let reports = run_suite(a.op.as_deref(), &opts).map_err(usage)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{r}");
        if !r.passed() {
            failed.push(r.op.clone());
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
    }
}
