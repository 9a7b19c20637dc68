//! Training loop, validation, evaluation and prediction.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::data::{
    center_crop, load_manifest, random_crop, rgb_to_tensor, stack, CropSpec, GrayImage, RgbImage,
    Sample,
};
use crate::error::{Error, Result};
use crate::loss::{composite_loss, iou_discrete, mask_to_image, threshold_mask, DEFAULT_THRESHOLD};
use crate::model::{
    build_ternausnet, init_params, load_weights, save_weights, InitScheme, ParamStore, TernausNet,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::{Tensor4, Shape};

pub const CURVE_FILE: &str = "curve.csv";
pub const WEIGHTS_FILE: &str = "weights.tnwt";
pub const CURVE_HEADER: &str = "epoch,train_loss,val_loss,val_iou,seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub crop: CropSpec,
    pub init: InitScheme,
    pub threshold: f64,
    pub out_dir: PathBuf,
    /// Single-threaded kernels and a zero `seconds` column, so two runs
    /// with the same seed write byte-identical curves.
    pub deterministic: bool,
}

impl RunConfig {
    /// Defaults for everything but the data and output locations.
    pub fn new(train_manifest: impl Into<PathBuf>, val_manifest: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            train_manifest: train_manifest.into(),
            val_manifest: val_manifest.into(),
            epochs: 40,
            batch_size: 4,
            lr: 1e-3,
            seed: 1,
            crop: CropSpec::default(),
            init: InitScheme::Lecun,
            threshold: DEFAULT_THRESHOLD,
            out_dir: out_dir.into(),
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        self.crop.validate()?;
        for (what, p) in [("train manifest", &self.train_manifest), ("validation manifest", &self.val_manifest)] {
            if !p.is_file() {
                return bad(format!("{what} {} does not exist", p.display()));
            }
        }
        if let InitScheme::EncoderPretrained(p) | InitScheme::FullPretrained(p) = &self.init {
            if !p.is_file() {
                return bad(format!("weight file {} does not exist", p.display()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_iou: f64,
    pub seconds: f64,
}

impl EpochRecord {
    /// One `curve.csv` line, without the newline.
    pub fn csv_row(&self, deterministic: bool) -> String {
        let secs = if deterministic { 0.0 } else { self.seconds };
        format!(
            "{},{:.6},{:.6},{:.6},{:.3}",
            self.epoch, self.train_loss, self.val_loss, self.val_iou, secs
        )
    }
}

/// Reads a `curve.csv` back.
pub fn parse_curve(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(Error::InvalidArgument(format!("curve must start with `{CURVE_HEADER}`")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::InvalidArgument(format!("curve row {}: `{line}`", i + 1));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(f[1])?,
                val_loss: num(f[2])?,
                val_iou: num(f[3])?,
                seconds: num(f[4])?,
            })
        })
        .collect()
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub params: ParamStore<f32>,
    pub curve_path: PathBuf,
    pub weights_path: PathBuf,
}

/// Mean composite loss and discrete IoU over a set of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub threshold: f64,
    pub per_image_iou: Vec<f64>,
    pub per_image_loss: Vec<f64>,
    pub mean_iou: f64,
    pub mean_loss: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn single(t: &Tensor4<f32>, i: usize) -> Tensor4<f32> {
    let s = t.shape();
    Tensor4::from_vec(Shape::new(1, s.c, s.h, s.w), t.sample(i).to_vec()).expect("one sample")
}

/// Probability maps for `samples`, run `batch` at a time.
pub fn predict_probs(net: &TernausNet<f32>, samples: &[Sample], batch: usize) -> Result<Vec<Tensor4<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let same_size = chunk
            .iter()
            .all(|s| (s.height(), s.width()) == (chunk[0].height(), chunk[0].width()));
        if same_size {
            let (x, _) = stack(chunk)?;
            let p = net.forward(&x)?;
            out.extend((0..chunk.len()).map(|i| single(&p, i)));
        } else {
            for s in chunk {
                out.push(net.forward(&s.image)?);
            }
        }
    }
    Ok(out)
}

/// Evaluates whole samples (no cropping).
pub fn evaluate(net: &TernausNet<f32>, samples: &[Sample], threshold: f64, batch: usize) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    let probs = predict_probs(net, samples, batch)?;
    let mut per_image_iou = Vec::with_capacity(samples.len());
    let mut per_image_loss = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&probs) {
        let pred = threshold_mask(p, threshold)?;
        per_image_iou.push(iou_discrete(&pred, &s.mask)?);
        per_image_loss.push(composite_loss(s.mask.tensor(), p)?.0.l);
    }
    Ok(EvalReport {
        threshold,
        mean_iou: mean(&per_image_iou),
        mean_loss: mean(&per_image_loss),
        per_image_iou,
        per_image_loss,
    })
}

/// Thresholds `0.1, 0.2, …, 0.9` used by [`threshold_sweep`].
pub fn sweep_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

/// Mean IoU at each of the sweep thresholds.
pub fn threshold_sweep(net: &TernausNet<f32>, samples: &[Sample], batch: usize) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty sample set".into()));
    }
    let probs = predict_probs(net, samples, batch)?;
    sweep_thresholds()
        .into_iter()
        .map(|t| {
            let ious = samples
                .iter()
                .zip(&probs)
                .map(|(s, p)| iou_discrete(&threshold_mask(p, t)?, &s.mask))
                .collect::<Result<Vec<f64>>>()?;
            Ok((t, mean(&ious)))
        })
        .collect()
}

/// Binary 0/255 mask for one RGB image.
pub fn predict_mask(net: &TernausNet<f32>, image: &RgbImage, threshold: f64) -> Result<GrayImage> {
    let p = net.forward(&rgb_to_tensor(image))?;
    mask_to_image(&threshold_mask(&p, threshold)?)
}

/// Rebuilds a network from a weight file, checking it matches the
/// architecture exactly.
pub fn load_network(path: impl AsRef<Path>) -> Result<TernausNet<f32>> {
    TernausNet::new(build_ternausnet(), load_weights(path)?)
}

/// Centre-crops validation samples once, up front.
fn crop_validation(samples: &[Sample], side: usize) -> Result<Vec<Sample>> {
    samples.iter().map(|s| center_crop(s, side)).collect()
}

/// Runs the training loop on in-memory data, calling `on_epoch` after each
/// epoch's validation.
pub fn train_samples(
    cfg: &RunConfig,
    train: &[Sample],
    val: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord, &TernausNet<f32>) -> Result<()>,
) -> Result<(TernausNet<f32>, Vec<EpochRecord>)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must both be non-empty".into(),
        ));
    }
    let val = crop_validation(val, cfg.crop.val)?;
    let mut root = Rng::new(cfg.seed);
    let mut init_rng = root.fork(0);
    let mut shuffle_rng = root.fork(1);
    let mut crop_rng = root.fork(2);

    let arch = build_ternausnet();
    let params = init_params(&arch, &cfg.init, &mut init_rng)?;
    let mut net = TernausNet::new(arch, params)?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(net.params(), adam);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let crops = batch
                .iter()
                .map(|&i| random_crop(&train[i], cfg.crop.train, &mut crop_rng))
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = stack(&crops)?;
            let (p, tape) = net.forward_with_tape(&x)?;
            let (loss, grad) = composite_loss(&y, &p)?;
            if !loss.l.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
            }
            net.params_mut().zero_grads();
            net.backward(&tape, &grad)?;
            adam_step(net.params_mut(), &mut state)?;
            loss_sum += loss.l * crops.len() as f64;
            seen += crops.len();
        }
        let report = evaluate(&net, &val, cfg.threshold, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_loss: report.mean_loss,
            val_iou: report.mean_iou,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}/{}: train_loss={:.4} val_loss={:.4} val_iou={:.4} ({:.1}s)",
            cfg.epochs, record.train_loss, record.val_loss, record.val_iou, record.seconds
        );
        on_epoch(&record, &net)?;
        records.push(record);
    }
    Ok((net, records))
}

/// Full run: validates the config, loads both manifests, trains, and writes
/// `curve.csv` (one row per epoch, flushed as it goes) and `weights.tnwt`
/// into the output directory.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.deterministic && !parallel::is_deterministic() && !parallel::init(1) {
        warn!(
            "kernel thread pool already running with {} threads; results stay reproducible because reductions run in sample order",
            parallel::threads()
        );
    }
    let train_set = load_manifest(&cfg.train_manifest)?.load_samples()?;
    let val_set = load_manifest(&cfg.val_manifest)?.load_samples()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let curve_path = cfg.out_dir.join(CURVE_FILE);
    let weights_path = cfg.out_dir.join(WEIGHTS_FILE);
    let file = File::create(&curve_path).map_err(|e| Error::io(&curve_path, e))?;
    let mut curve = BufWriter::new(file);
    let io_err = |e| Error::io(&curve_path, e);
    writeln!(curve, "{CURVE_HEADER}").map_err(io_err)?;

    let (net, records) = train_samples(cfg, &train_set, &val_set, |r, _| {
        writeln!(curve, "{}", r.csv_row(cfg.deterministic)).map_err(io_err)?;
        curve.flush().map_err(io_err)
    })?;
    save_weights(net.params(), &weights_path)?;
    Ok(TrainOutcome {
        records,
        params: net.into_params(),
        curve_path,
        weights_path,
    })
}
