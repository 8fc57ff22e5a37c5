//! The subcommands, as library functions returning their stdout text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use cxhg::autodiff::IGNORE_INDEX;
use cxhg::data::{extract_patches, generate_dataset, patch_grid, read_dataset, split, LabelMap, RasterImage, Sample, SceneSpec};
use cxhg::hourglass::{predict_labels, Model};
use cxhg::train::{evaluate, iterations_per_epoch, resume_phase, Adam, Checkpoint, Event, TrainingReport};
use cxhg::verify::{self, Suite, VerifyReport};
use cxhg::{Error, Result};

use crate::config::RunConfig;
use crate::ppm;

pub const PHASE1_CHECKPOINT: &str = "phase1.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
/// The resolved configuration, written next to the checkpoints.
pub const RUN_CONFIG: &str = "config.txt";

#[derive(Clone, Debug, Default)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub tiles: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub config: Option<PathBuf>,
    pub channels: Option<usize>,
    pub noise: Option<f64>,
    pub rare_rate: Option<f64>,
}

/// Writes the dataset and returns the per-class census as CSV.
pub fn gen_data(args: &GenDataArgs) -> Result<String> {
    let mut scene = match &args.config {
        Some(p) => RunConfig::load(p)?.scene_spec(),
        None => SceneSpec::default(),
    };
    scene.width = args.width;
    scene.height = args.height;
    if let Some(c) = args.channels {
        scene.channels = c;
    }
    if let Some(n) = args.noise {
        scene.noise_sigma = n;
    }
    if let Some(r) = args.rare_rate {
        scene.rare_class_rate = r;
    }
    let counts = generate_dataset(&args.out, &scene, args.tiles, args.seed)?;
    let total: u64 = counts.iter().sum();
    let mut out = String::from("class,pixels,fraction\n");
    for (c, n) in counts.iter().enumerate() {
        writeln!(out, "{c},{n},{:.6}", *n as f64 / total as f64).unwrap();
    }
    Ok(out)
}

/// Every patch of every tile in `dir`, in manifest and row-major order.
pub fn load_patches(dir: &Path, cfg: &RunConfig) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for (img, labels) in read_dataset(dir)? {
        if img.channels != cfg.model.input_channels {
            return Err(Error::Data(format!(
                "dataset has {} channels but channels = {}",
                img.channels, cfg.model.input_channels
            )));
        }
        labels.check_classes(cfg.model.num_classes)?;
        samples.extend(extract_patches(&img, &labels, cfg.model.patch_size)?);
    }
    Ok(samples)
}

fn dataset_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset_dir
        .as_deref()
        .ok_or_else(|| Error::Config("dataset_dir: required for training".into()))
}

/// Where a run continues: the phase (1 or 2) and the epochs already done
/// in it.
fn resume_point(step: u64, per_epoch: usize, epochs1: usize, epochs2: usize) -> Result<(u8, usize)> {
    let step = step as usize;
    if step % per_epoch != 0 {
        return Err(Error::Config(format!(
            "checkpoint step {step} is not at an epoch boundary ({per_epoch} iterations per epoch)"
        )));
    }
    let epoch = step / per_epoch;
    if epoch > epochs1 + epochs2 {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {epoch}, past the configured {} epochs",
            epochs1 + epochs2
        )));
    }
    Ok(if epoch < epochs1 { (1, epoch) } else { (2, epoch - epochs1) })
}

pub struct TrainOutcome {
    pub report: TrainingReport,
    pub final_checkpoint: PathBuf,
}

/// Two-phase training into `out`. Progress goes to `progress`, one line per
/// epoch.
pub fn train(config: &Path, out: &Path, resume: Option<&Path>, progress: &mut dyn FnMut(&str)) -> Result<TrainOutcome> {
    let cfg = RunConfig::load(config)?;
    let samples = load_patches(dataset_dir(&cfg)?, &cfg)?;
    let (train, val) = split(samples, cfg.split, cfg.split_seed)?;
    let tc = &cfg.train;
    let per_epoch = iterations_per_epoch(train.len(), tc.batch_size)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(RUN_CONFIG);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;

    let mut model = Model::<f32>::build(&cfg.model, cfg.init_seed)?;
    let mut adam = Adam::new(&model.params);
    let (mut phase, mut done) = (1, 0);
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        ck.restore(&mut model, Some(&mut adam))?;
        (phase, done) = resume_point(ck.step, per_epoch, tc.epochs_phase1, tc.epochs_phase2)?;
        progress(&format!("resuming phase {phase} after {done} epochs from {}", path.display()));
    }

    let mut report = TrainingReport::default();
    let mut on_event = |e: Event| {
        if let Event::Epoch(r) = e {
            progress(&format!(
                "phase {} epoch {}: val pixacc {:.4} miou {:.4}",
                r.phase, r.epoch, r.val_pixacc, r.val_miou
            ))
        }
    };
    let p1_iters = (per_epoch * tc.epochs_phase1) as u64;
    if phase == 1 {
        let p1 = tc.phase1();
        adam = resume_phase(&mut model, &train, &val, tc, p1, done..p1.epochs, adam, &mut report, &mut on_event)?;
        Checkpoint::capture(&model, Some(&adam), p1_iters, true).save(&out.join(PHASE1_CHECKPOINT))?;
        (phase, done) = (2, 0);
    }
    if phase == 2 && done == 0 {
        adam = Adam::new(&model.params);
    }
    let p2 = tc.phase2();
    adam = resume_phase(&mut model, &train, &val, tc, p2, done..p2.epochs, adam, &mut report, &mut on_event)?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    let total = p1_iters + (per_epoch * tc.epochs_phase2) as u64;
    Checkpoint::capture(&model, Some(&adam), total, true).save(&final_checkpoint)?;
    let log = out.join(TRAIN_LOG);
    fs::write(&log, report.to_csv()).map_err(|e| Error::io(&log, e))?;
    Ok(TrainOutcome { report, final_checkpoint })
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Model<f32>> {
    let mut model = Model::<f32>::build(&cfg.model, cfg.init_seed)?;
    Checkpoint::load(ckpt)?.restore(&mut model, None)?;
    Ok(model)
}

/// Metrics CSV over every patch of the dataset in `data`.
pub fn eval(config: &Path, ckpt: &Path, data: &Path, encoding: bool) -> Result<String> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(&cfg, ckpt)?;
    let samples = load_patches(data, &cfg)?;
    evaluate(&model, &samples, encoding, cfg.train.batch_size)?.report_csv()
}

/// Patch index and position inside it of tile pixel `(x, y)`, for a tile
/// `width` pixels wide cut into `patch`-sized squares in row-major order.
pub fn patch_of(x: usize, y: usize, width: usize, patch: usize) -> (usize, usize, usize) {
    let (cols, _) = patch_grid(width, 1, patch);
    ((y / patch) * cols + x / patch, x % patch, y % patch)
}

/// Reassembles per-patch label maps into a `width × height` map, dropping
/// the padding.
pub fn stitch(patches: &[Vec<u8>], width: usize, height: usize, patch: usize) -> Vec<u8> {
    let mut out = vec![IGNORE_INDEX; width * height];
    for y in 0..height {
        for x in 0..width {
            let (p, lx, ly) = patch_of(x, y, width, patch);
            out[y * width + x] = patches[p][ly * patch + lx];
        }
    }
    out
}

/// Predicted label map of a whole tile.
pub fn predict_tile(model: &Model<f32>, img: &RasterImage, encoding: bool, batch: usize) -> Result<Vec<u8>> {
    let cfg = model.config();
    if img.channels != cfg.input_channels {
        return Err(Error::Data(format!(
            "tile has {} channels but the model expects {}",
            img.channels, cfg.input_channels
        )));
    }
    let p = cfg.patch_size;
    let blank = LabelMap::new(img.width, img.height, vec![IGNORE_INDEX; img.width * img.height])?;
    let samples = extract_patches(img, &blank, p)?;
    let mut per_patch = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = cxhg::data::make_batch::<f32>(&refs)?;
        let labels = predict_labels(&model.predict(&images, encoding)?.fused_logits)?;
        per_patch.extend(labels.chunks(p * p).map(<[u8]>::to_vec));
    }
    Ok(stitch(&per_patch, img.width, img.height, p))
}

pub fn predict(config: &Path, ckpt: &Path, input: &Path, out: &Path, encoding: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let model = load_model(&cfg, ckpt)?;
    let img = RasterImage::read(input)?;
    let labels = predict_tile(&model, &img, encoding, cfg.train.batch_size)?;
    ppm::write(out, img.width, img.height, &labels)
}

pub fn verify(suite: Suite) -> VerifyReport {
    verify::run(suite)
}

/// Process exit status for an error: 3 for numerical failures, 2 for
/// everything else.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss(_) | Error::NonFiniteGradient(_) | Error::NonFinite { .. } => 3,
        _ => 2,
    }
}
