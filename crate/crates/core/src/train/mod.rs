//! Loss assembly, optimization, the two-phase training protocol, and
//! checkpoints.

mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::ops::Range;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use optim::{poly_lr, Adam, LrSchedule};

use crate::autodiff::{Record, Var};
use crate::data::{augment, make_batch, Sample};
use crate::encoding::presence_targets;
use crate::error::{Error, Result};
use crate::hourglass::{predict_labels, ForwardOptions, Model, NetworkOutput};
use crate::metrics::ConfusionMatrix;
use crate::params::{Mode, ParamGroup};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of each presence (BCE) term.
    pub se_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { se_weight: 0.2 }
    }
}

/// Loss graph of one batch.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// One cross-entropy term per module.
    pub ce_terms: Vec<Var>,
    /// One presence term per encoding layer; empty when the weight is 0 or
    /// the encoding layers were bypassed.
    pub se_terms: Vec<Var>,
}

impl LossTerms {
    pub fn ce_sum<T: Real>(&self, rec: &Record<T>) -> f64 {
        self.ce_terms.iter().map(|&v| rec.value(v).item().as_f64()).sum()
    }

    pub fn se_sum<T: Real>(&self, rec: &Record<T>) -> f64 {
        self.se_terms.iter().map(|&v| rec.value(v).item().as_f64()).sum()
    }
}

/// `Σ_m CE(prediction_m) + λ Σ_j BCE(presence_j, targets)`. The fused
/// output gets no separate term.
pub fn total_loss<T: Real>(
    rec: &mut Record<T>,
    out: &NetworkOutput,
    labels: &[u8],
    num_classes: usize,
    weights: LossWeights,
) -> Result<LossTerms> {
    let mut ce_terms = Vec::with_capacity(out.per_module_logits.len());
    for &logits in &out.per_module_logits {
        ce_terms.push(rec.cross_entropy(logits, labels)?);
    }
    let mut total = ce_terms[0];
    for &t in &ce_terms[1..] {
        total = rec.add(total, t)?;
    }
    let mut se_terms = Vec::new();
    if weights.se_weight != 0.0 && !out.se_probs.is_empty() {
        let batch = rec.shape(out.se_probs[0])[0];
        let targets = presence_targets::<f64>(labels, batch, num_classes)?.into_values();
        for &p in &out.se_probs {
            se_terms.push(rec.binary_cross_entropy(p, &targets)?);
        }
        let mut se = se_terms[0];
        for &t in &se_terms[1..] {
            se = rec.add(se, t)?;
        }
        let weighted = rec.scale(se, weights.se_weight);
        total = rec.add(total, weighted)?;
    }
    Ok(LossTerms {
        total,
        ce_terms,
        se_terms,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    pub batch_size: usize,
    /// Split each batch into micro-batches of this size and accumulate
    /// gradients (batch statistics are then per micro-batch).
    pub micro_batch: Option<usize>,
    pub base_lr: f64,
    pub power: f64,
    pub loss: LossWeights,
    pub seed: u64,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 20,
            epochs_phase2: 20,
            batch_size: 16,
            micro_batch: None,
            base_lr: 1e-4,
            power: 0.95,
            loss: LossWeights::default(),
            seed: 0,
            augment: true,
        }
    }
}

/// One training phase. Phase numbering is only used for reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub number: u8,
    /// Encoding layers active (and their parameters trainable).
    pub encoding: bool,
    pub epochs: usize,
    /// Global index of the phase's first epoch (seeds the shuffles).
    pub first_epoch: usize,
}

impl TrainConfig {
    pub fn phase1(&self) -> Phase {
        Phase {
            number: 1,
            encoding: false,
            epochs: self.epochs_phase1,
            first_epoch: 0,
        }
    }

    pub fn phase2(&self) -> Phase {
        Phase {
            number: 2,
            encoding: true,
            epochs: self.epochs_phase2,
            first_epoch: self.epochs_phase1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_se: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub val_pixacc: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub iterations: Vec<IterRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingReport {
    /// Iteration rows, each epoch's validation row after its last
    /// iteration.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,epoch,phase,lr,loss_total,loss_ce,loss_se,val_pixacc,val_miou\n");
        let mut epochs = self.epochs.iter().peekable();
        for (i, r) in self.iterations.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{},{},,",
                r.iter, r.epoch, r.phase, r.lr, r.loss_total, r.loss_ce, r.loss_se
            )
            .unwrap();
            let epoch_done = self.iterations.get(i + 1).is_none_or(|n| n.epoch != r.epoch);
            while epoch_done && epochs.peek().is_some_and(|e| e.epoch <= r.epoch) {
                let e = epochs.next().unwrap();
                writeln!(out, ",{},{},,,,,{},{}", e.epoch, e.phase, e.val_pixacc, e.val_miou).unwrap();
            }
        }
        for e in epochs {
            writeln!(out, ",{},{},,,,,{},{}", e.epoch, e.phase, e.val_pixacc, e.val_miou).unwrap();
        }
        out
    }

    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Eval-mode confusion matrix over `samples`, in batches of `batch_size`.
pub fn evaluate<T: Real>(model: &Model<T>, samples: &[Sample], encoding: bool, batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, labels) = make_batch::<T>(&refs)?;
        let pred = model.predict(&images, encoding)?;
        cm.update(&predict_labels(&pred.fused_logits)?, &labels)?;
    }
    Ok(cm)
}

/// Progress callback: called after every iteration and every epoch.
pub enum Event<'a> {
    Iteration(&'a IterRecord),
    Epoch(&'a EpochRecord),
}

/// Iterations per epoch (the partial final batch is dropped).
pub fn iterations_per_epoch(samples: usize, batch_size: usize) -> Result<usize> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if samples < batch_size {
        return Err(Error::Data(format!(
            "{samples} training samples is fewer than one batch of {batch_size}"
        )));
    }
    Ok(samples / batch_size)
}

/// Runs one phase with a fresh optimizer and schedule, appending to
/// `report`. Returns the optimizer state at the end of the phase.
pub fn run_phase(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    phase: Phase,
    report: &mut TrainingReport,
    on_event: &mut dyn FnMut(Event),
) -> Result<Adam<f32>> {
    let adam = Adam::new(&model.params);
    resume_phase(model, train, val, cfg, phase, 0..phase.epochs, adam, report, on_event)
}

/// Runs the epochs `epochs` (indices within the phase) of `phase` with the
/// given optimizer state; the schedule always spans the whole phase.
/// Iteration numbers in the report are global, counted from the start of
/// phase 1.
#[allow(clippy::too_many_arguments)]
pub fn resume_phase(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    phase: Phase,
    epochs: Range<usize>,
    mut adam: Adam<f32>,
    report: &mut TrainingReport,
    on_event: &mut dyn FnMut(Event),
) -> Result<Adam<f32>> {
    let per_epoch = iterations_per_epoch(train.len(), cfg.batch_size)?;
    if epochs.end > phase.epochs {
        return Err(Error::Config(format!(
            "epoch range {epochs:?} exceeds the {} epochs of phase {}",
            phase.epochs, phase.number
        )));
    }
    if epochs.is_empty() {
        return Ok(adam);
    }
    let sched = LrSchedule::new(cfg.base_lr, cfg.power, per_epoch * phase.epochs)?;
    let weights = LossWeights {
        se_weight: if phase.encoding { cfg.loss.se_weight } else { 0.0 },
    };
    model.params.set_trainable(ParamGroup::Backbone, true);
    model.params.set_trainable(ParamGroup::Encoding, phase.encoding);
    let size = train[0].size;
    let micro = cfg.micro_batch.unwrap_or(cfg.batch_size).clamp(1, cfg.batch_size);
    let opts = ForwardOptions {
        mode: Mode::Train,
        encoding: phase.encoding,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for e in epochs {
        let epoch = phase.first_epoch + e;
        order.sort_unstable();
        SplitMix64::derive(cfg.seed, &[0, epoch as u64]).shuffle(&mut order);
        for it in 0..per_epoch {
            let step = e * per_epoch + it;
            let global = epoch * per_epoch + it;
            let lr = poly_lr(&sched, step);
            let idx = &order[it * cfg.batch_size..(it + 1) * cfg.batch_size];
            let batch: Vec<Sample> = idx
                .iter()
                .map(|&i| {
                    if cfg.augment {
                        augment(&train[i], SplitMix64::derive(cfg.seed, &[1, epoch as u64, i as u64]).next_u64(), size)
                    } else {
                        train[i].clone()
                    }
                })
                .collect();
            model.params.zero_grad();
            let (mut total, mut ce, mut se) = (0.0, 0.0, 0.0);
            for chunk in batch.chunks(micro) {
                let share = chunk.len() as f64 / batch.len() as f64;
                let refs: Vec<&Sample> = chunk.iter().collect();
                let (images, labels) = make_batch::<f32>(&refs)?;
                let mut rec = Record::new();
                let x = rec.constant(images);
                let (out, updates) = model.forward(&mut rec, x, opts)?;
                let terms = total_loss(&mut rec, &out, &labels, model.config().num_classes, weights)?;
                let loss = rec.value(terms.total).item().as_f64();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss(global));
                }
                total += share * loss;
                ce += share * terms.ce_sum(&rec);
                se += share * terms.se_sum(&rec);
                let scaled = rec.scale(terms.total, share);
                rec.backward(scaled)?;
                model.params.absorb_grads(&mut rec);
                updates.apply(&mut model.norms);
            }
            adam.step(&mut model.params, lr)?;
            let record = IterRecord {
                iter: global,
                epoch,
                phase: phase.number,
                lr,
                loss_total: total,
                loss_ce: ce,
                loss_se: se,
            };
            on_event(Event::Iteration(&record));
            report.iterations.push(record);
        }
        if !val.is_empty() {
            let cm = evaluate(model, val, phase.encoding, cfg.batch_size)?;
            let record = EpochRecord {
                epoch,
                phase: phase.number,
                val_pixacc: cm.pix_acc()?,
                val_miou: cm.mean_iou()?,
            };
            on_event(Event::Epoch(&record));
            report.epochs.push(record);
        }
    }
    model.params.set_trainable(ParamGroup::Encoding, true);
    Ok(adam)
}

/// Phase 1 without the encoding layers, then phase 2 with the full model
/// starting from the phase-1 weights. `after_phase1` sees the model and
/// optimizer between the phases (e.g. to save a checkpoint).
pub fn train(
    model: &mut Model<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    on_event: &mut dyn FnMut(Event),
    after_phase1: &mut dyn FnMut(&Model<f32>, &Adam<f32>, &TrainingReport) -> Result<()>,
) -> Result<TrainingReport> {
    iterations_per_epoch(train.len(), cfg.batch_size)?;
    let mut report = TrainingReport::default();
    let adam = run_phase(model, train, val, cfg, cfg.phase1(), &mut report, on_event)?;
    after_phase1(model, &adam, &report)?;
    run_phase(model, train, val, cfg, cfg.phase2(), &mut report, on_event)?;
    Ok(report)
}

/// Mean loss terms of a batch in train mode, without updating anything.
pub fn batch_loss<T: Real>(model: &Model<T>, images: &Tensor<T>, labels: &[u8], opts: ForwardOptions, weights: LossWeights) -> Result<f64> {
    let mut rec = Record::new();
    let x = rec.constant(images.clone());
    let (out, _) = model.forward(&mut rec, x, opts)?;
    let terms = total_loss(&mut rec, &out, labels, model.config().num_classes, weights)?;
    Ok(rec.value(terms.total).item().as_f64())
}

#[cfg(test)]
mod tests;
