use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaf::{FeatureSet, GafTensor};
use crate::nn::{Adadelta, Mode, Tensor4};
use crate::ohlc::{PatternClass, WINDOW_LEN};

use super::loss::{detection_loss, LossWeights};
use super::model::{Detector, DetectorArchitecture, DetectorOutput, OUTPUT_LEN};

/// One training target: a flattened `4 x 16 x 16` tensor and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub class: PatternClass,
    pub window_size: usize,
}

const CHW: [usize; 3] = [GafTensor::CHANNELS, WINDOW_LEN, WINDOW_LEN];
const EVAL_CHUNK: usize = 256;

pub fn stack_examples(examples: &[&Example]) -> Result<Tensor4> {
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.input.as_slice()).collect();
    Tensor4::stack(&inputs, CHW)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: Adadelta,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: Adadelta::default(),
            epochs: 4000,
            batch_size: 64,
            loss: LossWeights::default(),
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let positive = [o.lr, o.rho, o.eps, self.loss.coord, self.loss.noobj];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || o.rho >= 1.0 {
            return Err(Error::invalid("optimizer and loss weights must be positive, rho below 1"));
        }
        if !(o.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batch norm"));
        }
        Ok(())
    }
}

/// Mean loss over a batch, accumulating parameter gradients.
fn batch_loss_and_grad(
    model: &mut Detector,
    batch: &[&Example],
    weights: LossWeights,
) -> Result<f64> {
    let x = stack_examples(batch)?;
    let raw = model.forward(&x, Mode::Train)?;
    let n = batch.len() as f64;
    let mut d_raw = vec![0.0; batch.len() * OUTPUT_LEN];
    let mut total = 0.0;
    for (s, ex) in batch.iter().enumerate() {
        let (terms, g) = detection_loss(raw.sample(s), ex.class, ex.window_size, weights)?;
        total += terms.total();
        for (d, gv) in d_raw[s * OUTPUT_LEN..(s + 1) * OUTPUT_LEN].iter_mut().zip(g) {
            *d = gv / n;
        }
    }
    model.backward(&Tensor4::new(raw.shape(), d_raw)?)?;
    Ok(total / n)
}

/// One optimizer step on `batch`; returns the batch's mean loss before the update.
pub fn train_step(
    model: &mut Detector,
    batch: &[&Example],
    optimizer: &Adadelta,
    weights: LossWeights,
) -> Result<f64> {
    if batch.len() < 2 {
        return Err(Error::invalid("a training batch needs at least 2 samples"));
    }
    model.zero_grad();
    let loss = batch_loss_and_grad(model, batch, weights)?;
    for p in model.params_mut() {
        optimizer.step(p);
    }
    Ok(loss)
}

/// Inference-mode loss and accuracies over a set of examples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetMetrics {
    pub loss: f64,
    pub class_accuracy: f64,
    pub window_accuracy: f64,
}

pub fn evaluate_examples(model: &Detector, examples: &[Example], weights: LossWeights) -> Result<SetMetrics> {
    if examples.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty set"));
    }
    let (mut loss, mut cls, mut win) = (0.0, 0usize, 0usize);
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let raw = model.infer(&stack_examples(&refs)?)?;
        for (s, ex) in chunk.iter().enumerate() {
            let (terms, _) = detection_loss(raw.sample(s), ex.class, ex.window_size, weights)?;
            loss += terms.total();
            let out = DetectorOutput::from_raw(raw.sample(s))?;
            cls += usize::from(out.top_class().0 == ex.class);
            win += usize::from(out.predicted_window() == ex.window_size);
        }
    }
    let n = examples.len() as f64;
    Ok(SetMetrics {
        loss: loss / n,
        class_accuracy: cls as f64 / n,
        window_accuracy: win as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_cls_acc: f64,
    pub val_win_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Model with the lowest validation loss (earliest on ties).
    pub best: Detector,
    pub best_epoch: usize,
    pub last: Detector,
    pub log: Vec<EpochStats>,
}

/// Seeded mini-batch training with Adadelta. A trailing batch of one sample
/// is dropped since batch norm cannot normalize it.
pub fn train(
    arch: DetectorArchitecture,
    feature_set: FeatureSet,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::invalid("training split needs at least 2 samples"));
    }
    if val_set.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut model = Detector::new(arch, feature_set, &mut init_rng)?;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Detector)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = train_step(&mut model, &batch, &cfg.optimizer, cfg.loss)?;
            sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let val = evaluate_examples(&model, val_set, cfg.loss)?;
        let stats = EpochStats {
            epoch,
            train_loss: sum / seen as f64,
            val_loss: val.loss,
            val_cls_acc: val.class_accuracy,
            val_win_acc: val.window_accuracy,
        };
        on_epoch(&stats);
        log.push(stats);
        if best.as_ref().is_none_or(|(l, _, _)| val.loss < *l) {
            best = Some((val.loss, epoch, model.clone()));
        }
    }
    let (_, best_epoch, best_model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        last: model,
        log,
    })
}

pub fn write_log_csv(path: &Path, log: &[EpochStats]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
