//! Mini-batch training with plateau stopping, checkpoints and random search.

mod search;

pub use search::{hyperparameter_search, SearchReport, SearchSpace, TrialResult, TrialStatus};

use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::container::{Bundle, NamedArray};
use crate::data::sample::{Augmentation, StormSample};
use crate::error::{Error, Result};
use crate::layers::{LayerKind, Mode};
use crate::loss::Loss;
use crate::metrics::{evaluate_predictions, EvalMode, DEFAULT_SWEEP_STEP};
use crate::models::io::{load_arrays, model_arrays};
use crate::models::{Model, ModelSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{Rng, Tensor};

pub const PLATEAU_EPSILON: f64 = 1e-6;
pub const DEFAULT_PATIENCE: usize = 5;
const CHECKPOINT_KIND: &str = "checkpoint";
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const AUGMENT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub loss: Loss,
    pub plateau_epsilon: f64,
    pub patience: usize,
    pub augment: bool,
    pub seed: u64,
    /// Score the validation set after every epoch (otherwise only after the last).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 50,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            loss: Loss::Bce,
            plateau_epsilon: PLATEAU_EPSILON,
            patience: DEFAULT_PATIENCE,
            augment: false,
            seed: 0,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.plateau_epsilon.is_nan() || self.plateau_epsilon < 0.0 {
            return Err(Error::invalid("plateau epsilon must be non-negative"));
        }
        if let Loss::WeightedBce { pos_weight } = self.loss {
            if !(pos_weight > 0.0 && pos_weight.is_finite()) {
                return Err(Error::invalid(format!("pos_weight must be positive, got {pos_weight}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metric: Option<f64>,
    /// Wall time of the epoch.
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: Option<StopReason>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_metric,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            s += &format!(
                "{},{},{},{},{:.6}\n",
                e.epoch,
                e.train_loss,
                opt_field(e.val_loss),
                opt_field(e.val_metric),
                e.seconds
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Shuffled mini-batches for one epoch. A trailing batch of one sample is
/// folded into the previous batch when `fold_singleton` is set.
pub fn epoch_batches(seed: u64, epoch: usize, n: usize, batch_size: usize, fold_singleton: bool) -> Vec<Vec<usize>> {
    let order = Rng::derive(seed, &[SHUFFLE_STREAM, epoch as u64]).permutation(n);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if fold_singleton && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Applies an independent random augmentation to each image (and map target).
fn augment_batch(x: &Tensor, y: &Tensor, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
    let [b, h, w, c] = *x.shape() else {
        return Ok((x.clone(), y.clone()));
    };
    let map = y.rank() == 4;
    let mut xo = x.clone();
    let mut yo = y.clone();
    for i in 0..b {
        let image = Tensor::new(vec![h, w, c], x.item(i).to_vec())?;
        let flashes = if map {
            Tensor::new(vec![h, w], y.item(i).to_vec())?
        } else {
            Tensor::zeros(&[h, w])
        };
        let out = Augmentation::draw(rng).apply(&StormSample::new(image, flashes)?, rng)?;
        xo.item_mut(i).copy_from_slice(out.image.data());
        if map {
            yo.item_mut(i).copy_from_slice(out.flashes.data());
        }
    }
    Ok((xo, yo))
}

/// Validation loss and primary metric of `model` on `(x, y)`.
pub fn validation_scores(model: &Model, loss: &Loss, x: &Tensor, y: &Tensor) -> Result<(f64, Option<f64>)> {
    let preds = model.predict(x)?;
    let (l, _) = loss.loss_and_grad(&preds, y)?;
    let out = model.spec().output;
    let mode = if out.is_map() { EvalMode::Pixel } else { EvalMode::Image };
    let report = evaluate_predictions(&preds, y, "validation", out.is_probability(), mode, DEFAULT_SWEEP_STEP)?;
    Ok((l, report.primary_metric()))
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub optimizer: Optimizer,
    pub config: TrainConfig,
    pub log: TrainLog,
    /// Consecutive epochs whose monitored loss moved less than epsilon.
    stall: usize,
    prev_monitor: Option<f64>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            optimizer: Optimizer::new(config.optimizer, config.learning_rate)?,
            model,
            config,
            log: TrainLog::default(),
            stall: 0,
            prev_monitor: None,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    pub fn is_finished(&self) -> bool {
        self.log.stop_reason.is_some()
    }

    /// Changes the epoch budget. A run that stopped only because it hit the
    /// old budget becomes resumable when the new one is larger.
    pub fn set_max_epochs(&mut self, max_epochs: usize) {
        self.config.max_epochs = max_epochs;
        if self.log.stop_reason == Some(StopReason::MaxEpochs) && self.epochs_done() < max_epochs {
            self.log.stop_reason = None;
        }
    }

    fn uses_batchnorm(&self) -> bool {
        self.model
            .nodes()
            .iter()
            .any(|n| matches!(n.layer.kind, LayerKind::BatchNorm { .. }))
    }

    fn check_data(&self, x: &Tensor, y: &Tensor, what: &str) -> Result<()> {
        if x.batch_size() != y.batch_size() || x.is_empty() {
            return Err(Error::invalid(format!(
                "{what}: {} inputs vs {} targets",
                x.batch_size(),
                y.batch_size()
            )));
        }
        let mut expected = vec![y.batch_size()];
        expected.extend_from_slice(self.model.output_shape());
        if y.shape() != expected {
            return Err(Error::ShapeMismatch {
                left: y.shape().to_vec(),
                right: expected,
                context: "training targets vs model output",
            });
        }
        Ok(())
    }

    /// One pass over the training set; returns the size-weighted mean batch loss.
    fn run_epoch(&mut self, epoch: usize, x: &Tensor, y: &Tensor) -> Result<f64> {
        let cfg = self.config;
        let n = x.batch_size();
        let batches = epoch_batches(cfg.seed, epoch, n, cfg.batch_size, self.uses_batchnorm());
        let mut dropout_rng = Rng::derive(cfg.seed, &[DROPOUT_STREAM, epoch as u64]);
        let mut aug_rng = Rng::derive(cfg.seed, &[AUGMENT_STREAM, epoch as u64]);
        let mut total = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let (mut xb, mut yb) = (x.gather(idx)?, y.gather(idx)?);
            if cfg.augment {
                (xb, yb) = augment_batch(&xb, &yb, &mut aug_rng)?;
            }
            let out = self.model.forward(&xb, Mode::Train, &mut dropout_rng)?;
            let (loss, grad) = cfg.loss.loss_and_grad(&out, &yb)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, batch {b}")));
            }
            let grads = self.model.backward(&grad)?;
            if grads.params.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}, batch {b}")));
            }
            self.optimizer.step(&mut self.model.params_mut(), &grads.params)?;
            total += loss * idx.len() as f64;
        }
        Ok(total / n as f64)
    }

    /// Trains until `until_epoch` epochs are complete, `max_epochs` is reached,
    /// or validation loss plateaus.
    pub fn run_until(&mut self, train: (&Tensor, &Tensor), val: Option<(&Tensor, &Tensor)>, until_epoch: usize) -> Result<()> {
        self.check_data(train.0, train.1, "training set")?;
        if let Some((vx, vy)) = val {
            self.check_data(vx, vy, "validation set")?;
        }
        let cfg = self.config;
        if self.is_finished() {
            return Ok(());
        }
        if cfg.max_epochs == 0 {
            self.log.stop_reason = Some(StopReason::MaxEpochs);
            return Ok(());
        }
        while self.epochs_done() < until_epoch.min(cfg.max_epochs) {
            let epoch = self.epochs_done();
            let start = Instant::now();
            let train_loss = self.run_epoch(epoch, train.0, train.1)?;
            let last_epoch = epoch + 1 == cfg.max_epochs;
            let (val_loss, val_metric) = match val {
                Some((vx, vy)) if cfg.eval_every_epoch || last_epoch => {
                    let (l, m) = validation_scores(&self.model, &cfg.loss, vx, vy)?;
                    (Some(l), m)
                }
                _ => (None, None),
            };
            self.log.epochs.push(EpochRecord {
                epoch: epoch + 1,
                train_loss,
                val_loss,
                val_metric,
                seconds: start.elapsed().as_secs_f64(),
            });
            // validation loss drives stopping; training loss stands in without a validation set
            let monitor = val_loss.unwrap_or(train_loss);
            if let Some(prev) = self.prev_monitor {
                if (monitor - prev).abs() < cfg.plateau_epsilon {
                    self.stall += 1;
                } else {
                    self.stall = 0;
                }
            }
            self.prev_monitor = Some(monitor);
            if self.stall >= cfg.patience {
                self.log.stop_reason = Some(StopReason::Plateau);
                return Ok(());
            }
        }
        if self.epochs_done() >= cfg.max_epochs {
            self.log.stop_reason = Some(StopReason::MaxEpochs);
        }
        Ok(())
    }

    pub fn run(&mut self, train: (&Tensor, &Tensor), val: Option<(&Tensor, &Tensor)>) -> Result<()> {
        self.run_until(train, val, usize::MAX)
    }

    pub fn into_parts(self) -> (Model, TrainLog) {
        (self.model, self.log)
    }

    /// Serializes the full state: parameters, optimizer moments, log and stopping
    /// counters. Epoch timings are stored as zero so identical runs write
    /// identical checkpoints.
    pub fn checkpoint(&self) -> Result<Vec<u8>> {
        let mut log = self.log.clone();
        for e in &mut log.epochs {
            e.seconds = 0.0;
        }
        let mut arrays = model_arrays(&self.model);
        for (i, m) in self.optimizer.m.iter().enumerate() {
            arrays.push(NamedArray::f64(format!("opt.m{i:03}"), m));
        }
        for (i, v) in self.optimizer.v.iter().enumerate() {
            arrays.push(NamedArray::f64(format!("opt.v{i:03}"), v));
        }
        Bundle {
            meta: json!({
                "kind": CHECKPOINT_KIND,
                "spec": self.model.spec(),
                "config": self.config,
                "log": log,
                "stall": self.stall,
                "prev_monitor": self.prev_monitor,
                "optimizer": {
                    "t": self.optimizer.t,
                    "moments": [self.optimizer.m.len(), self.optimizer.v.len()],
                },
            }),
            arrays,
        }
        .to_bytes()
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let bundle = Bundle::from_bytes(bytes)?;
        let meta = &bundle.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("container does not hold a checkpoint".into()));
        }
        let spec: ModelSpec = serde_json::from_value(meta["spec"].clone())?;
        let config: TrainConfig = serde_json::from_value(meta["config"].clone())?;
        let model = load_arrays(&spec, &bundle)?;
        let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate)?;
        optimizer.t = serde_json::from_value(meta["optimizer"]["t"].clone())?;
        let [nm, nv]: [usize; 2] = serde_json::from_value(meta["optimizer"]["moments"].clone())?;
        for i in 0..nm {
            optimizer.m.push(bundle.array(&format!("opt.m{i:03}"))?.to_tensor()?);
        }
        for i in 0..nv {
            optimizer.v.push(bundle.array(&format!("opt.v{i:03}"))?.to_tensor()?);
        }
        Ok(Self {
            model,
            optimizer,
            config,
            log: serde_json::from_value(meta["log"].clone())?,
            stall: serde_json::from_value(meta["stall"].clone())?,
            prev_monitor: serde_json::from_value(meta["prev_monitor"].clone())?,
        })
    }
}

/// Trains `model` on `train` and returns the final model and its log.
pub fn train(
    model: Model,
    train: (&Tensor, &Tensor),
    val: Option<(&Tensor, &Tensor)>,
    config: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    let mut t = Trainer::new(model, *config)?;
    t.run(train, val)?;
    Ok(t.into_parts())
}

#[cfg(test)]
mod tests;
