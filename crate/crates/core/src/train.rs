//! SGD with momentum and weight decay, plateau LR scheduling, early
//! stopping, and the TL / TL+KD training loops.
//!
//! Determinism contract: (seed, config, data) fully determine the history's
//! numeric fields and the final weights, bitwise. Wall-clock times are
//! recorded for reporting but excluded from that contract.

use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, kd_combined_loss, softmax_temperature, DistillationConfig, SoftLabelBatch};
use crate::nn::{Mode, Model};
use crate::rng::{op_ids, SplitMix64};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_patience: usize,
    /// Multiplier applied on plateau; "reduced by 10%" read literally.
    pub lr_factor: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 64,
            max_epochs: 200,
            lr_patience: 3,
            lr_factor: 0.9,
            early_stop_patience: 10,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0
            || self.momentum < 0.0
            || self.weight_decay < 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
        {
            return Err(Error::Config("training config fields must be positive".into()));
        }
        if !(0.0 < self.lr_factor && self.lr_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_factor must be in (0,1), got {}",
                self.lr_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    /// Seconds; informational only.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e}\n",
                r.epoch, r.train_loss, r.val_acc, r.lr
            ));
        }
        out
    }

    /// Numeric fields only; wall time is excluded from determinism checks.
    pub fn numeric_eq(&self, other: &TrainingHistory) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.train_loss.to_bits() == b.train_loss.to_bits()
                    && a.val_acc.to_bits() == b.val_acc.to_bits()
                    && a.lr.to_bits() == b.lr.to_bits()
            })
    }

    pub fn best_val_acc(&self) -> f64 {
        self.epochs.iter().map(|r| r.val_acc).fold(0.0, f64::max)
    }
}

/// First epoch (1-based) whose validation accuracy reaches the threshold.
pub fn epochs_to_threshold(history: &TrainingHistory, threshold: f64) -> Option<usize> {
    history
        .epochs
        .iter()
        .find(|r| r.val_acc >= threshold)
        .map(|r| r.epoch)
}

/// Per-parameter velocity buffers plus scheduler/early-stop counters.
pub struct OptimizerState {
    pub velocities: Vec<Vec<f64>>,
    pub lr: f64,
    pub best_val_acc: f64,
    pub lr_wait: usize,
    pub stop_wait: usize,
}

impl OptimizerState {
    pub fn new(model: &Model, cfg: &TrainingConfig) -> Self {
        let velocities = model
            .flat_params()
            .iter()
            .map(|(_, p)| vec![0.0; p.value.len()])
            .collect();
        OptimizerState {
            velocities,
            lr: cfg.learning_rate,
            best_val_acc: f64::NEG_INFINITY,
            lr_wait: 0,
            stop_wait: 0,
        }
    }
}

/// One SGD step: v <- momentum*v + (grad + weight_decay*param);
/// param <- param - lr*v. Frozen parameters are untouched.
pub fn sgd_step(
    model: &mut Model,
    grads: &[Option<Vec<f64>>],
    state: &mut OptimizerState,
    cfg: &TrainingConfig,
) -> Result<()> {
    let mut params = model.flat_params_mut();
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params vs {} grads vs {} velocities",
            params.len(),
            grads.len(),
            state.velocities.len()
        )));
    }
    for (i, (_, p)) in params.iter_mut().enumerate() {
        if p.frozen {
            continue;
        }
        let zeros;
        let g: &[f64] = match &grads[i] {
            Some(g) => {
                if g.len() != p.value.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "grad len {} vs param len {}",
                        g.len(),
                        p.value.len()
                    )));
                }
                g
            }
            None => {
                zeros = vec![0.0; p.value.len()];
                &zeros
            }
        };
        let v = &mut state.velocities[i];
        for j in 0..p.value.len() {
            v[j] = cfg.momentum * v[j] + (g[j] + cfg.weight_decay * p.value.data[j]);
            p.value.data[j] -= state.lr * v[j];
        }
    }
    Ok(())
}

/// Plateau scheduler: after `lr_patience` consecutive non-improving epochs,
/// lr <- lr * lr_factor and the counter resets.
pub fn reduce_lr_on_plateau(state: &mut OptimizerState, val_acc: f64, cfg: &TrainingConfig) {
    if val_acc > state.best_val_acc {
        state.lr_wait = 0;
    } else {
        state.lr_wait += 1;
        if state.lr_wait >= cfg.lr_patience {
            state.lr *= cfg.lr_factor;
            state.lr_wait = 0;
        }
    }
}

/// Early stopping: stop after `early_stop_patience` consecutive epochs
/// without improvement of the best validation accuracy.
pub fn early_stopping_check(
    state: &mut OptimizerState,
    val_acc: f64,
    cfg: &TrainingConfig,
) -> bool {
    if val_acc > state.best_val_acc {
        state.stop_wait = 0;
        false
    } else {
        state.stop_wait += 1;
        state.stop_wait >= cfg.early_stop_patience
    }
}

/// Stacks dataset images `idx` into a [B,3,H,W] batch tensor.
pub fn stack_batch(ds: &ImageDataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let img0 = &ds.images[idx[0]];
    let (c, h, w) = (img0.shape[0], img0.shape[1], img0.shape[2]);
    let mut data = Vec::with_capacity(idx.len() * c * h * w);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend_from_slice(&ds.images[i].data);
        labels.push(ds.labels[i]);
    }
    (Tensor::new(vec![idx.len(), c, h, w], data), labels)
}

/// Eval-mode class predictions over a whole dataset.
pub fn predict(model: &Model, ds: &ImageDataset, batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (batch, _) = stack_batch(ds, chunk);
        let out = model.forward_eval(&batch)?;
        let k = out.shape[1];
        for row in out.data.chunks_exact(k) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn accuracy(model: &Model, ds: &ImageDataset, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let preds = predict(model, ds, batch_size)?;
    let hits = preds
        .iter()
        .zip(&ds.labels)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Temperature-softened teacher predictions for a batch. The teacher runs in
/// eval mode off the tape, so no gradient graph is retained.
pub fn teacher_soft_labels(
    teacher: &Model,
    batch: &Tensor,
    temperature: f64,
) -> Result<SoftLabelBatch> {
    let logits = teacher.forward_eval(batch)?;
    let probabilities = softmax_temperature(&logits, temperature)?;
    Ok(SoftLabelBatch {
        probabilities,
        temperature,
        source: teacher.name.clone(),
    })
}

/// Vanilla transfer-learning fine-tune: cross-entropy against hard labels.
pub fn train_tl(
    student: &mut Model,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &TrainingConfig,
) -> Result<TrainingHistory> {
    run_training(student, None, train_ds, val_ds, cfg)
}

/// TL+KD fine-tune: combined distillation loss against a frozen teacher.
pub fn train_tl_kd(
    student: &mut Model,
    teacher: &Model,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &TrainingConfig,
    dcfg: &DistillationConfig,
) -> Result<TrainingHistory> {
    if teacher.num_classes() != student.num_classes() {
        return Err(Error::HeadMismatch(
            student.num_classes(),
            teacher.num_classes(),
        ));
    }
    run_training(student, Some((teacher, dcfg)), train_ds, val_ds, cfg)
}

fn run_training(
    student: &mut Model,
    distill: Option<(&Model, &DistillationConfig)>,
    train_ds: &ImageDataset,
    val_ds: &ImageDataset,
    cfg: &TrainingConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if student.num_classes() != train_ds.num_classes() {
        return Err(Error::HeadMismatch(
            student.num_classes(),
            train_ds.num_classes(),
        ));
    }

    let mut state = OptimizerState::new(student, cfg);
    let mut history = TrainingHistory::default();
    let mut best_params: Option<Vec<(String, Tensor)>> = None;
    let n = train_ds.len();

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = SplitMix64::stream(cfg.seed, epoch as u64, op_ids::SHUFFLE);
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_i, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (batch, labels) = stack_batch(train_ds, chunk);
            let mut dropout_rng = SplitMix64::stream(
                cfg.seed,
                (epoch as u64) << 32 | batch_i as u64,
                op_ids::DROPOUT,
            );
            let mut tape = crate::tensor::Tape::new();
            let (logits, param_vars) =
                student.forward_tape(&mut tape, batch.clone(), Mode::Train, &mut dropout_rng)?;
            let loss = match distill {
                None => cross_entropy(&mut tape, logits, &labels)?,
                Some((teacher, dcfg)) => {
                    let z_t = teacher.forward_eval(&batch)?;
                    kd_combined_loss(&mut tape, logits, &z_t, &labels, dcfg)?
                }
            };
            loss_sum += tape.value(loss).item() * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let flat_grads: Vec<Option<Vec<f64>>> = param_vars
                .iter()
                .map(|&v| grads.get(v).map(|g| g.to_vec()))
                .collect();
            sgd_step(student, &flat_grads, &mut state, cfg)?;
        }
        let train_loss = loss_sum / n as f64;
        let val_acc = accuracy(student, val_ds, cfg.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_acc,
            lr: state.lr,
            wall_time: t0.elapsed().as_secs_f64(),
        });

        // checkpoint before updating best; strict improvement keeps the
        // earliest epoch on ties
        if val_acc > state.best_val_acc {
            best_params = Some(student.state_tensors());
        }
        reduce_lr_on_plateau(&mut state, val_acc, cfg);
        let stop = early_stopping_check(&mut state, val_acc, cfg);
        if val_acc > state.best_val_acc {
            state.best_val_acc = val_acc;
        }
        if stop {
            break;
        }
    }

    if let Some(best) = best_params {
        student.load_state(&best)?;
    }
    Ok(history)
}
