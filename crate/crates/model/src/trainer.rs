//! Fine-tuning loop: warmup + layer-wise decayed learning rates, rotation/flip
//! augmentation, early stopping on validation loss, best-checkpoint retention.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{ModelError, Result};
use crate::model::SdfModel;
use crate::schedule::lr_at;
use sdf_core::morphometry::NormStats;
use sdf_core::plots::EpochLog;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub layer_decay: f64,
    pub warmup_proportion: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation loss must drop by more than this to count as improvement.
    pub min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-5,
            layer_decay: 0.12,
            warmup_proportion: 0.1,
            patience: 10,
            max_epochs: 50,
            batch_size: 32,
            seed: 0,
            min_delta: 1e-6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_proportion > 0.0 && self.warmup_proportion < 1.0) {
            return Err(ModelError::InvalidConfig(
                "warmup_proportion must be in (0, 1)".into(),
            ));
        }
        if !(self.layer_decay > 0.0 && self.layer_decay <= 1.0) {
            return Err(ModelError::InvalidConfig("layer_decay must be in (0, 1]".into()));
        }
        if self.patience == 0 {
            return Err(ModelError::InvalidConfig("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ModelError::InvalidConfig(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Config seed, unless the `SDF_SEED` env var overrides it.
    pub fn effective_seed(&self) -> u64 {
        std::env::var("SDF_SEED")
            .ok()
            .and_then(|s| s.parse().ok())
            .unwrap_or(self.seed)
    }
}

/// Mean binary cross-entropy over probability/label slices, clamped away from
/// the log singularities.
pub fn bce_loss(probabilities: &[f64], labels: &[u8]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(ModelError::Dataset(format!(
            "{} probabilities vs {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if probabilities.is_empty() {
        return Err(ModelError::Dataset("empty batch".into()));
    }
    const EPS: f64 = 1e-12;
    let sum: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(EPS, 1.0 - EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probabilities.len() as f64)
}

/// Numerically stable mean BCE on raw logits:
/// max(x, 0) - x*y + ln(1 + exp(-|x|)).
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let labels = labels.to_dtype(logits.dtype())?;
    let relu = logits.relu()?;
    let softplus = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((relu - (logits * &labels)?)? + softplus)?;
    Ok(loss.mean_all()?)
}

/// Early-stopping state: strict improvement by more than `min_delta`, halting
/// after `patience` consecutive epochs without one.
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    epochs_since_improvement: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best_loss: f64::INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }

    /// Record one epoch's validation loss; returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> (bool, bool) {
        let improved = val_loss < self.best_loss - self.min_delta || self.best_epoch == 0;
        if improved {
            self.best_loss = val_loss;
            self.best_epoch = epoch;
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        (improved, self.epochs_since_improvement >= self.patience)
    }
}

/// One epoch's outcome as produced by a [`FitSession`].
pub struct EpochOutcome {
    pub log: EpochLog,
}

/// The epoch-level workload driven by [`fit_loop`]. Factoring the loop out of
/// the tensor code lets tests script an exact validation-loss sequence.
pub trait FitSession {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochOutcome>;
    /// Called when `epoch` sets a new best validation loss.
    fn snapshot_best(&mut self, epoch: usize) -> Result<()>;
}

/// Run epochs until `max_epochs` or early stopping; returns the best epoch and
/// all logs.
pub fn fit_loop<S: FitSession>(
    session: &mut S,
    cfg: &TrainConfig,
) -> Result<(usize, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut stopper = EarlyStopping::new(cfg.patience, cfg.min_delta);
    let mut logs = Vec::new();
    for epoch in 1..=cfg.max_epochs {
        let outcome = session.run_epoch(epoch)?;
        let val_loss = outcome.log.val_loss;
        if !val_loss.is_finite() || !outcome.log.train_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                epoch,
                loss: if val_loss.is_finite() {
                    outcome.log.train_loss
                } else {
                    val_loss
                },
            });
        }
        logs.push(outcome.log);
        let (improved, stop) = stopper.observe(epoch, val_loss);
        if improved {
            session.snapshot_best(epoch)?;
        }
        if stop {
            break;
        }
    }
    Ok((stopper.best_epoch, logs))
}

fn check_no_leakage(train: &Dataset, val: &Dataset) -> Result<()> {
    let val_patients = val.patients();
    let overlap: Vec<String> = train
        .patients()
        .into_iter()
        .filter(|p| val_patients.binary_search(p).is_ok())
        .collect();
    if overlap.is_empty() {
        Ok(())
    } else {
        Err(ModelError::PatientLeakage(overlap))
    }
}

/// Evaluation-mode loss and accuracy over a dataset (no dropout, no
/// augmentation, threshold 0.5).
pub fn evaluate(model: &SdfModel, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut total = 0usize;
    for indices in data.batch_indices(batch_size, None) {
        let batch = data.load_batch(&indices, None)?;
        let logits = model.forward(batch.images.as_ref(), Some(&batch.features), None)?;
        let loss = bce_with_logits(&logits, &batch.labels)?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?;
        loss_sum += loss * indices.len() as f64;
        let logit_vals = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        let label_vals = batch.labels.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for (l, y) in logit_vals.iter().zip(&label_vals) {
            if (*l > 0.0) == (*y > 0.5) {
                correct += 1;
            }
        }
        total += indices.len();
    }
    if total == 0 {
        return Err(ModelError::Dataset("empty dataset".into()));
    }
    Ok((loss_sum / total as f64, correct as f64 / total as f64))
}

/// Evaluation-mode probabilities for every sample, in dataset order.
pub fn predict(model: &SdfModel, data: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.len());
    for indices in data.batch_indices(batch_size, None) {
        let batch = data.load_batch(&indices, None)?;
        let probs = model
            .predict_proba(batch.images.as_ref(), Some(&batch.features))?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?;
        out.extend(probs);
    }
    Ok(out)
}

struct GroupOptimizers {
    optimizers: Vec<AdamW>,
}

impl GroupOptimizers {
    fn new(model: &SdfModel) -> Result<Self> {
        let optimizers = model
            .parameter_groups()
            .into_iter()
            .map(|vars| {
                AdamW::new(
                    vars,
                    ParamsAdamW {
                        lr: 0.0,
                        beta1: 0.9,
                        beta2: 0.999,
                        eps: 1e-8,
                        weight_decay: 0.0,
                    },
                )
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(GroupOptimizers { optimizers })
    }

    fn step(&mut self, grads: &candle_core::backprop::GradStore, lrs: &[f64]) -> Result<()> {
        for (opt, &lr) in self.optimizers.iter_mut().zip(lrs) {
            opt.set_learning_rate(lr);
            opt.step(grads)?;
        }
        Ok(())
    }

    fn step_flat(&mut self, grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        for opt in &mut self.optimizers {
            opt.set_learning_rate(lr);
            opt.step(grads)?;
        }
        Ok(())
    }
}

struct RealSession<'a> {
    model: &'a SdfModel,
    train: &'a Dataset,
    val: &'a Dataset,
    cfg: &'a TrainConfig,
    run_dir: &'a Path,
    norm_stats: Option<&'a NormStats>,
    optimizers: GroupOptimizers,
    shuffle_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    global_step: usize,
    total_steps: usize,
    n_groups: usize,
}

impl FitSession for RealSession<'_> {
    fn run_epoch(&mut self, epoch: usize) -> Result<EpochOutcome> {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for indices in self
            .train
            .batch_indices(self.cfg.batch_size, Some(&mut self.shuffle_rng))
        {
            let batch = self.train.load_batch(&indices, Some(&mut self.augment_rng))?;
            let logits = self.model.forward(
                batch.images.as_ref(),
                Some(&batch.features),
                Some(&mut self.dropout_rng),
            )?;
            let loss = bce_with_logits(&logits, &batch.labels)?;
            let grads = loss.backward()?;
            self.global_step += 1;
            let lrs: Vec<f64> = (0..self.n_groups)
                .map(|k| lr_at(self.global_step, self.total_steps, k, self.cfg))
                .collect();
            self.optimizers.step(&grads, &lrs)?;

            let loss_val = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            loss_sum += loss_val * indices.len() as f64;
            let logit_vals = logits.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            let label_vals = batch.labels.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for (l, y) in logit_vals.iter().zip(&label_vals) {
                if (*l > 0.0) == (*y > 0.5) {
                    correct += 1;
                }
            }
            total += indices.len();
        }
        let train_loss = loss_sum / total.max(1) as f64;
        let train_acc = correct as f64 / total.max(1) as f64;
        let (val_loss, val_acc) = evaluate(self.model, self.val, self.cfg.batch_size)?;
        let log = EpochLog {
            epoch,
            train_loss,
            val_loss,
            train_acc,
            val_acc,
            lr_head: lr_at(self.global_step, self.total_steps, 0, self.cfg),
        };
        let line = serde_json::to_string(&log)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.run_dir.join("epochs.jsonl"))
            .map_err(|e| ModelError::Checkpoint(format!("epochs.jsonl: {e}")))?;
        writeln!(file, "{line}").map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        Ok(EpochOutcome { log })
    }

    fn snapshot_best(&mut self, _epoch: usize) -> Result<()> {
        self.model
            .save_checkpoint(&self.run_dir.join("best"), self.norm_stats)
    }
}

/// Train `model` on `train`, early-stopping on `val` loss. Writes
/// `config.json`, `epochs.jsonl`, and the `best/` checkpoint under `run_dir`;
/// returns the best checkpoint path and all epoch logs.
pub fn fit(
    model: &SdfModel,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    run_dir: &Path,
    norm_stats: Option<&NormStats>,
) -> Result<(PathBuf, Vec<EpochLog>)> {
    cfg.validate()?;
    check_no_leakage(train, val)?;
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Dataset("train and val must both be non-empty".into()));
    }
    fs::create_dir_all(run_dir)
        .map_err(|e| ModelError::Checkpoint(format!("create {}: {e}", run_dir.display())))?;
    let config_json = serde_json::json!({ "train": cfg, "model": model.config });
    fs::write(
        run_dir.join("config.json"),
        serde_json::to_string_pretty(&config_json).expect("config serialize"),
    )
    .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let _ = fs::remove_file(run_dir.join("epochs.jsonl"));

    let seed = cfg.effective_seed();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut session = RealSession {
        model,
        train,
        val,
        cfg,
        run_dir,
        norm_stats,
        optimizers: GroupOptimizers::new(model)?,
        shuffle_rng: ChaCha8Rng::seed_from_u64(seed),
        dropout_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)),
        augment_rng: ChaCha8Rng::seed_from_u64(seed.wrapping_add(2)),
        global_step: 0,
        total_steps: cfg.max_epochs * batches_per_epoch,
        n_groups: model.parameter_groups().len(),
    };
    let (_, logs) = fit_loop(&mut session, cfg)?;
    Ok((run_dir.join("best"), logs))
}

/// Pipeline health check: 200 full-batch steps on one fixed batch with dropout
/// off and a flat learning rate; returns the final training loss.
pub fn overfit_sanity(model: &SdfModel, batch: &crate::dataset::Batch) -> Result<f64> {
    let lr = if model.backbone_config().is_some() {
        3e-3
    } else {
        1e-2
    };
    let mut optimizers = GroupOptimizers::new(model)?;
    let mut last = f64::NAN;
    for _ in 0..200 {
        let logits = model.forward(batch.images.as_ref(), Some(&batch.features), None)?;
        let loss = bce_with_logits(&logits, &batch.labels)?;
        let grads = loss.backward()?;
        optimizers.step_flat(&grads, lr)?;
        last = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !last.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch: 0, loss: last });
        }
    }
    Ok(last)
}
