use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::optim::{adamw_step, AdamWConfig, OptimizerState};
use super::schedule::cosine_lr;
use crate::data::{batches, Dataset, Normalization};
use crate::error::{config_err, Error, Result};
use crate::model::{apply_bn_updates, build_model, run_model, ForwardOptions, ModelConfig, ParamStore};
use crate::par;
use crate::tensor::{DType, Float, Tensor};

/// Batch size the base learning rate refers to.
pub const REFERENCE_BATCH: usize = 512;
/// Fraction of all steps spent warming up when `warmup_epochs` is unset.
pub const DEFAULT_WARMUP_FRACTION: f64 = 0.05;

pub const METRICS_HEADER: [&str; 6] = ["epoch", "step", "lr", "train_loss", "val_loss", "val_top1"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at a batch of 512; scaled linearly with `batch_size`.
    pub base_lr: f64,
    /// Warmup length in epochs; `None` means 5% of all steps.
    pub warmup_epochs: Option<usize>,
    pub weight_decay: f64,
    pub min_lr: f64,
    pub data_fraction: f64,
    pub seed: u64,
    pub dtype: DType,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 64,
            base_lr: 5e-4,
            warmup_epochs: None,
            weight_decay: 0.05,
            min_lr: 1e-6,
            data_fraction: 1.0,
            seed: 0,
            dtype: DType::Float32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err!("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be at least 1"));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return Err(config_err!(
                "data_fraction must lie in (0, 1], got {}",
                self.data_fraction
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(config_err!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.min_lr >= 0.0 && self.min_lr.is_finite()) {
            return Err(config_err!("min_lr must be non-negative, got {}", self.min_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight_decay must be non-negative"));
        }
        if matches!(self.warmup_epochs, Some(w) if w >= self.epochs) {
            return Err(config_err!("warmup_epochs must be smaller than epochs"));
        }
        Ok(())
    }

    /// `base_lr · batch_size / 512`.
    pub fn effective_lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / REFERENCE_BATCH as f64
    }

    fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        match self.warmup_epochs {
            Some(w) => w * steps_per_epoch,
            None => (DEFAULT_WARMUP_FRACTION * (self.epochs * steps_per_epoch) as f64).floor() as usize,
        }
    }
}

/// One row of the metrics CSV, written after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean batch loss over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
}

impl EpochMetrics {
    fn record(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.epoch.to_string(),
            self.step.to_string(),
            self.lr.to_string(),
            self.train_loss.to_string(),
            opt(self.val_loss),
            opt(self.val_top1),
        ]
    }
}

pub struct TrainRun<T> {
    pub params: ParamStore<T>,
    pub optimizer: OptimizerState<T>,
    pub normalization: Normalization,
    pub metrics: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct Evaluation<T> {
    pub top1: f64,
    pub loss: f64,
    /// `[N, num_classes]` in dataset order.
    pub logits: Tensor<T>,
}

/// Classifies every sample of `ds` in eval mode. Batches run concurrently;
/// results are combined in dataset order.
pub fn evaluate<T: Float>(
    cfg: &ModelConfig,
    params: &ParamStore<T>,
    ds: &Dataset,
    norm: &Normalization,
    batch_size: usize,
) -> Result<Evaluation<T>> {
    if batch_size == 0 {
        return Err(config_err!("batch size must be at least 1"));
    }
    let n = ds.len();
    let nb = n.div_ceil(batch_size);
    let parts = par::map_range(nb, nb > 1, |b| -> Result<(Vec<T>, f64)> {
        let idx: Vec<usize> = (b * batch_size..((b + 1) * batch_size).min(n)).collect();
        let (x, y) = ds.gather::<T>(&idx, norm)?;
        let (mut fw, logits) = run_model(cfg, params, &x, ForwardOptions::eval())?;
        let loss = fw.graph.cross_entropy(logits, &y)?;
        let l = fw.graph.value(loss).data()[0].as_f64() * idx.len() as f64;
        Ok((fw.graph.value(logits).data().to_vec(), l))
    });
    let k = cfg.num_classes;
    let mut all = Vec::with_capacity(n * k);
    let mut loss = 0.0;
    for part in parts {
        let (l, s) = part?;
        all.extend(l);
        loss += s;
    }
    let logits = Tensor::new(&[n, k], all)?;
    let correct = logits
        .data()
        .chunks(k)
        .zip(&ds.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(Evaluation {
        top1: correct as f64 / n as f64,
        loss: loss / n as f64,
        logits,
    })
}

/// Index of the first maximum.
pub fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_compatible(cfg: &ModelConfig, ds: &Dataset, what: &str) -> Result<()> {
    let (c, h, w) = ds.sample_shape();
    if c != cfg.input_size.2 {
        return Err(Error::Data(format!(
            "{what} samples have {c} channels, the model expects {}",
            cfg.input_size.2
        )));
    }
    cfg.grid_for(h, w)?;
    if ds.num_classes() > cfg.num_classes {
        return Err(Error::Data(format!(
            "{what} has {} classes, the model only {}",
            ds.num_classes(),
            cfg.num_classes
        )));
    }
    Ok(())
}

/// Trains a freshly built model. See [`train_with`].
pub fn train<T: Float>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    output_dir: Option<&Path>,
) -> Result<TrainRun<T>> {
    train_with(model, cfg, train_ds, val_ds, output_dir, |_| {})
}

/// Trains with AdamW and a warmup-cosine schedule, calling `on_epoch` after
/// each epoch.
///
/// With an output directory, `metrics.csv` is rewritten and
/// `ckpt_epoch{N}.vtae` saved after every epoch. A non-finite loss aborts
/// with [`Error::Divergence`], leaving earlier checkpoints in place.
pub fn train_with<T: Float>(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_ds: &Dataset,
    val_ds: Option<&Dataset>,
    output_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    check_compatible(model, train_ds, "training data")?;
    if let Some(v) = val_ds {
        check_compatible(model, v, "validation data")?;
    }
    if let Some(dir) = output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let (mut params, _) = build_model::<T>(model)?;
    let hyper = AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    };
    let mut opt = OptimizerState::new(&params, hyper);
    let norm = train_ds.normalization.clone();

    let steps_per_epoch = batches(train_ds.len(), cfg.batch_size, cfg.seed, 0, cfg.data_fraction)?.len();
    let total = steps_per_epoch * cfg.epochs;
    let warmup = cfg.warmup_steps(steps_per_epoch);
    let peak = cfg.effective_lr();
    if warmup >= total {
        return Err(config_err!("warmup of {warmup} steps leaves no training steps"));
    }

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut lr = 0.0;
    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let plan = batches(train_ds.len(), cfg.batch_size, cfg.seed, epoch, cfg.data_fraction)?;
        for batch in &plan {
            let (x, y) = train_ds.gather::<T>(&batch.indices, &norm)?;
            let (mut fw, logits) = run_model(model, &params, &x, ForwardOptions::train())?;
            let loss = fw.graph.cross_entropy(logits, &y)?;
            let lv = fw.graph.value(loss).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step,
                    loss: lv,
                });
            }
            fw.graph.backward(loss)?;
            let grads = fw.gradients();
            let bn = std::mem::take(&mut fw.bn_updates);
            drop(fw);
            step += 1;
            lr = cosine_lr(step, total, peak, cfg.min_lr, warmup);
            adamw_step(&mut params, &grads, &mut opt, lr)?;
            apply_bn_updates(&mut params, &bn)?;
            loss_sum += lv;
        }

        let train_loss = loss_sum / plan.len() as f64;
        let (val_loss, val_top1) = match val_ds {
            Some(v) => {
                let e = evaluate(model, &params, v, &norm, cfg.batch_size)?;
                (Some(e.loss), Some(e.top1))
            }
            None => (None, None),
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            step,
            lr,
            train_loss,
            val_loss,
            val_top1,
        };
        metrics.push(row.clone());
        if let Some(dir) = output_dir {
            write_metrics(&dir.join("metrics.csv"), &metrics)?;
            let ckpt = Checkpoint {
                config: model.clone(),
                epoch: epoch + 1,
                rng: RngState {
                    seed: cfg.seed,
                    next_epoch: epoch + 1,
                },
                params: params.clone(),
                optimizer: Some(opt.clone()),
                normalization: Some(norm.clone()),
            };
            ckpt.save(checkpoint_path(dir, epoch + 1))?;
        }
        on_epoch(&row);
    }

    Ok(TrainRun {
        params,
        optimizer: opt,
        normalization: norm,
        metrics,
    })
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("ckpt_epoch{epoch}.vtae"))
}

pub fn write_metrics(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.record()).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..ok.clone() },
            TrainConfig { data_fraction: 1.5, ..ok.clone() },
            TrainConfig { data_fraction: 0.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { warmup_epochs: Some(10), ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn lr_scales_with_batch() {
        let c = TrainConfig {
            batch_size: 128,
            base_lr: 4e-3,
            ..Default::default()
        };
        assert_eq!(c.effective_lr(), 1e-3);
    }

    #[test]
    fn argmax_takes_first_tie() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
    }
}
