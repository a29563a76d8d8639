use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use csicount_nn::Mode;

use super::checkpoint::{checkpoint_bytes, load_checkpoint, restore_from_bytes, save_checkpoint};
use super::optim::{clip_grad_norm, AdamW};
use super::schedule::{Granularity, LrSchedule};
use crate::data::SampleSource;
use crate::eval::{evaluate, predict_images, MetricReport};
use crate::labels::{derive_counts, encode_identity_dependent, SlotLabels, ACTIVITIES, CLASSES, USERS};
use crate::loss::{count_loss, focal_loss};
use crate::model::{stack_images, Model, ParamGroup, Task};
use crate::transform::{preprocess, preprocess_eval, TransformConfig};
use crate::{derived_rng, Error, Result, Scalar};

/// Which checkpoint the caller gets back.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Best validation metric.
    Best,
    /// Weights after the final step.
    Last,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_max_norm: f64,
    pub lr_projection_peak: f64,
    pub lr_backbone_head_peak: f64,
    pub warmup_fraction: f64,
    pub schedule_granularity: Granularity,
    pub focal_gamma: f64,
    /// Fraction of the training ids held out for model selection.
    pub validation_fraction: f64,
    pub selection: Selection,
    /// Macro averages include the ABSENT class.
    pub macro_include_absent: bool,
    /// Re-estimate batch-norm running statistics over the training set
    /// (eval-mode preprocessing) at the end of every epoch.
    pub recalibrate_norm_stats: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.clip_max_norm > 0.0 && self.lr_projection_peak > 0.0 && self.lr_backbone_head_peak > 0.0) {
            return bad("clip_max_norm and learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.focal_gamma >= 0.0) {
            return bad("weight_decay and focal_gamma must be non-negative");
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return bad("warmup_fraction must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    fn schedules(&self, steps_per_epoch: usize) -> Result<[LrSchedule; 2]> {
        let total = match self.schedule_granularity {
            Granularity::Step => self.epochs * steps_per_epoch,
            Granularity::Epoch => self.epochs,
        };
        Ok([
            LrSchedule::new(total, self.warmup_fraction, self.lr_projection_peak)?,
            LrSchedule::new(total, self.warmup_fraction, self.lr_backbone_head_peak)?,
        ])
    }
}

/// Deterministic hold-out of `fraction` of `ids` for validation.
pub fn validation_split(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let n_val = (fraction * ids.len() as f64).round() as usize;
    if n_val == 0 || n_val >= ids.len() {
        return (ids.to_vec(), Vec::new());
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut derived_rng(seed, &[4]));
    let mut val: Vec<usize> = order[..n_val].to_vec();
    val.sort_unstable();
    let mut is_val = vec![false; ids.len()];
    val.iter().for_each(|&i| is_val[i] = true);
    let train = (0..ids.len()).filter(|&i| !is_val[i]).map(|i| ids[i].clone()).collect();
    let val = val.into_iter().map(|i| ids[i].clone()).collect();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_projection: f64,
    pub lr_backbone_head: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Primary validation metric (macro-F1 or MAE), when a validation set exists.
    pub validation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
    pub last_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    /// The model returned holds these weights.
    pub selected: Option<Selection>,
}

/// Where checkpoints go and how to resume.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Receives `last.safetensors`, `best.safetensors` and, on halts,
    /// `resume.safetensors`.
    pub checkpoint_dir: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Stop after this many completed steps and write a resume checkpoint.
    pub halt_after: Option<usize>,
    /// String metadata copied into every checkpoint.
    pub metadata: BTreeMap<String, String>,
}

const LOG_KEY: &str = "train_log";

/// The training loop. `train_ids` are shuffled per epoch with a seeded
/// permutation; `val_ids` (possibly empty) drive model selection.
#[allow(clippy::too_many_arguments)]
pub fn fit<T: Scalar>(
    model: &mut Model<T>,
    source: &dyn SampleSource<T>,
    train_ids: &[String],
    val_ids: &[String],
    cfg: &TrainConfig,
    transform: &TransformConfig,
    opts: &FitOptions,
) -> Result<TrainLog> {
    cfg.validate()?;
    transform.validate()?;
    if train_ids.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let n = train_ids.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    let schedules = cfg.schedules(steps_per_epoch)?;
    let mut optimizer = AdamW::new(cfg.weight_decay);
    let mut log = TrainLog::default();
    let mut start = 0;
    if let Some(path) = &opts.resume_from {
        let meta = load_checkpoint(path, model, Some(&mut optimizer))?;
        start = meta.step;
        if let Some(json) = meta.extra.get(LOG_KEY) {
            log = serde_json::from_str(json).map_err(|e| Error::Checkpoint {
                path: path.clone(),
                message: format!("bad training log: {e}"),
            })?;
        }
    }

    let mut val_cache: Option<ValidationCache<T>> = None;
    let mut best_bytes: Option<Vec<u8>> = None;
    let mut order: Vec<usize> = Vec::new();
    for step in start..total_steps {
        let epoch = step / steps_per_epoch;
        let b = step % steps_per_epoch;
        if b == 0 || step == start {
            order = (0..n).collect();
            order.shuffle(&mut derived_rng(cfg.seed, &[1, epoch as u64]));
        }
        let batch = &order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n)];

        let mut images = Vec::with_capacity(batch.len());
        let mut annotations = Vec::with_capacity(batch.len());
        for (j, &i) in batch.iter().enumerate() {
            let s = source.load(&train_ids[i])?;
            let mut rng = derived_rng(cfg.seed, &[2, step as u64, j as u64]);
            images.push(preprocess(s.amplitude.view(), transform, Some(&mut rng))?);
            annotations.push(s.annotation);
        }
        let mode = Mode::Train {
            seed: derived_rng(cfg.seed, &[3, step as u64]).random(),
        };
        model.zero_grad();
        let outputs = model.forward(stack_images(&images), mode);
        let (loss, grad) = match model.task() {
            Task::IdentityDependent => {
                let mut targets = Array3::<T>::zeros((batch.len(), USERS, CLASSES));
                for (k, a) in annotations.iter().enumerate() {
                    targets.index_axis_mut(ndarray::Axis(0), k).assign(&encode_identity_dependent::<T>(a));
                }
                let logits = crate::model::slot_logits(&outputs);
                let out = focal_loss(logits.view(), targets.view(), cfg.focal_gamma)?;
                (out.value, out.grad.into_shape_with_order(outputs.raw_dim()).expect("N×60"))
            }
            Task::IdentityAgnostic => {
                let targets = Array2::from_shape_fn((batch.len(), ACTIVITIES), |(k, c)| {
                    T::lit(derive_counts(&annotations[k]).0[c] as f64)
                });
                let out = count_loss(outputs.view(), targets.view())?;
                (out.value, out.grad)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, epoch, loss });
        }
        model.backward(grad);
        let grad_norm = clip_grad_norm(model, cfg.clip_max_norm);
        let position = match cfg.schedule_granularity {
            Granularity::Step => step,
            Granularity::Epoch => epoch,
        };
        let lrs = [schedules[0].lr_at(position)?, schedules[1].lr_at(position)?];
        optimizer.step(model, |g| match g {
            ParamGroup::Projection => lrs[0],
            ParamGroup::BackboneHead => lrs[1],
        });
        log.steps.push(StepRecord {
            step,
            epoch,
            lr_projection: lrs[0],
            lr_backbone_head: lrs[1],
            loss,
            grad_norm,
        });

        if b + 1 == steps_per_epoch {
            if cfg.recalibrate_norm_stats {
                recalibrate_norm_stats(model, source, train_ids, transform, cfg.batch_size)?;
            }
            let losses: Vec<f64> = log.steps.iter().filter(|r| r.epoch == epoch).map(|r| r.loss).collect();
            let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
            let validation = if val_ids.is_empty() {
                None
            } else {
                let cache = match &val_cache {
                    Some(c) => c,
                    None => val_cache.insert(ValidationCache::build(source, val_ids, transform)?),
                };
                Some(validate(model, cache, cfg)?)
            };
            log::info!("epoch {epoch}: train loss {train_loss:.5}, validation {validation:?}");
            log.epochs.push(EpochRecord {
                epoch,
                train_loss,
                validation,
            });
            if let Some(v) = validation {
                let improved = log
                    .best_validation
                    .is_none_or(|best| MetricReport::better(model.task(), v, best));
                if improved {
                    log.best_validation = Some(v);
                    log.best_epoch = Some(epoch);
                    let bytes = checkpoint_bytes(model, None, step + 1, epoch, &opts.metadata)?;
                    if let Some(dir) = &opts.checkpoint_dir {
                        let path = dir.join("best.safetensors");
                        std::fs::create_dir_all(dir).map_err(crate::error::io_err(dir))?;
                        std::fs::write(&path, &bytes).map_err(crate::error::io_err(&path))?;
                        log.best_checkpoint = Some(path);
                    }
                    best_bytes = Some(bytes);
                }
            }
        }

        if opts.halt_after == Some(step + 1) && step + 1 < total_steps {
            let dir = opts
                .checkpoint_dir
                .as_ref()
                .ok_or_else(|| Error::Config("halting requires a checkpoint directory".into()))?;
            let mut meta = opts.metadata.clone();
            meta.insert(LOG_KEY.into(), serde_json::to_string(&log).expect("log serializes"));
            save_checkpoint(&dir.join("resume.safetensors"), model, Some(&optimizer), step + 1, epoch, &meta)?;
            return Ok(log);
        }
    }

    if let Some(dir) = &opts.checkpoint_dir {
        let path = dir.join("last.safetensors");
        let mut meta = opts.metadata.clone();
        meta.insert(LOG_KEY.into(), serde_json::to_string(&log).expect("log serializes"));
        save_checkpoint(&path, model, Some(&optimizer), total_steps, cfg.epochs.saturating_sub(1), &meta)?;
        log.last_checkpoint = Some(path);
    }
    log.selected = Some(Selection::Last);
    if cfg.selection == Selection::Best {
        match best_bytes {
            Some(bytes) => {
                let path = log.best_checkpoint.clone().unwrap_or_else(|| PathBuf::from("<best>"));
                restore_from_bytes(&path, bytes, model, None)?;
                log.selected = Some(Selection::Best);
            }
            None if log.best_checkpoint.is_some() => {
                let path = log.best_checkpoint.clone().expect("checked");
                load_checkpoint(&path, model, None)?;
                log.selected = Some(Selection::Best);
            }
            None => log::warn!("no validation set; returning the last weights"),
        }
    }
    Ok(log)
}

/// Replaces batch-norm running statistics by their cumulative average over
/// `ids` in fixed batches of `batch_size`. Parameters are untouched.
pub fn recalibrate_norm_stats<T: Scalar>(
    model: &mut Model<T>,
    source: &dyn SampleSource<T>,
    ids: &[String],
    transform: &TransformConfig,
    batch_size: usize,
) -> Result<()> {
    for (batch, chunk) in ids.chunks(batch_size.max(1)).enumerate() {
        let images = chunk
            .iter()
            .map(|id| preprocess_eval(source.load(id)?.amplitude.view(), transform))
            .collect::<Result<Vec<_>>>()?;
        model.features(stack_images(&images), Mode::Calibrate { batch });
    }
    Ok(())
}

fn validate<T: Scalar>(model: &mut Model<T>, cache: &ValidationCache<T>, cfg: &TrainConfig) -> Result<f64> {
    let p = predict_images(model, &cache.images, &cache.annotations, &cache.ids, cfg.batch_size);
    Ok(evaluate(model.task(), &p, cfg.macro_include_absent)?.primary())
}

/// Eval-mode images of the validation samples, prepared once.
struct ValidationCache<T> {
    ids: Vec<String>,
    images: Vec<Array2<T>>,
    annotations: Vec<SlotLabels>,
}

impl<T: Scalar> ValidationCache<T> {
    fn build(source: &dyn SampleSource<T>, ids: &[String], transform: &TransformConfig) -> Result<Self> {
        let mut images = Vec::with_capacity(ids.len());
        let mut annotations = Vec::with_capacity(ids.len());
        for id in ids {
            let s = source.load(id)?;
            images.push(preprocess_eval(s.amplitude.view(), transform)?);
            annotations.push(s.annotation);
        }
        Ok(ValidationCache {
            ids: ids.to_vec(),
            images,
            annotations,
        })
    }
}
