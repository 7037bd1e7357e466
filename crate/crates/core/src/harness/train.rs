//! The training loop and its metrics log.
//!
//! The log has one record per line, `key=value` pairs separated by spaces:
//!
//! ```text
//! kind=step step=0 epoch=0 lr=0 loss=1.3862944
//! kind=epoch epoch=0 step=63 lr=0.0396 loss=1.37 accuracy=0.4125
//! ```
//!
//! `step` records carry the learning rate used for that update and the batch
//! loss; `epoch` records carry the mean training loss of the epoch and the
//! test accuracy after it. Floats are printed in shortest round-trip form.

use std::fmt;
use std::fs;
use std::path::Path;

use super::config::RunConfig;
use super::dataset::{Dataset, Sample};
use super::optim::{clip_global_norm, cosine_lr, sgd_momentum_step};
use crate::checkpoint::save_model;
use crate::error::{Error, Result};
use crate::init::random_model_with;
use crate::models::{Mode, ViViT};
use crate::regularizers::{augment_clip, label_smooth, mix, one_hot};
use crate::tensor::{RngState, Scalar, Tape, Tensor};
use crate::tokenizer::VideoClip;

const SHUFFLE_STREAM: u64 = 1;
const BATCH_STREAM: u64 = 2;
const EVAL_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Record {
    Step { step: usize, epoch: usize, lr: f64, loss: f64 },
    Epoch { epoch: usize, step: usize, lr: f64, loss: f64, accuracy: f64 },
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Record::Step { step, epoch, lr, loss } => {
                write!(f, "kind=step step={step} epoch={epoch} lr={lr} loss={loss}")
            }
            Record::Epoch { epoch, step, lr, loss, accuracy } => write!(
                f,
                "kind=epoch epoch={epoch} step={step} lr={lr} loss={loss} accuracy={accuracy}"
            ),
        }
    }
}

impl Record {
    pub fn parse(line: &str) -> Result<Record> {
        let bad = || Error::invalid("metrics log", format!("malformed record `{line}`"));
        let mut kind = None;
        let (mut step, mut epoch, mut lr, mut loss, mut acc) = (None, None, None, None, None);
        for pair in line.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(bad)?;
            match k {
                "kind" => kind = Some(v),
                "step" => step = Some(v.parse().map_err(|_| bad())?),
                "epoch" => epoch = Some(v.parse().map_err(|_| bad())?),
                "lr" => lr = Some(v.parse().map_err(|_| bad())?),
                "loss" => loss = Some(v.parse().map_err(|_| bad())?),
                "accuracy" => acc = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        match (kind, step, epoch, lr, loss, acc) {
            (Some("step"), Some(step), Some(epoch), Some(lr), Some(loss), None) => {
                Ok(Record::Step { step, epoch, lr, loss })
            }
            (Some("epoch"), Some(step), Some(epoch), Some(lr), Some(loss), Some(accuracy)) => {
                Ok(Record::Epoch { epoch, step, lr, loss, accuracy })
            }
            _ => Err(bad()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub records: Vec<Record>,
}

impl MetricsLog {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(Record::parse)
            .collect::<Result<_>>()?;
        Ok(MetricsLog { records })
    }

    /// `(epoch, mean loss, accuracy)` of each finished epoch.
    pub fn epochs(&self) -> Vec<(usize, f64, f64)> {
        self.records
            .iter()
            .filter_map(|r| match *r {
                Record::Epoch { epoch, loss, accuracy, .. } => Some((epoch, loss, accuracy)),
                _ => None,
            })
            .collect()
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs().last().map(|e| e.2)
    }
}

pub struct TrainOutcome<T> {
    pub model: ViViT<T>,
    pub log: MetricsLog,
}

/// Schedule lengths in optimiser steps: `(per_epoch, total, warmup)`.
pub fn schedule_steps(cfg: &RunConfig, num_train: usize) -> (usize, usize, usize) {
    let per_epoch = num_train.div_ceil(cfg.train.batch_size);
    let total = per_epoch * cfg.train.epochs;
    let warmup = (cfg.train.warmup_epochs * per_epoch as f64).round() as usize;
    (per_epoch, total, warmup)
}

/// Soft targets of a batch after label smoothing and mixup; mixup pairs each
/// sample with the one at the mirrored batch position and one `λ` per batch.
fn batch_inputs(
    cfg: &RunConfig,
    batch: &[&Sample],
    classes: usize,
    rng: &mut RngState,
) -> Result<(Vec<VideoClip>, Vec<Vec<f64>>)> {
    let reg = &cfg.regularizers;
    let mut clips = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (i, s) in batch.iter().enumerate() {
        let mut sample_rng = rng.fork(i as u64);
        clips.push(augment_clip(&s.clip, reg, &mut sample_rng)?);
        let y = one_hot(s.label, classes);
        targets.push(if reg.label_smoothing > 0.0 {
            label_smooth(&y, reg.label_smoothing)?
        } else {
            y
        });
    }
    if reg.mixup_alpha > 0.0 && batch.len() > 1 {
        let lambda = rng.beta(reg.mixup_alpha, reg.mixup_alpha);
        let n = clips.len();
        let mut mixed_clips = Vec::with_capacity(n);
        let mut mixed_targets = Vec::with_capacity(n);
        for i in 0..n {
            let j = n - 1 - i;
            let (c, y) = mix(&clips[i], &targets[i], &clips[j], &targets[j], lambda)?;
            mixed_clips.push(c);
            mixed_targets.push(y);
        }
        return Ok((mixed_clips, mixed_targets));
    }
    Ok((clips, targets))
}

/// Fraction of `samples` whose first-head argmax equals the label.
pub fn evaluate<T: Scalar>(model: &ViViT<T>, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(EVAL_BATCH) {
        let clips: Vec<VideoClip> = chunk.iter().map(|s| s.clip.clone()).collect();
        let logits = model.predict(&clips)?;
        let k = logits[0].shape()[1];
        for (row, s) in logits[0].data().chunks(k).zip(chunk) {
            if argmax(row) == s.label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Train a fresh model on `data`.
pub fn train<T: Scalar>(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = random_model_with::<T>(&cfg.model, cfg.train.seed, &cfg.init)?;
    train_model(cfg, data, model)
}

/// Train `model` in place of a fresh one.
pub fn train_model<T: Scalar>(cfg: &RunConfig, data: &Dataset, mut model: ViViT<T>) -> Result<TrainOutcome<T>> {
    let tc = &cfg.train;
    let classes = &model.config().num_classes;
    if let Some(&k) = classes.iter().find(|&&k| k != super::dataset::NUM_CLASSES) {
        return Err(Error::Config(format!("head with {k} classes cannot fit the motion labels")));
    }
    let classes = classes[0];
    let (per_epoch, total, warmup) = schedule_steps(cfg, data.train.len());
    let root = RngState::new(tc.seed);
    let mut velocity: Vec<Tensor<T>> = model.params().values().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
    let mut log = MetricsLog::default();
    let mut step = 0usize;
    let mut lr = 0.0;

    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        root.fork(SHUFFLE_STREAM).fork(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(tc.batch_size) {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &data.train[i]).collect();
            let mut rng = root.fork(BATCH_STREAM).fork(step as u64);
            let (clips, targets) = batch_inputs(cfg, &batch, classes, &mut rng)?;
            let flat: Vec<f64> = targets.into_iter().flatten().collect();
            let targets = Tensor::<T>::from_f64([batch.len(), classes], &flat)?;

            let non_finite = |loss: f64| Error::NonFiniteLoss { step, loss };
            let nan_on_overflow = |e: Error| match e {
                Error::NonFinite { .. } => non_finite(f64::NAN),
                other => other,
            };
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut drop_rng = rng.fork(u64::MAX);
            let mode = Mode::Train {
                drop_rate: cfg.regularizers.drop_rate,
                rng: &mut drop_rng,
            };
            let logits = model.forward(&mut tape, &bound, &clips, mode).map_err(nan_on_overflow)?;
            let mut loss = None;
            for head in logits {
                let l = tape.soft_cross_entropy(head, &targets).map_err(nan_on_overflow)?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let loss = loss.expect("at least one head");
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(non_finite(value));
            }
            let grads = tape.backward(loss).map_err(nan_on_overflow)?;

            lr = cosine_lr(step, total, warmup, tc.base_lr);
            let zero = |p: &Tensor<T>| Tensor::zeros(p.shape().to_vec());
            let mut grad_list: Vec<Tensor<T>> = bound
                .vars
                .iter()
                .map(|(name, v)| grads.get(*v).cloned().unwrap_or_else(|| zero(&model.params()[name])))
                .collect();
            if let Some(max_norm) = tc.clip_grad_norm {
                clip_global_norm(&mut grad_list, max_norm);
            }
            let grad_refs: Vec<&Tensor<T>> = grad_list.iter().collect();
            let mut params: Vec<&mut Tensor<T>> = model.params_mut().map(|(_, p)| p).collect();
            sgd_momentum_step(&mut params, &grad_refs, &mut velocity, lr, tc.momentum)?;

            log.records.push(Record::Step { step, epoch, lr, loss: value });
            epoch_loss += value;
            step += 1;
        }
        let accuracy = evaluate(&model, &data.test)?;
        log.records.push(Record::Epoch {
            epoch,
            step,
            lr,
            loss: epoch_loss / per_epoch as f64,
            accuracy,
        });
        if tc.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    Ok(TrainOutcome { model, log })
}

/// Train and write `model.tsv` (with `model.bin`, `model.toml`),
/// `metrics.log` and `config.toml` into `out`.
pub fn train_to_dir(cfg: &RunConfig, data: &Dataset, out: &Path) -> Result<TrainOutcome<f32>> {
    let outcome = train::<f32>(cfg, data)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_model(&outcome.model, &out.join("model.tsv"))?;
    let log = out.join("metrics.log");
    fs::write(&log, outcome.log.to_text()).map_err(|e| Error::io(&log, e))?;
    let config = out.join("config.toml");
    fs::write(&config, cfg.to_toml()?).map_err(|e| Error::io(&config, e))?;
    Ok(outcome)
}
