//! Epoch loop with validation, learning-rate schedules and best-model selection.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{accumulate, fmt_metric, ConfusionCounts};
use crate::nn::{adamw_step, AdamW, Graph, ModelCheckpoint, ModelSpec, Tensor};
use crate::stitch::binarize;
use crate::tiler::{augment, AugmentOp, PatchRecord};
use crate::upscale::edsr::merge_grads;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Plateau,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr_init: f64,
    pub lr_min: f64,
    pub schedule: Schedule,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub freeze_encoder: bool,
    pub augment_ops: Vec<AugmentOp>,
    pub loss_iou_weight: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 1,
            seed: 0,
            lr_init: 2e-4,
            lr_min: 1e-7,
            schedule: Schedule::Cosine,
            plateau_patience: 5,
            plateau_factor: 0.2,
            freeze_encoder: true,
            augment_ops: Vec::new(),
            loss_iou_weight: 1.0,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    /// Defaults for the convolutional baseline (batch 8).
    pub fn baseline() -> Self {
        Self {
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_init) {
            return bad(format!("need 0 <= lr_min ({}) <= lr_init ({})", self.lr_min, self.lr_init));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} must be in (0, 1)", self.plateau_factor));
        }
        if self.loss_iou_weight < 0.0 || self.weight_decay < 0.0 {
            return bad("loss_iou_weight and weight_decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Cosine decay from `lr_init` at epoch 0 to `lr_min` at the last epoch.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    cosine_lr_between(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)
}

pub fn cosine_lr_between(epoch: usize, epochs: usize, lr_init: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr_init;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Minimum metric gain that counts as an improvement.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlateauState {
    pub lr: f64,
    pub best: f64,
    pub stalled: usize,
}

impl PlateauState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            best: f64::NEG_INFINITY,
            stalled: 0,
        }
    }
}

/// Reduce-on-plateau update for a higher-is-better metric. `NaN` never improves.
pub fn plateau_lr(state: PlateauState, metric: f64, cfg: &TrainConfig) -> (PlateauState, f64) {
    let mut s = state;
    if metric > s.best + PLATEAU_THRESHOLD {
        s.best = metric;
        s.stalled = 0;
    } else {
        s.stalled += 1;
        if s.stalled >= cfg.plateau_patience {
            s.lr = (s.lr * cfg.plateau_factor).max(cfg.lr_min);
            s.stalled = 0;
        }
    }
    (s, s.lr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

impl EpochLog {
    /// Same record with the timing field cleared, for reproducibility checks.
    pub fn without_time(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// A model-ready training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub size: usize,
    /// `[3, size, size]` normalized planes.
    pub input: Vec<f32>,
    /// `size * size` targets in {0, 1}.
    pub target: Vec<f32>,
}

impl Sample {
    pub fn from_patch(p: &PatchRecord) -> Result<Self> {
        let mask = p
            .mask
            .as_ref()
            .ok_or_else(|| Error::ConfigInvalid(format!("patch from `{}` has no mask", p.parent_region)))?;
        if p.image.width() != p.image.height() || mask.bands() != 1 || !mask.same_dims(&p.image) {
            return Err(Error::shape("training patches must be square with a single-band mask of the same size"));
        }
        let target = mask
            .band_f32(0)
            .into_iter()
            .map(|v| match v {
                0.0 => Ok(0.0),
                255.0 => Ok(1.0),
                other => Err(Error::NonBinaryInput(other as f64)),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            size: p.image.width(),
            input: p.image.to_model_input()?,
            target,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    /// Converts patch records; training patches are expanded by `augment_ops`.
    pub fn from_patches(train: &[PatchRecord], val: &[PatchRecord], ops: &[AugmentOp], seed: u64) -> Result<Self> {
        let mut out = TrainData::default();
        for (i, p) in train.iter().enumerate() {
            for a in augment(p, ops, seed.wrapping_add(i as u64))? {
                out.train.push(Sample::from_patch(&a)?);
            }
        }
        for p in val {
            out.val.push(Sample::from_patch(p)?);
        }
        Ok(out)
    }
}

pub struct TrainOutcome {
    pub logs: Vec<EpochLog>,
    pub best: ModelCheckpoint,
    pub last: ModelCheckpoint,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Loss and parameter gradients for one sample.
fn sample_grads(
    spec: &ModelSpec,
    ckpt: &ModelCheckpoint,
    s: &Sample,
    iou_weight: f64,
) -> Result<(f64, Vec<(String, Vec<f32>)>)> {
    let mut g = Graph::<f32>::new(ckpt);
    let x = g.leaf_f32(&[3, s.size, s.size], &s.input, false)?;
    let logits = spec.forward(&mut g, x)?;
    let loss = g.bce_soft_iou(logits, &s.target, iou_weight)?;
    let value = g.value(loss)[0] as f64;
    g.backward(loss)?;
    Ok((value, g.param_grads()))
}

/// Confusion counts of the model on `samples` at probability threshold 0.5.
pub fn evaluate(spec: &ModelSpec, ckpt: &ModelCheckpoint, samples: &[Sample]) -> Result<ConfusionCounts> {
    let parts: Vec<ConfusionCounts> = samples
        .par_iter()
        .map(|s| {
            let input = Tensor::new(vec![3, s.size, s.size], s.input.clone())?;
            let logits = spec.predict(ckpt, &input)?;
            let pred = binarize(&logits, 0.5)?;
            let truth_px = s.target.iter().map(|&t| if t > 0.5 { 255 } else { 0 }).collect();
            let truth = crate::raster::RasterGrid::from_u8(s.size, s.size, 1, truth_px)?;
            accumulate(&pred, &truth, ConfusionCounts::default())
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(ConfusionCounts::default(), |a, b| a + b))
}

/// Trains from a fresh seeded initialization.
pub fn train(spec: &ModelSpec, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let init = spec.init(cfg.seed, cfg.freeze_encoder)?;
    train_from(spec, init, data, cfg)
}

/// Trains starting from `init`.
pub fn train_from(spec: &ModelSpec, init: ModelCheckpoint, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyDataset("training".into()));
    }
    if data.val.is_empty() {
        return Err(Error::EmptyDataset("validation".into()));
    }
    let size = spec.image_size();
    if let Some(s) = data.train.iter().chain(&data.val).find(|s| s.size != size) {
        return Err(Error::shape(format!("model takes {size}px patches, dataset has {}px", s.size)));
    }
    let mut ckpt = init;
    ckpt.meta.seed = cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut plateau = PlateauState::new(cfg.lr_init);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, ModelCheckpoint)> = None;
    let started = Instant::now();
    for epoch in 0..cfg.epochs {
        let lr = match cfg.schedule {
            Schedule::Cosine => cosine_lr(epoch, cfg),
            Schedule::Plateau => plateau.lr,
        };
        let opt = AdamW {
            lr,
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<(f64, Vec<(String, Vec<f32>)>)> = batch
                .par_iter()
                .map(|&i| sample_grads(spec, &ckpt, &data.train[i], cfg.loss_iou_weight))
                .collect::<Result<_>>()?;
            let mut grads = Vec::new();
            let mut batch_loss = 0.0;
            for (l, g) in results {
                batch_loss += l;
                merge_grads(&mut grads, g);
            }
            let inv = 1.0 / batch.len() as f32;
            for (_, g) in grads.iter_mut() {
                g.iter_mut().for_each(|v| *v *= inv);
            }
            ckpt.accumulate_grads(grads.iter().map(|(n, g)| (n.as_str(), g.as_slice())))?;
            adamw_step(&mut ckpt, &opt)?;
            total += batch_loss;
            step_losses.push(batch_loss / batch.len() as f64);
        }
        let counts = evaluate(spec, &ckpt, &data.val)?;
        let scores = counts.scores();
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss: total / data.train.len() as f64,
            val_iou: scores.iou,
            val_f1: scores.f1,
            val_precision: scores.precision,
            val_recall: scores.recall,
            lr,
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} val iou {} lr {lr:.3e}",
            log.epoch,
            log.train_loss,
            fmt_metric(log.val_iou)
        );
        let metric = scores.iou.unwrap_or(f64::NAN);
        ckpt.meta.epoch = log.epoch as u64;
        ckpt.meta.val_metric = metric;
        if best.as_ref().is_none_or(|(b, _)| metric > *b || (b.is_nan() && !metric.is_nan())) {
            best = Some((metric, ckpt.clone()));
        }
        if cfg.schedule == Schedule::Plateau {
            plateau = plateau_lr(plateau, metric, cfg).0;
        }
        logs.push(log);
    }
    let best = best.expect("at least one epoch").1;
    Ok(TrainOutcome {
        logs,
        best,
        last: ckpt,
        step_losses,
    })
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_iou,val_f1,val_precision,val_recall,lr,wall_time";

pub fn format_epoch_csv(logs: &[EpochLog]) -> String {
    let mut out = String::from(EPOCH_CSV_HEADER);
    out.push('\n');
    for l in logs {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{},{},{:e},{:.3}",
            l.epoch,
            l.train_loss,
            fmt_metric(l.val_iou),
            fmt_metric(l.val_f1),
            fmt_metric(l.val_precision),
            fmt_metric(l.val_recall),
            l.lr,
            l.wall_time
        );
    }
    out
}

pub fn write_epoch_csv(logs: &[EpochLog], path: &Path) -> Result<()> {
    std::fs::write(path, format_epoch_csv(logs)).map_err(|e| Error::io(path, e))
}

pub fn parse_epoch_csv(text: &str) -> Result<Vec<EpochLog>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == EPOCH_CSV_HEADER => {}
        _ => return Err(Error::MalformedFile("epoch log header missing".into())),
    }
    let num = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::MalformedFile(format!("bad number `{s}` in epoch log")))
    };
    let opt = |s: &str| -> Result<Option<f64>> {
        let v = num(s)?;
        Ok(if v.is_nan() { None } else { Some(v) })
    };
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 8 {
            return Err(Error::MalformedFile(format!("bad epoch log line `{line}`")));
        }
        out.push(EpochLog {
            epoch: f[0]
                .trim()
                .parse()
                .map_err(|_| Error::MalformedFile(format!("bad epoch `{}`", f[0])))?,
            train_loss: num(f[1])?,
            val_iou: opt(f[2])?,
            val_f1: opt(f[3])?,
            val_precision: opt(f[4])?,
            val_recall: opt(f[5])?,
            lr: num(f[6])?,
            wall_time: num(f[7])?,
        });
    }
    Ok(out)
}

pub fn read_epoch_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_epoch_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg), 2e-4);
        assert!((cosine_lr(14, &cfg) - 1e-7).abs() < 1e-18);
        assert!((cosine_lr(7, &cfg) - (2e-4 + 1e-7) / 2.0).abs() < 1e-12);
        let one = TrainConfig { epochs: 1, ..cfg };
        assert_eq!(cosine_lr(0, &one), 2e-4);
    }

    #[test]
    fn plateau_reduces_after_patience() {
        let cfg = TrainConfig {
            lr_init: 1e-3,
            ..TrainConfig::default()
        };
        let (mut s, _) = plateau_lr(PlateauState::new(1e-3), 0.5, &cfg);
        let mut lr = 0.0;
        for _ in 0..5 {
            (s, lr) = plateau_lr(s, 0.5, &cfg);
        }
        assert!((lr - 2e-4).abs() < 1e-15);
    }

    #[test]
    fn plateau_keeps_lr_while_improving() {
        let cfg = TrainConfig::default();
        let mut s = PlateauState::new(2e-4);
        for i in 0..20 {
            let (n, lr) = plateau_lr(s, i as f64 * 0.01, &cfg);
            s = n;
            assert_eq!(lr, 2e-4);
        }
    }

    #[test]
    fn plateau_floors_at_lr_min() {
        let cfg = TrainConfig {
            plateau_patience: 1,
            ..TrainConfig::default()
        };
        let mut s = PlateauState::new(2e-4);
        for _ in 0..50 {
            s = plateau_lr(s, 0.1, &cfg).0;
        }
        assert_eq!(s.lr, 1e-7);
    }

    #[test]
    fn epoch_csv_round_trip() {
        let logs = vec![
            EpochLog {
                epoch: 1,
                train_loss: 0.5,
                val_iou: Some(0.25),
                val_f1: Some(0.4),
                val_precision: None,
                val_recall: Some(1.0),
                lr: 2e-4,
                wall_time: 1.5,
            },
            EpochLog {
                epoch: 2,
                train_loss: 0.25,
                val_iou: None,
                val_f1: None,
                val_precision: None,
                val_recall: None,
                lr: 1e-7,
                wall_time: 3.0,
            },
        ];
        assert_eq!(parse_epoch_csv(&format_epoch_csv(&logs)).unwrap(), logs);
    }

    fn toy_data(n: usize) -> TrainData {
        let sample = |k: usize| {
            let target: Vec<f32> = (0..64).map(|i| ((i / 8 + i % 8 + k) % 3 == 0) as u8 as f32).collect();
            let input = (0..3).flat_map(|_| target.iter().map(|t| t - 0.5)).collect();
            Sample { size: 8, input, target }
        };
        TrainData {
            train: (0..n).map(sample).collect(),
            val: vec![sample(n)],
        }
    }

    fn toy_spec() -> ModelSpec {
        ModelSpec::Unet(crate::nn::UnetConfig {
            image_size: 8,
            base_channels: 2,
        })
    }

    #[test]
    fn single_epoch_best_is_last() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::baseline()
        };
        let out = train(&toy_spec(), &toy_data(3), &cfg).unwrap();
        assert_eq!(out.logs.len(), 1);
        assert_eq!(out.best, out.last);
        assert_eq!(out.step_losses.len(), 2);
        assert_eq!(out.last.meta.epoch, 1);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            lr_init: 1e-2,
            ..TrainConfig::baseline()
        };
        let a = train(&toy_spec(), &toy_data(4), &cfg).unwrap();
        let b = train(&toy_spec(), &toy_data(4), &cfg).unwrap();
        assert_eq!(a.step_losses, b.step_losses);
        assert_eq!(a.last, b.last);
        let strip = |l: &[EpochLog]| l.iter().map(EpochLog::without_time).collect::<Vec<_>>();
        assert_eq!(strip(&a.logs), strip(&b.logs));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        let mut d = toy_data(1);
        d.train.clear();
        assert!(matches!(
            train(&toy_spec(), &d, &TrainConfig::baseline()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_min: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { plateau_factor: 1.0, ..Default::default() }.validate().is_err());
    }
}
