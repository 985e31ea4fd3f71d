//! Segmentation training and evaluation.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use crate::context::presence_batch;
use crate::data::{stack_images, LabelMask, SegSample};
use crate::error::{Error, Result};
use crate::nn::seg::SegNet;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tape::SyncCounter;
use crate::tensor::{Real, Tensor};
use crate::train::{
    augment, diverged, shuffled, stream_rng, total_loss, AugmentConfig, ConfusionMatrix, Convention, CsvLog, EpochRecord,
    LossBreakdown, Sgd, Stream, TrainConfig,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SegTrainSettings {
    pub train: TrainConfig,
    pub augment: Option<AugmentConfig>,
    pub ignore_label: i32,
    pub convention: Convention,
}

/// Per-pixel argmax over the class axis of `[N, Cls, H, W]`.
pub fn argmax_classes<T: Real>(scores: &Tensor<T>) -> Vec<i32> {
    let (n, c) = (scores.dim(0), scores.dim(1));
    let plane: usize = scores.shape()[2..].iter().product();
    let d = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        for p in 0..plane {
            let mut best = 0;
            for k in 1..c {
                if d[(b * c + k) * plane + p] > d[(b * c + best) * plane + p] {
                    best = k;
                }
            }
            out.push(best as i32);
        }
    }
    out
}

/// Confusion matrix of eval-mode predictions.
pub fn evaluate_seg<T: Real>(
    net: &SegNet,
    store: &mut ParamStore<T>,
    samples: &[SegSample<T>],
    ignore_label: i32,
    batch: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    for chunk in samples.chunks(batch.max(1)) {
        let images = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let mut f = Forward::new(store, Mode::Eval).without_grads();
        let x = f.input(images);
        let out = net.forward(&mut f, x)?;
        let pred = argmax_classes(f.value(out.logits));
        let gt: Vec<i32> = chunk.iter().flat_map(|s| s.mask.labels.iter().copied()).collect();
        cm.add(&pred, &gt, ignore_label)?;
    }
    Ok(cm)
}

pub fn train_seg<T: Real>(
    net: &SegNet,
    store: &mut ParamStore<T>,
    train: &[SegSample<T>],
    val: &[SegSample<T>],
    settings: &SegTrainSettings,
    csv: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    let cfg = &settings.train;
    cfg.validate(train.len())?;
    if val.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if let Some(a) = &settings.augment {
        a.validate()?;
    }
    let num_classes = net.config.num_classes;
    let alpha = net.config.se_weight;
    let ipe = cfg.iters_per_epoch(train.len());
    let total_iters = cfg.epochs * ipe;
    let counter = Arc::new(SyncCounter::new());
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = CsvLog::new(csv);
    let mut records = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let mut sums = LossBreakdown::default();
        let mut lr = cfg.base_lr;
        for it in 0..ipe {
            let global = epoch * ipe + it;
            lr = cfg.schedule.lr(cfg.base_lr, global, total_iters, epoch, cfg.epochs)?;
            let batch = order[it * cfg.batch_size..(it + 1) * cfg.batch_size]
                .iter()
                .map(|&i| match &settings.augment {
                    Some(a) => augment(&train[i], a, &mut stream_rng(cfg.seed, Stream::Augment, epoch as u64, i as u64)),
                    None => Ok(train[i].clone()),
                })
                .collect::<Result<Vec<_>>>()?;
            let images = stack_images(&batch.iter().map(|s| &s.image).collect::<Vec<_>>())?;
            let labels: Vec<i32> = batch.iter().flat_map(|s| s.mask.labels.iter().copied()).collect();
            let masks: Vec<&LabelMask> = batch.iter().map(|s| &s.mask).collect();
            let presence = presence_batch::<T>(&masks, num_classes, settings.ignore_label)?;
            let mut smoothing = stream_rng(cfg.seed, Stream::Smoothing, global as u64, 0);
            let mut f = Forward::new(store, Mode::Train)
                .with_sync_counter(counter.clone())
                .with_devices(cfg.devices)
                .with_rng(&mut smoothing);
            let x = f.input(images);
            let out = net.forward(&mut f, x)?;
            let (loss, br) = total_loss(&mut f.tape, out.logits, &labels, &out.se_probs(), &presence, alpha, settings.ignore_label)?;
            if !br.total.is_finite() {
                drop(f);
                return Err(diverged(cfg, store, epoch, global, lr, &br));
            }
            let mut grads = f.tape.backward(loss)?;
            let pg = f.param_grads(&mut grads);
            drop(f);
            opt.step(store, &pg, lr)?;
            sums.seg += br.seg;
            sums.se += br.se;
            sums.total += br.total;
        }
        let cm = evaluate_seg(net, store, val, settings.ignore_label, cfg.eval_batch)?;
        let k = ipe as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            iter: (epoch + 1) * ipe,
            lr,
            losses: LossBreakdown { seg: sums.seg / k, se: sums.se / k, total: sums.total / k },
            pix_acc: cm.pixel_accuracy().ok_or(Error::EmptyEvaluation)?,
            miou: cm.mean_iou(settings.convention).ok_or(Error::EmptyEvaluation)?,
            wall_s: if cfg.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
            sync_events: counter.get(),
            confusion: cm,
        };
        log.row(&rec)?;
        records.push(rec);
    }
    Ok(records)
}
