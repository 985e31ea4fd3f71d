//! Image classification training and evaluation.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::cifar::ClassSample;
use crate::data::stack_images;
use crate::error::{Error, Result};
use crate::nn::cifar::CifarNet;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tape::SyncCounter;
use crate::tensor::{Real, Tensor};
use crate::train::seg::argmax_classes;
use crate::train::{diverged, shuffled, stream_rng, ConfusionMatrix, Convention, CsvLog, EpochRecord, LossBreakdown, Sgd, Stream, TrainConfig};

pub const CROP_PAD: usize = 4;

/// Random horizontal flip and a random shift within a zero border of
/// [`CROP_PAD`] pixels.
pub fn flip_and_shift<T: Real>(image: &Tensor<T>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let flip = rng.random::<bool>();
    let pad = CROP_PAD as i64;
    let dy = rng.random_range(-pad..=pad);
    let dx = rng.random_range(-pad..=pad);
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let sy = y as i64 + dy;
        let mut sx = x as i64 + dx;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            return T::zero();
        }
        if flip {
            sx = w as i64 - 1 - sx;
        }
        image.data()[(ch * h + sy as usize) * w + sx as usize]
    })
}

pub fn evaluate_classifier<T: Real>(
    net: &CifarNet,
    store: &mut ParamStore<T>,
    samples: &[ClassSample<T>],
    batch: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(net.config.num_classes);
    for chunk in samples.chunks(batch.max(1)) {
        let images = stack_images(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let mut f = Forward::new(store, Mode::Eval).without_grads();
        let x = f.input(images);
        let logits = net.forward(&mut f, x)?;
        let (n, k) = (chunk.len(), net.config.num_classes);
        let scores = f.value(logits).clone().reshape(&[n, k, 1, 1])?;
        let gt: Vec<i32> = chunk.iter().map(|s| s.label as i32).collect();
        cm.add(&argmax_classes(&scores), &gt, -1)?;
    }
    Ok(cm)
}

pub fn train_classifier<T: Real>(
    net: &CifarNet,
    store: &mut ParamStore<T>,
    train: &[ClassSample<T>],
    test: &[ClassSample<T>],
    cfg: &TrainConfig,
    augment: bool,
    csv: Option<&mut dyn Write>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate(train.len())?;
    if test.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let ipe = cfg.iters_per_epoch(train.len());
    let total_iters = cfg.epochs * ipe;
    let counter = Arc::new(SyncCounter::new());
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = CsvLog::new(csv);
    let mut records = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();
    let k = net.config.num_classes;
    for epoch in 0..cfg.epochs {
        let order = shuffled(train.len(), &mut stream_rng(cfg.seed, Stream::Shuffle, epoch as u64, 0));
        let mut loss_sum = 0.0;
        let mut lr = cfg.base_lr;
        for it in 0..ipe {
            let global = epoch * ipe + it;
            lr = cfg.schedule.lr(cfg.base_lr, global, total_iters, epoch, cfg.epochs)?;
            let idx = &order[it * cfg.batch_size..(it + 1) * cfg.batch_size];
            let images: Vec<Tensor<T>> = idx
                .iter()
                .map(|&i| {
                    if augment {
                        flip_and_shift(&train[i].image, &mut stream_rng(cfg.seed, Stream::Augment, epoch as u64, i as u64))
                    } else {
                        train[i].image.clone()
                    }
                })
                .collect();
            let images = stack_images(&images.iter().collect::<Vec<_>>())?;
            let labels: Vec<i32> = idx.iter().map(|&i| train[i].label as i32).collect();
            let mut smoothing = stream_rng(cfg.seed, Stream::Smoothing, global as u64, 0);
            let mut f = Forward::new(store, Mode::Train)
                .with_sync_counter(counter.clone())
                .with_devices(cfg.devices)
                .with_rng(&mut smoothing);
            let x = f.input(images);
            let logits = net.forward(&mut f, x)?;
            let logits = f.tape.reshape(logits, &[idx.len(), k, 1, 1])?;
            let loss = f.tape.cross_entropy_2d(logits, &labels, -1)?;
            let value = f.tape.value(loss).item().as_f64();
            if !value.is_finite() {
                drop(f);
                let br = LossBreakdown { seg: value, se: 0.0, total: value };
                return Err(diverged(cfg, store, epoch, global, lr, &br));
            }
            let mut grads = f.tape.backward(loss)?;
            let pg = f.param_grads(&mut grads);
            drop(f);
            opt.step(store, &pg, lr)?;
            loss_sum += value;
        }
        let cm = evaluate_classifier(net, store, test, cfg.eval_batch)?;
        let mean = loss_sum / ipe as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            iter: (epoch + 1) * ipe,
            lr,
            losses: LossBreakdown { seg: mean, se: 0.0, total: mean },
            pix_acc: cm.pixel_accuracy().ok_or(Error::EmptyEvaluation)?,
            miou: cm.mean_iou(Convention::WithBackground).ok_or(Error::EmptyEvaluation)?,
            wall_s: if cfg.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
            sync_events: counter.get(),
            confusion: cm,
        };
        log.row(&rec)?;
        records.push(rec);
    }
    Ok(records)
}
