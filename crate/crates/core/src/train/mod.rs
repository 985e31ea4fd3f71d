//! Optimization, schedules, augmentation, loss composition, metrics and the
//! training loops.

pub mod augment;
pub mod classify;
pub mod metrics;
pub mod schedule;
pub mod seg;
pub mod sgd;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

pub use augment::{augment, augment_with, AugmentConfig, AugmentDraw};
pub use metrics::{metrics, ConfusionMatrix, Convention, MetricsReport};
pub use schedule::{cosine_lr, poly_lr, Schedule};
pub use sgd::Sgd;

/// Named random streams; each purpose draws from its own generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Augment = 3,
    Smoothing = 4,
    Data = 5,
}

/// Generator keyed by `(seed, stream, a, b)`, e.g. `(epoch, sample index)`
/// for augmentation, so results never depend on visiting order.
pub fn stream_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(stream as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..32].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Seeded Fisher-Yates permutation of `0..n`.
pub fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    use rand::Rng;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg: f64,
    /// Sum of presence losses over branches, before weighting.
    pub se: f64,
    pub total: f64,
}

/// `CE(logits, target) + alpha * sum_b BCE(se_probs[b], presence)`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    target: &[i32],
    se_probs: &[Var],
    presence: &Tensor<T>,
    alpha: f64,
    ignore_label: i32,
) -> Result<(Var, LossBreakdown)> {
    if !(alpha >= 0.0) {
        return Err(crate::error::invalid("total_loss", format!("weight {alpha} must be >= 0")));
    }
    let seg = tape.cross_entropy_2d(logits, target, ignore_label)?;
    let mut breakdown = LossBreakdown { seg: tape.value(seg).item().as_f64(), ..Default::default() };
    let mut total = seg;
    if alpha > 0.0 && !se_probs.is_empty() {
        let mut se_sum: Option<Var> = None;
        for &p in se_probs {
            let l = tape.binary_cross_entropy(p, presence)?;
            se_sum = Some(match se_sum {
                Some(s) => tape.add(s, l)?,
                None => l,
            });
        }
        let se_sum = se_sum.expect("nonempty");
        breakdown.se = tape.value(se_sum).item().as_f64();
        let weighted = tape.scale(se_sum, T::lit(alpha))?;
        total = tape.add(seg, weighted)?;
    }
    breakdown.total = tape.value(total).item().as_f64();
    Ok((total, breakdown))
}

pub const CSV_HEADER: &str = "epoch,iter,lr,seg_loss,se_loss,total_loss,pixAcc,mIoU,wall_s,sync_events";

/// One evaluation point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far.
    pub iter: usize,
    pub lr: f64,
    /// Training losses averaged over the epoch.
    pub losses: LossBreakdown,
    pub pix_acc: f64,
    pub miou: f64,
    pub wall_s: f64,
    pub sync_events: u64,
    pub confusion: ConfusionMatrix,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{}",
            self.epoch,
            self.iter,
            self.lr,
            self.losses.seg,
            self.losses.se,
            self.losses.total,
            self.pix_acc,
            self.miou,
            self.wall_s,
            self.sync_events
        )
    }
}

/// Writes the header once, then rows as they arrive.
pub struct CsvLog<'a> {
    out: Option<&'a mut dyn Write>,
    started: bool,
}

impl<'a> CsvLog<'a> {
    pub fn new(out: Option<&'a mut dyn Write>) -> Self {
        CsvLog { out, started: false }
    }

    pub fn row(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some(out) = self.out.as_deref_mut() {
            if !self.started {
                writeln!(out, "{CSV_HEADER}")?;
                self.started = true;
            }
            writeln!(out, "{}", rec.csv_row())?;
            out.flush()?;
        }
        Ok(())
    }
}

/// Shared settings of both training loops.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub schedule: Schedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Simulated SyncBN devices.
    pub devices: usize,
    pub seed: u64,
    pub eval_batch: usize,
    /// Record measured seconds in the log; when off the column holds 0 so
    /// logs are byte-reproducible.
    pub wall_clock: bool,
    /// Checkpoint written when the loss diverges.
    pub snapshot: Option<std::path::PathBuf>,
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, base_lr: f64, schedule: Schedule, weight_decay: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            base_lr,
            schedule,
            momentum: sgd::MOMENTUM,
            weight_decay,
            devices: 1,
            seed: 0,
            eval_batch: 16,
            wall_clock: false,
            snapshot: None,
        }
    }

    pub fn validate(&self, dataset: usize) -> Result<()> {
        use crate::error::invalid;
        if dataset == 0 {
            return Err(invalid("train", "empty training set"));
        }
        if self.batch_size == 0 || self.batch_size > dataset {
            return Err(invalid("train", format!("batch size {} must be in [1, {dataset}]", self.batch_size)));
        }
        if self.devices == 0 || self.batch_size % self.devices != 0 {
            return Err(invalid("train", format!("{} devices must divide batch size {}", self.devices, self.batch_size)));
        }
        if self.epochs == 0 || self.eval_batch == 0 {
            return Err(invalid("train", "epochs and eval batch must be positive"));
        }
        Ok(())
    }

    pub fn iters_per_epoch(&self, dataset: usize) -> usize {
        dataset / self.batch_size
    }
}

/// Returns a divergence error, writing a snapshot first when configured.
pub(crate) fn diverged<T: Real>(
    cfg: &TrainConfig,
    store: &crate::nn::ParamStore<T>,
    epoch: usize,
    iter: usize,
    lr: f64,
    losses: &LossBreakdown,
) -> crate::Error {
    let mut detail = format!("lr {lr:e}, seg {}, se {}, total {}", losses.seg, losses.se, losses.total);
    if let Some(path) = &cfg.snapshot {
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("diverged_at".to_string(), format!("epoch {epoch} iter {iter}"));
        match crate::nn::checkpoint::save_store(store, &meta, path) {
            Ok(()) => detail.push_str(&format!("; parameters saved to {}", path.display())),
            Err(e) => detail.push_str(&format!("; snapshot failed: {e}")),
        }
    }
    crate::Error::Diverged { epoch, iter, detail }
}
