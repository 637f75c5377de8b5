use std::path::PathBuf;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{lr_at, TrainConfig};
use super::evaluate::image_metrics;
use super::objective::{batch_loss, Objective};
use super::optim::{clip_grad_norm, Sgd};
use crate::data::{sample_training_patches_sized, CrowdClass, DatasetStats, ImageRecord};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::model::{Checkpoint, ModelState, Net, Normalization};
use crate::tensor::Mode;
use crate::tiling::{tile_image_sized, Patch};

/// One finished (or cut-short) epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean of the per-step loss terms.
    pub loss: LossBreakdown,
    pub val_mae: Option<f64>,
    pub val_rmse: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    /// True when `max_steps` ended training before the configured epochs.
    pub stopped_early: bool,
    pub final_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn last_val_mae(&self) -> Option<f64> {
        self.epochs.iter().rev().find_map(|e| e.val_mae)
    }
}

/// Single-writer optimization loop over a fixed patch set.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    state: ModelState,
    opt: Sgd,
    obj: Objective,
    patches: &'a [Patch],
    labels: Vec<CrowdClass>,
    val: &'a [ImageRecord],
}

impl<'a> Trainer<'a> {
    /// `val` may be empty, in which case validation metrics are omitted.
    pub fn new(
        cfg: &TrainConfig,
        state: ModelState,
        patches: &'a [Patch],
        val: &'a [ImageRecord],
    ) -> Result<Self> {
        cfg.validate()?;
        if patches.is_empty() {
            return Err(Error::Sampling("no training patches".into()));
        }
        if state.arch != cfg.arch {
            return Err(Error::Config(
                "model architecture differs from the training config".into(),
            ));
        }
        if let Some(p) = patches.iter().find(|p| p.side() != state.arch.input_size) {
            return Err(Error::Argument(format!(
                "training patch side {} does not match input size {}",
                p.side(),
                state.arch.input_size
            )));
        }
        let labels = patches
            .iter()
            .map(|p| {
                p.class_gt
                    .unwrap_or_else(|| state.stats.label(p.gt_count()))
            })
            .collect();
        Ok(Trainer {
            obj: Objective::new(&state, cfg)?,
            opt: Sgd::new(cfg.momentum, cfg.nesterov, cfg.weight_decay),
            cfg: cfg.clone(),
            state,
            patches,
            labels,
            val,
        })
    }

    /// Continues from a checkpoint, including optimizer momentum.
    pub fn resume(
        cfg: &TrainConfig,
        ckpt: Checkpoint,
        patches: &'a [Patch],
        val: &'a [ImageRecord],
    ) -> Result<Self> {
        let mut t = Trainer::new(cfg, ckpt.state, patches, val)?;
        t.opt.load_extras(&ckpt.extras);
        Ok(t)
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn into_state(self) -> ModelState {
        self.state
    }

    pub fn labels(&self) -> &[CrowdClass] {
        &self.labels
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            state: self.state.clone(),
            extras: self.opt.to_extras(),
        }
    }

    /// Patch order of `epoch`, a pure function of the seed and epoch index.
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.patches.len()).collect();
        let seed = self.cfg.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// One optimizer step on the given patch indices.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<LossBreakdown> {
        let step = self.state.meta.step;
        let (parts, mut grads, bn) = {
            let mut net =
                Net::new(&self.state, Mode::Train)?.detach_aux_heads(self.cfg.detach_aux_heads);
            let patches: Vec<&Patch> = batch.iter().map(|&i| &self.patches[i]).collect();
            let labels: Vec<CrowdClass> = batch.iter().map(|&i| self.labels[i]).collect();
            let out = batch_loss(&mut net, &patches, &labels, &self.obj)?;
            let total = net.graph.value(out.total).data()[0];
            if !total.is_finite() {
                return Err(Error::Divergence { step, loss: total });
            }
            let grads = net.graph.backward(out.total)?.params(&net.graph);
            (out.parts, grads, net.graph.bn_updates().to_vec())
        };
        let norm = match self.cfg.grad_clip {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => clip_grad_norm(&mut grads, f64::INFINITY),
        };
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: norm });
        }
        self.opt.step(&mut self.state.params, &grads, lr)?;
        self.state.apply_bn_updates(&bn)?;
        self.state.meta.step += 1;
        debug!(
            "step {step}: total {:.4} (reg {:.4}, ch {:.4}, sm {:.4}), |g| {norm:.3}",
            parts.total, parts.regressor, parts.ch, parts.sm
        );
        Ok(parts)
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_steps.is_none_or(|m| self.state.meta.step < m)
    }

    /// Runs the next epoch; `None` once the configured epochs or steps are used up.
    pub fn run_epoch(&mut self) -> Result<Option<EpochRecord>> {
        let epoch = self.state.meta.epoch;
        if epoch >= self.cfg.epochs || !self.budget_left() {
            return Ok(None);
        }
        let lr = lr_at(epoch, &self.cfg);
        let order = self.epoch_order(epoch);
        let mut sums = [0.0; 3];
        let mut steps = 0;
        for batch in order.chunks(self.cfg.batch_size) {
            if !self.budget_left() {
                break;
            }
            let p = self.step(batch, lr)?;
            sums[0] += p.regressor;
            sums[1] += p.ch;
            sums[2] += p.sm;
            steps += 1;
        }
        let finished = steps == order.len().div_ceil(self.cfg.batch_size);
        if finished {
            self.state.meta.epoch += 1;
        }
        let k = steps.max(1) as f64;
        let loss = LossBreakdown::new(sums[0] / k, sums[1] / k, sums[2] / k);
        let last = !finished || self.state.meta.epoch == self.cfg.epochs || !self.budget_left();
        let (val_mae, val_rmse) = if !self.val.is_empty()
            && ((epoch + 1).is_multiple_of(self.cfg.validate_every) || last)
        {
            let m = image_metrics(&self.state, self.val)?;
            (Some(m.0), Some(m.1))
        } else {
            (None, None)
        };
        info!(
            "epoch {epoch}: lr {lr:.2e}, loss {:.4} (reg {:.4}, ch {:.4}, sm {:.4}){}",
            loss.total,
            loss.regressor,
            loss.ch,
            loss.sm,
            val_mae.map_or(String::new(), |m| format!(", val MAE {m:.3}"))
        );
        Ok(Some(EpochRecord {
            epoch,
            lr,
            steps,
            loss,
            val_mae,
            val_rmse,
        }))
    }

    /// Trains to completion, calling `on_epoch` after every epoch (e.g. to
    /// write checkpoints).
    pub fn run(
        mut self,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<(ModelState, TrainReport)> {
        let mut report = TrainReport::default();
        while let Some(rec) = self.run_epoch()? {
            on_epoch(&self, &rec)?;
            report.epochs.push(rec);
        }
        report.steps = self.state.meta.step;
        report.stopped_early = self.state.meta.epoch < self.cfg.epochs;
        Ok((self.state, report))
    }
}

/// Training inputs derived from a list of images.
pub struct Prepared {
    pub train: Vec<ImageRecord>,
    pub val: Vec<ImageRecord>,
    pub patches: Vec<Patch>,
    pub stats: DatasetStats,
    pub norm: Normalization,
}

/// Splits `n` indices into (train, val) with `⌈fraction·n⌉` validation items
/// (at least one of each side when `n ≥ 2`).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = if n < 2 {
        0
    } else {
        ((fraction * n as f64).ceil() as usize).clamp(1, n - 1)
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

const SPLIT_SALT: u64 = 0x5eed_0000_0000_0001;

/// Splits the records, computes `cc_max` and normalization on the training
/// side and samples the training patches.
pub fn prepare(records: &[ImageRecord], cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (ti, vi) = split_indices(records.len(), cfg.val_fraction, cfg.seed);
    let train: Vec<ImageRecord> = ti.iter().map(|&i| records[i].clone()).collect();
    let val: Vec<ImageRecord> = vi.iter().map(|&i| records[i].clone()).collect();
    if train.is_empty() {
        return Err(Error::Sampling(
            "no training images after the validation split".into(),
        ));
    }
    let side = cfg.arch.input_size;
    let stats = DatasetStats::from_counts(
        train
            .iter()
            .flat_map(|r| tile_image_sized(r, side).into_iter().map(|p| p.gt_count())),
    );
    let patches =
        sample_training_patches_sized(&train, cfg.n_patches, &cfg.crop_sizes, cfg.seed, side)?;
    let norm = Normalization::from_patches(&patches);
    Ok(Prepared {
        train,
        val,
        patches,
        stats,
        norm,
    })
}

/// Full recipe: split, sample, initialize and optimize.
pub fn train(records: &[ImageRecord], cfg: &TrainConfig) -> Result<(ModelState, TrainReport)> {
    let prep = prepare(records, cfg)?;
    let state = ModelState::init(&cfg.arch, prep.stats, prep.norm, cfg.seed)?;
    Trainer::new(cfg, state, &prep.patches, &prep.val)?.run(|_, _| Ok(()))
}
