//! Image- and patch-level evaluation.

use rayon::prelude::*;
use serde::Serialize;

use super::config::TrainConfig;
use super::objective::{batch_loss, Objective};
use crate::data::{CrowdClass, ImageRecord};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::metrics::{mae_rmse, ClassStats, Confusion};
use crate::model::{ModelState, Net};
use crate::pipeline::{count_patch, count_tiles, RoutingPolicy};
use crate::tensor::Mode;
use crate::tiling::{tile_image_sized, Patch};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageEval {
    pub id: String,
    pub gt: usize,
    pub pred: f64,
}

/// Counting accuracy and classifier analysis over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageEval>,
    pub mae: f64,
    pub rmse: f64,
    pub patches: usize,
    /// Rows are ground-truth classes, columns predictions.
    pub confusion: Confusion,
    pub classes: Vec<ClassStats>,
}

/// Counts every record with classifier routing and compares against the
/// annotations.
pub fn evaluate(state: &ModelState, records: &[ImageRecord]) -> Result<EvalReport> {
    evaluate_with(state, records, RoutingPolicy::Predicted)
}

pub fn evaluate_with(
    state: &ModelState,
    records: &[ImageRecord],
    policy: RoutingPolicy,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Argument("nothing to evaluate".into()));
    }
    let side = state.arch.input_size;
    let mut images = Vec::with_capacity(records.len());
    let mut confusion = Confusion::default();
    for rec in records {
        let outcomes = count_tiles(rec, state, policy)?;
        let tiles = tile_image_sized(rec, side);
        for (o, t) in outcomes.iter().zip(&tiles) {
            let pred = crate::model::ClassPrediction::from_probs(&o.count.probs)?.label;
            confusion.record(state.stats.label(t.gt_count()), pred);
        }
        let counts: Vec<f64> = outcomes.iter().map(|o| o.count.count).collect();
        images.push(ImageEval {
            id: rec.id.clone(),
            gt: rec.points.len(),
            pred: crate::pipeline::aggregate_counts(&counts)?,
        });
    }
    let preds: Vec<f64> = images.iter().map(|i| i.pred).collect();
    let gts: Vec<f64> = images.iter().map(|i| i.gt as f64).collect();
    let (mae, rmse) = mae_rmse(&preds, &gts)?;
    Ok(EvalReport {
        images,
        mae,
        rmse,
        patches: confusion.total(),
        classes: confusion.per_class(),
        confusion,
    })
}

/// `(MAE, RMSE)` of image counts under classifier routing.
pub fn image_metrics(state: &ModelState, records: &[ImageRecord]) -> Result<(f64, f64)> {
    let r = evaluate(state, records)?;
    Ok((r.mae, r.rmse))
}

/// Patch-level counting error with inference rules (discard, clamp).
pub fn patch_mae(
    state: &ModelState,
    patches: &[Patch],
    policy: RoutingPolicy,
) -> Result<(f64, f64)> {
    let preds: Vec<f64> = patches
        .par_iter()
        .map(|p| count_patch(p, state, policy).map(|o| o.count.count))
        .collect::<Result<_>>()?;
    let gts: Vec<f64> = patches.iter().map(|p| p.gt_count() as f64).collect();
    mae_rmse(&preds, &gts)
}

/// Training-objective view of a patch set, evaluated with running statistics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitMetrics {
    /// MAE of the summed route outputs under training routing.
    pub mae: f64,
    pub rmse: f64,
    pub mean_gt: f64,
    /// Loss terms averaged over batches (weighted by batch size).
    pub loss: LossBreakdown,
    /// Fraction of patches whose classifier arg-max equals the label.
    pub class_accuracy: f64,
}

/// Evaluates the training objective over `patches` in inference mode.
pub fn fit_metrics(state: &ModelState, patches: &[Patch], cfg: &TrainConfig) -> Result<FitMetrics> {
    if patches.is_empty() {
        return Err(Error::Argument("no patches".into()));
    }
    let obj = Objective::new(state, cfg)?;
    let chunks: Vec<&[Patch]> = patches.chunks(cfg.batch_size.max(1)).collect();
    let results = chunks
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&Patch> = chunk.iter().collect();
            let labels: Vec<CrowdClass> = chunk
                .iter()
                .map(|p| {
                    p.class_gt
                        .unwrap_or_else(|| state.stats.label(p.gt_count()))
                })
                .collect();
            let mut net = Net::new(state, Mode::Eval)?;
            let out = batch_loss(&mut net, &refs, &labels, &obj)?;
            let correct = out
                .probs
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p.label == **l)
                .count();
            Ok((out.parts, out.patch_counts, correct, chunk.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = patches.len() as f64;
    let mut preds = Vec::with_capacity(patches.len());
    let (mut reg, mut ch, mut sm, mut correct) = (0.0, 0.0, 0.0, 0);
    for (parts, counts, c, len) in results {
        let w = len as f64 / n;
        reg += parts.regressor * w;
        ch += parts.ch * w;
        sm += parts.sm * w;
        correct += c;
        preds.extend(counts);
    }
    let gts: Vec<f64> = patches.iter().map(|p| p.gt_count() as f64).collect();
    let (mae, rmse) = mae_rmse(&preds, &gts)?;
    Ok(FitMetrics {
        mae,
        rmse,
        mean_gt: gts.iter().sum::<f64>() / n,
        loss: LossBreakdown::new(reg, ch, sm),
        class_accuracy: correct as f64 / n,
    })
}
