//! Whole-image counting: tile, classify each tile, rescale it, count the
//! rescaled patches and add everything up.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{CrowdClass, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{ClassPrediction, ModelState, Net};
use crate::prm::Prm;
use crate::tensor::{Mode, Tensor};
use crate::tiling::{tile_image_sized, Patch};

/// How each tile picks its rescaling route.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingPolicy {
    /// The classifier's arg-max.
    Predicted,
    /// The label implied by the tile's annotated count and the model's `cc_max`.
    GroundTruth,
    /// The same class for every tile.
    Force(CrowdClass),
}

/// Result for one tile.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PatchCount {
    pub origin: (usize, usize),
    pub class: CrowdClass,
    pub probs: [f64; 4],
    /// One regression output per rescaled patch, before clamping.
    pub sub_counts: Vec<f64>,
    /// `max(0, Σ sub_counts)`; zero for discarded tiles.
    pub count: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CountResult {
    pub per_patch: Vec<PatchCount>,
    pub image_count: f64,
}

/// Compensated (Neumaier) sum of non-negative counts.
pub fn aggregate_counts(counts: &[f64]) -> Result<f64> {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &c in counts {
        if c.is_nan() || c < 0.0 {
            return Err(Error::Argument(format!(
                "count {c} is not a non-negative number"
            )));
        }
        let t = sum + c;
        if sum.abs() >= c.abs() {
            comp += (sum - t) + c;
        } else {
            comp += (c - t) + sum;
        }
        sum = t;
    }
    Ok(sum + comp)
}

/// Everything computed for one tile.
#[derive(Clone, Debug)]
pub struct PatchOutcome {
    pub count: PatchCount,
    /// Branch-1 attention map of the tile (absent for discarded tiles or
    /// when attention is disabled).
    pub sm: Option<Tensor>,
}

fn route_class(
    patch: &Patch,
    state: &ModelState,
    policy: RoutingPolicy,
    predicted: CrowdClass,
) -> CrowdClass {
    match policy {
        RoutingPolicy::Predicted => predicted,
        RoutingPolicy::GroundTruth => state.stats.label(patch.gt_count()),
        RoutingPolicy::Force(c) => c,
    }
}

/// Counts one tile.
pub fn count_patch(
    patch: &Patch,
    state: &ModelState,
    policy: RoutingPolicy,
) -> Result<PatchOutcome> {
    if patch.side() != state.arch.input_size {
        return Err(Error::Inference(format!(
            "tile side {} does not match the model input size {}",
            patch.side(),
            state.arch.input_size
        )));
    }
    let prm = Prm::new(state.arch.input_size, state.arch.lcp_rule)?;
    let mut net = Net::new(state, Mode::Eval)?;
    let mut prefix = net.stem(&[&patch.pixels])?;
    let pred = ClassPrediction::from_probs(net.graph.value(prefix.probs).data())?;
    let class = route_class(patch, state, policy, pred.label);
    let routes = prm.plan(class);
    let mut count = PatchCount {
        origin: patch.origin,
        class,
        probs: pred.probs,
        sub_counts: Vec::new(),
        count: 0.0,
    };
    if routes.is_empty() {
        return Ok(PatchOutcome { count, sm: None });
    }
    net.to_hook(&mut prefix)?;
    let rescaled = routes
        .iter()
        .map(|&r| prm.apply(&patch.pixels, r))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = rescaled.iter().collect();
    let heads = net.continue_routes(&prefix, &vec![0; routes.len()], &refs)?;
    count.sub_counts = net.graph.value(heads.counts).data().to_vec();
    count.count = count.sub_counts.iter().sum::<f64>().max(0.0);
    let sm = heads
        .sms
        .iter()
        .find(|s| s.branch == 0)
        .map(|s| {
            let t = net.graph.value(s.map);
            let (h, w) = (t.shape()[2], t.shape()[3]);
            Tensor::from_vec(&[h, w], t.data()[..h * w].to_vec())
        })
        .transpose()?;
    Ok(PatchOutcome { count, sm })
}

/// Counts every tile of `record` in parallel.
pub fn count_tiles(
    record: &ImageRecord,
    state: &ModelState,
    policy: RoutingPolicy,
) -> Result<Vec<PatchOutcome>> {
    let patches = tile_image_sized(record, state.arch.input_size);
    patches
        .par_iter()
        .map(|p| count_patch(p, state, policy))
        .collect()
}

/// Image-level count using the classifier's routing decisions.
pub fn count_image(record: &ImageRecord, state: &ModelState) -> Result<CountResult> {
    count_image_with(record, state, RoutingPolicy::Predicted)
}

pub fn count_image_with(
    record: &ImageRecord,
    state: &ModelState,
    policy: RoutingPolicy,
) -> Result<CountResult> {
    let outcomes = count_tiles(record, state, policy)?;
    summarize(outcomes.into_iter().map(|o| o.count).collect())
}

fn summarize(per_patch: Vec<PatchCount>) -> Result<CountResult> {
    let counts: Vec<f64> = per_patch.iter().map(|p| p.count).collect();
    let image_count = aggregate_counts(&counts)?;
    Ok(CountResult {
        per_patch,
        image_count,
    })
}

/// Paints tiles' Branch-1 attention (thresholded at 0.5) onto the image.
pub fn render_overlay(record: &ImageRecord, outcomes: &[PatchOutcome], side: usize) -> RgbImage {
    let mut img = record.image.clone();
    let (w, h) = img.dimensions();
    for o in outcomes {
        let Some(sm) = &o.sm else { continue };
        let (sh, sw) = (sm.shape()[0], sm.shape()[1]);
        let (r0, c0) = o.count.origin;
        for dy in 0..side {
            for dx in 0..side {
                let (y, x) = (r0 + dy, c0 + dx);
                if y >= h as usize || x >= w as usize {
                    continue;
                }
                if sm.data()[(dy * sh / side) * sw + dx * sw / side] >= 0.5 {
                    let Rgb([r, g, b]) = *img.get_pixel(x as u32, y as u32);
                    let tint = |v: u8, t: u8| ((v as u16 + t as u16) / 2) as u8;
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        Rgb([tint(r, 255), tint(g, 0), tint(b, 0)]),
                    );
                }
            }
        }
    }
    img
}

/// Per-image inference report.
#[derive(Clone, Debug, Serialize)]
pub struct InferenceReport {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub image_count: f64,
    pub per_patch: Vec<PatchCount>,
    pub overlay: Option<PathBuf>,
}

/// Counts `record` and writes `count.json` plus `overlay.png` into `out_dir`.
pub fn infer_to_dir(
    record: &ImageRecord,
    state: &ModelState,
    out_dir: &Path,
) -> Result<InferenceReport> {
    let outcomes = count_tiles(record, state, RoutingPolicy::Predicted)?;
    std::fs::create_dir_all(out_dir)?;
    let overlay = render_overlay(record, &outcomes, state.arch.input_size);
    let overlay_path = out_dir.join("overlay.png");
    overlay.save(&overlay_path)?;
    let result = summarize(outcomes.into_iter().map(|o| o.count).collect())?;
    let report = InferenceReport {
        id: record.id.clone(),
        width: record.width(),
        height: record.height(),
        image_count: result.image_count,
        per_patch: result.per_patch,
        overlay: Some(overlay_path),
    };
    std::fs::write(
        out_dir.join("count.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
