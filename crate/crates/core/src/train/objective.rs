//! The joint training objective on one batch.

use super::config::{RoutingMode, TrainConfig};
use crate::data::{make_gt_segmap_sized, CrowdClass, Point};
use crate::error::Result;
use crate::loss::{LossBreakdown, LossWeights, PROB_EPS};
use crate::model::{ClassPrediction, ModelState, Net};
use crate::prm::{Prm, Provenance};
use crate::tensor::{Tensor, Var};
use crate::tiling::Patch;

/// Static pieces of the objective.
#[derive(Clone, Debug)]
pub struct Objective {
    pub prm: Prm,
    pub seg_radius: f64,
    pub weights: LossWeights,
    pub routing: RoutingMode,
}

impl Objective {
    pub fn new(state: &ModelState, cfg: &TrainConfig) -> Result<Self> {
        Ok(Objective {
            prm: Prm::new(state.arch.input_size, state.arch.lcp_rule)?,
            seg_radius: cfg.seg_radius(),
            weights: cfg.loss_weights,
            routing: cfg.routing_mode,
        })
    }

    /// Training routes for `class`: discarded patches still pass once,
    /// unchanged, so the regressor sees them with target zero.
    pub fn routes(&self, class: CrowdClass) -> Vec<Provenance> {
        match class {
            CrowdClass::Ncp => vec![Provenance::Identity],
            c => self.prm.plan(c),
        }
    }
}

/// Loss graph and predictions for one batch.
pub struct BatchLoss {
    pub total: Var,
    /// Unweighted terms.
    pub parts: LossBreakdown,
    pub probs: Vec<ClassPrediction>,
    /// Class that drove each patch's routing.
    pub routed: Vec<CrowdClass>,
    /// Sum of the route outputs of each patch (unclamped).
    pub patch_counts: Vec<f64>,
}

fn segmap_target(
    points: &[Point],
    radius: f64,
    side: usize,
    (h, w): (usize, usize),
) -> Result<Vec<f64>> {
    Ok(make_gt_segmap_sized(points, radius, side, (h, w))?.to_f64())
}

/// Builds the joint loss of `patches` (with ground-truth `labels`) on `net`.
pub fn batch_loss(
    net: &mut Net,
    patches: &[&Patch],
    labels: &[CrowdClass],
    obj: &Objective,
) -> Result<BatchLoss> {
    let side = net.arch().input_size;
    let pixels: Vec<&Tensor> = patches.iter().map(|p| &p.pixels).collect();
    let mut prefix = net.stem(&pixels)?;
    let probs: Vec<ClassPrediction> = net
        .graph
        .value(prefix.probs)
        .data()
        .chunks(4)
        .map(ClassPrediction::from_probs)
        .collect::<Result<_>>()?;
    let routed: Vec<CrowdClass> = match obj.routing {
        RoutingMode::GtLabels => labels.to_vec(),
        RoutingMode::PredictedLabels => probs.iter().map(|p| p.label).collect(),
    };
    net.to_hook(&mut prefix)?;

    let mut sources = Vec::new();
    let mut rescaled = Vec::new();
    let mut route_points = Vec::new();
    for (i, (p, &class)) in patches.iter().zip(&routed).enumerate() {
        for route in obj.routes(class) {
            sources.push(i);
            rescaled.push(obj.prm.apply(&p.pixels, route)?);
            route_points.push(obj.prm.map_points(&p.points, route));
        }
    }
    let refs: Vec<&Tensor> = rescaled.iter().collect();
    let heads = net.continue_routes(&prefix, &sources, &refs)?;

    let targets: Vec<f64> = route_points.iter().map(|p| p.len() as f64).collect();
    let reg = net.graph.mse(heads.counts, &targets)?;
    let onehot: Vec<f64> = labels.iter().flat_map(|c| c.one_hot()).collect();
    let ch = net.graph.cross_entropy(prefix.probs, &onehot, PROB_EPS)?;

    let mut sm_terms = Vec::new();
    for sm in &heads.sms {
        let shape = net.graph.shape(sm.map).to_vec();
        let hw = (shape[2], shape[3]);
        let mut target = Vec::with_capacity(shape.iter().product());
        if sm.per_route {
            for pts in &route_points {
                target.extend(segmap_target(pts, obj.seg_radius, side, hw)?);
            }
        } else {
            for p in patches {
                target.extend(segmap_target(&p.points, obj.seg_radius, side, hw)?);
            }
        }
        sm_terms.push(net.graph.bce(sm.map, &target, PROB_EPS)?);
    }

    let value = |net: &Net, v: Var| net.graph.value(v).data()[0];
    let mut terms = vec![(reg, obj.weights.regressor), (ch, obj.weights.ch)];
    let sm_value = if sm_terms.is_empty() {
        0.0
    } else {
        let share = 1.0 / sm_terms.len() as f64;
        let sm = net
            .graph
            .weighted_sum(&sm_terms.iter().map(|&t| (t, share)).collect::<Vec<_>>())?;
        terms.push((sm, obj.weights.sm));
        value(net, sm)
    };
    let total = net.graph.weighted_sum(&terms)?;
    let parts = LossBreakdown::new(value(net, reg), value(net, ch), sm_value);

    let route_out = net.graph.value(heads.counts).data();
    let mut patch_counts = vec![0.0; patches.len()];
    for (&src, &c) in sources.iter().zip(route_out) {
        patch_counts[src] += c;
    }
    Ok(BatchLoss {
        total,
        parts,
        probs,
        routed,
        patch_counts,
    })
}
