//! Finite-difference verification of the training gradients.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::TrainConfig;
use super::objective::{batch_loss, Objective};
use crate::data::{generate_synthetic_with, CrowdClass, DatasetStats, SynthOptions};
use crate::error::{Error, Result};
use crate::model::{ModelState, Net, Normalization};
use crate::tensor::Mode;
use crate::tiling::{tile_image_sized, Patch};

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Entries probed per parameter tensor (all entries if the tensor is smaller).
    pub samples_per_tensor: usize,
    /// Denominator floor of the relative error.
    pub floor: f64,
    /// How many times a probe whose ±step crosses a kink is retried with a
    /// ten times smaller step before it is skipped.
    pub refinements: usize,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            samples_per_tensor: 2,
            floor: 1e-6,
            refinements: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupReport {
    pub group: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes that needed a smaller step to stay clear of a kink.
    pub refined: usize,
    /// Probes skipped because a ReLU or probability clamp switched even at the
    /// smallest step.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// One patch per crowd class, labelled against `cc_max = 20`.
pub fn gradcheck_batch(side: usize, seed: u64) -> Result<(Vec<Patch>, DatasetStats)> {
    let stats = DatasetStats { cc_max: 20 };
    let opts = SynthOptions {
        blob_radius: (1.5, 2.5),
        noise: 12.0,
    };
    let mut patches = Vec::new();
    for (i, count) in [0usize, 1, 3, 10].into_iter().enumerate() {
        let rec = generate_synthetic_with(1, (side, side), (count, count), seed + i as u64, &opts)?
            .pop()
            .expect("one record");
        let mut tile = tile_image_sized(&rec, side).pop().expect("one tile");
        tile.class_gt = Some(stats.label(count));
        patches.push(tile);
    }
    debug_assert_eq!(
        patches
            .iter()
            .map(|p| p.class_gt.unwrap())
            .collect::<Vec<_>>(),
        CrowdClass::ALL.to_vec()
    );
    Ok((patches, stats))
}

fn objective_value(
    state: &ModelState,
    patches: &[&Patch],
    labels: &[CrowdClass],
    obj: &Objective,
    detach: bool,
) -> Result<(f64, Vec<u64>)> {
    let mut net = Net::new(state, Mode::Train)?.detach_aux_heads(detach);
    let out = batch_loss(&mut net, patches, labels, obj)?;
    Ok((
        net.graph.value(out.total).data()[0],
        net.graph.activation_trace().to_vec(),
    ))
}

/// Compares analytic gradients of the joint loss with central differences
/// on a four-patch batch (one per class) using `cfg.arch`.
pub fn grad_check(
    cfg: &TrainConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let (patches, stats) = gradcheck_batch(cfg.arch.input_size, seed)?;
    let norm = Normalization::from_patches(&patches);
    let mut state = ModelState::init(&cfg.arch, stats, norm, seed)?;
    let refs: Vec<&Patch> = patches.iter().collect();
    let labels: Vec<CrowdClass> = patches
        .iter()
        .map(|p| p.class_gt.expect("labelled"))
        .collect();
    let obj = Objective::new(&state, cfg)?;

    let (analytic, base_trace) = {
        let mut net = Net::new(&state, Mode::Train)?.detach_aux_heads(cfg.detach_aux_heads);
        let out = batch_loss(&mut net, &refs, &labels, &obj)?;
        let grads = net.graph.backward(out.total)?.params(&net.graph);
        (grads, net.graph.activation_trace().to_vec())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut groups: BTreeMap<String, GroupReport> = BTreeMap::new();
    let names: Vec<String> = state.params.keys().cloned().collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::MissingParam(format!("gradient of {name}")))?
            .clone();
        let len = grad.len();
        let picks: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            sample(&mut rng, len, opts.samples_per_tensor).into_vec()
        };
        let group = ModelState::group_of(&name).to_string();
        let entry = groups.entry(group.clone()).or_insert(GroupReport {
            group,
            max_rel_err: 0.0,
            checked: 0,
            refined: 0,
            skipped: 0,
        });
        for idx in picks {
            let orig = state.params[&name].data()[idx];
            let mut numeric = None;
            let mut h = opts.step;
            for _ in 0..=opts.refinements {
                let mut probe = |delta: f64| -> Result<(f64, Vec<u64>)> {
                    state.params.get_mut(&name).expect("exists").data_mut()[idx] = orig + delta;
                    objective_value(&state, &refs, &labels, &obj, cfg.detach_aux_heads)
                };
                let (plus, tp) = probe(h)?;
                let (minus, tm) = probe(-h)?;
                if tp == base_trace && tm == base_trace {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
                h /= 10.0;
            }
            state.params.get_mut(&name).expect("exists").data_mut()[idx] = orig;
            let Some(numeric) = numeric else {
                entry.skipped += 1;
                continue;
            };
            if h < opts.step {
                entry.refined += 1;
            }
            let a = grad.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            entry.max_rel_err = entry.max_rel_err.max(rel);
            entry.checked += 1;
        }
    }
    let groups: Vec<GroupReport> = groups.into_values().collect();
    Ok(GradCheckReport {
        max_rel_err: groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max),
        checked: groups.iter().map(|g| g.checked).sum(),
        skipped: groups.iter().map(|g| g.skipped).sum(),
        groups,
    })
}
