//! Single-sample, inference-mode entry points for each network stage.

use serde::Serialize;

use super::net::Net;
use super::state::ModelState;
use crate::data::CrowdClass;
use crate::error::{Error, Result};
use crate::loss;
use crate::tensor::{Mode, Tensor, Var};

/// A `channels × height × width` map belonging to one trunk branch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    /// 1-based branch index.
    pub branch: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, branch: usize) -> Result<Self> {
        if data.shape().len() != 3 || branch == 0 {
            return Err(Error::shape(
                format!("feature map of branch {branch}"),
                &[0, 0, 0],
                data.shape(),
            ));
        }
        Ok(FeatureMap { data, branch })
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Output of the density classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ClassPrediction {
    pub probs: [f64; 4],
    pub label: CrowdClass,
}

impl ClassPrediction {
    /// Arg-max with ties going to the lower class index.
    pub fn from_probs(p: &[f64]) -> Result<Self> {
        let probs: [f64; 4] = p
            .try_into()
            .map_err(|_| Error::shape("class probabilities", &[4], &[p.len()]))?;
        let mut best = 0;
        for i in 1..4 {
            if probs[i] > probs[best] {
                best = i;
            }
        }
        Ok(ClassPrediction {
            probs,
            label: CrowdClass::from_index(best).expect("index below 4"),
        })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::from_probs(&loss::softmax(logits))
    }
}

/// Output of the attention module on one branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `1 × H × W` map in (0, 1).
    pub sm: Tensor,
    /// The early feature map gated by `sm`.
    pub vafm: Tensor,
    pub ffm: FeatureMap,
}

/// Every trunk feature set of one forward pass.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub ifm: FeatureMap,
    /// Branch-1 features that feed the classifier.
    pub branch_out: FeatureMap,
    /// Branch-1 output of the re-entry block, before fusion.
    pub hook: FeatureMap,
    pub efms: Vec<FeatureMap>,
    pub lfms: Vec<FeatureMap>,
}

/// Identifies a residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockId {
    /// Block `rank` of `phase` (both 0-based) on 0-based `branch`.
    Trunk {
        phase: usize,
        rank: usize,
        branch: usize,
    },
    /// The block inside the concatenation module.
    CMod,
}

impl BlockId {
    pub fn name(self) -> String {
        match self {
            BlockId::Trunk {
                phase,
                rank,
                branch,
            } => format!("trunk.p{phase}.b{rank}.br{branch}"),
            BlockId::CMod => "cmod.rb".into(),
        }
    }
}

fn lift(net: &mut Net, fm: &Tensor) -> Result<Var> {
    let mut shape = vec![1];
    shape.extend_from_slice(fm.shape());
    Ok(net.graph.input(fm.clone().reshape(&shape)?))
}

fn lower(net: &Net, v: Var, branch: usize) -> Result<FeatureMap> {
    let t = net.graph.value(v);
    FeatureMap::new(t.clone().reshape(&t.shape()[1..])?, branch)
}

fn expect_branch(state: &ModelState, fm: &FeatureMap, what: &str) -> Result<()> {
    let b = fm.branch;
    if b > state.arch.num_branches {
        return Err(Error::Argument(format!(
            "{what}: branch {b} does not exist"
        )));
    }
    let want = state.arch.branch_shape(b - 1);
    if fm.shape() != want {
        return Err(Error::shape(
            format!("{what} (branch {b})"),
            &want,
            fm.shape(),
        ));
    }
    Ok(())
}

/// Initial deep layers: a `3 × S × S` pixel patch to the initial feature map.
pub fn idl_forward(patch: &Tensor, state: &ModelState) -> Result<FeatureMap> {
    let mut net = Net::new(state, Mode::Eval)?;
    let x = net.input(&[patch])?;
    let y = net.idl(x)?;
    lower(&net, y, 1)
}

pub fn residual_block(x: &FeatureMap, state: &ModelState, block: BlockId) -> Result<FeatureMap> {
    let branch = match block {
        BlockId::Trunk { branch, .. } => branch + 1,
        BlockId::CMod => 1,
    };
    if x.branch != branch {
        return Err(Error::Argument(format!(
            "block {} runs on branch {branch}, input is branch {}",
            block.name(),
            x.branch
        )));
    }
    expect_branch(state, x, "residual block input")?;
    let mut net = Net::new(state, Mode::Eval)?;
    let v = lift(&mut net, &x.data)?;
    let y = net.residual_block(v, &block.name())?;
    lower(&net, y, branch)
}

/// Fuses one map per live branch into 1-based `target`, using the weights of
/// fusion `rank` in 0-based `phase`.
pub fn fuse(
    inputs: &[FeatureMap],
    target: usize,
    state: &ModelState,
    phase: usize,
    rank: usize,
) -> Result<FeatureMap> {
    if target == 0 || target > inputs.len() {
        return Err(Error::Argument(format!(
            "fusion target {target} outside 1..={}",
            inputs.len()
        )));
    }
    let mut net = Net::new(state, Mode::Eval)?;
    let mut vars = Vec::with_capacity(inputs.len());
    for (i, fm) in inputs.iter().enumerate() {
        if fm.branch != i + 1 {
            return Err(Error::Argument(format!(
                "fusion input {i} is branch {}",
                fm.branch
            )));
        }
        expect_branch(state, fm, "fusion input")?;
        vars.push(lift(&mut net, &fm.data)?);
    }
    let y = net.fuse_into(&vars, target - 1, &format!("trunk.p{phase}.f{rank}"))?;
    lower(&net, y, target)
}

/// Full trunk on one patch, re-entering with the patch itself (the route a
/// medium-density patch takes).
pub fn backbone_forward(patch: &Tensor, state: &ModelState) -> Result<BackboneOutput> {
    let mut net = Net::new(state, Mode::Eval)?;
    let mut prefix = net.stem(&[patch])?;
    let branch_out = prefix.branch_out;
    net.to_hook(&mut prefix)?;
    let hook = prefix.trunk[0];
    let heads = net.continue_routes(&prefix, &[0], &[patch])?;
    let maps = |vs: &[Var]| -> Result<Vec<FeatureMap>> {
        vs.iter()
            .enumerate()
            .map(|(b, &v)| lower(&net, v, b + 1))
            .collect()
    };
    Ok(BackboneOutput {
        ifm: lower(&net, prefix.ifm, 1)?,
        branch_out: lower(&net, branch_out, 1)?,
        hook: lower(&net, hook, 1)?,
        efms: maps(&heads.efms)?,
        lfms: maps(&heads.lfms)?,
    })
}

/// Embeds a rescaled patch at Branch-1 shape.
pub fn cmod_forward(rescaled: &Tensor, state: &ModelState) -> Result<FeatureMap> {
    let mut net = Net::new(state, Mode::Eval)?;
    let x = net.input(&[rescaled])?;
    let y = net.cmod(x)?;
    lower(&net, y, 1)
}

pub fn bottleneck_concat(
    branch1: &FeatureMap,
    cmod: &FeatureMap,
    state: &ModelState,
) -> Result<FeatureMap> {
    expect_branch(state, branch1, "bottleneck trunk input")?;
    expect_branch(state, cmod, "bottleneck embedded input")?;
    let mut net = Net::new(state, Mode::Eval)?;
    let a = lift(&mut net, &branch1.data)?;
    let b = lift(&mut net, &cmod.data)?;
    let y = net.bottleneck(a, b)?;
    lower(&net, y, 1)
}

pub fn ch_forward(branch_out: &FeatureMap, state: &ModelState) -> Result<ClassPrediction> {
    expect_branch(state, branch_out, "classifier input")?;
    let mut net = Net::new(state, Mode::Eval)?;
    let x = lift(&mut net, &branch_out.data)?;
    let p = net.ch(x)?;
    ClassPrediction::from_probs(net.graph.value(p).data())
}

/// Attention and concatenation on one branch.
pub fn vacm(efm: &FeatureMap, lfm: &FeatureMap, state: &ModelState) -> Result<AttentionOutput> {
    if efm.branch != lfm.branch {
        return Err(Error::Argument(format!(
            "attention inputs from branches {} and {}",
            efm.branch, lfm.branch
        )));
    }
    if !state.arch.vacm_enabled {
        return Err(Error::Argument(
            "attention is disabled in this configuration".into(),
        ));
    }
    expect_branch(state, efm, "attention early map")?;
    expect_branch(state, lfm, "attention late map")?;
    let b = efm.branch;
    let mut net = Net::new(state, Mode::Eval)?;
    let e = lift(&mut net, &efm.data)?;
    let l = lift(&mut net, &lfm.data)?;
    let sm = net.attention_map(e, b - 1)?;
    let (vafm, ffm) = net.attend(sm, e, l, b - 1)?;
    let strip = |v: Var| -> Result<Tensor> {
        let t = net.graph.value(v);
        t.clone().reshape(&t.shape()[1..])
    };
    Ok(AttentionOutput {
        sm: strip(sm)?,
        vafm: strip(vafm)?,
        ffm: FeatureMap::new(strip(ffm)?, b)?,
    })
}

/// Count regression over one final feature map per branch.
pub fn crh(ffms: &[FeatureMap], state: &ModelState) -> Result<f64> {
    if ffms.len() != state.arch.num_branches {
        return Err(Error::Argument(format!(
            "regression head needs {} branches, got {}",
            state.arch.num_branches,
            ffms.len()
        )));
    }
    let mut net = Net::new(state, Mode::Eval)?;
    let mut vars = Vec::with_capacity(ffms.len());
    for fm in ffms {
        expect_branch(state, fm, "regression input")?;
        vars.push(lift(&mut net, &fm.data)?);
    }
    let y = net.crh(&vars)?;
    Ok(net.graph.value(y).data()[0])
}
