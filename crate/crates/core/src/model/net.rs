//! The full network expressed over a [`Graph`].
//!
//! A forward pass is split where the density classifier has to be consulted:
//! [`Net::stem`] runs up to the branch-out block and the classification head,
//! [`Net::to_hook`] finishes the trunk up to the re-entry block, and
//! [`Net::continue_routes`] embeds rescaled patches, merges them with the
//! cached trunk state and runs the rest of the trunk plus both attention and
//! regression heads.

use std::collections::BTreeMap;
use std::ops::Range;

use super::config::{ArchConfig, UnitDepth};
use super::state::{he_normal, name_seed, ModelState, Normalization};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mode, Tensor, Var};

type TensorMap = BTreeMap<String, Tensor>;

enum Store<'s> {
    Frozen(&'s ModelState),
    Init {
        seed: u64,
        params: TensorMap,
        buffers: TensorMap,
    },
}

#[derive(Clone, Copy)]
enum Fill {
    He(usize),
    Zeros,
    Ones,
}

impl Fill {
    fn make(self, shape: &[usize], seed: u64) -> Tensor {
        match self {
            Fill::He(fan_in) => he_normal(shape, fan_in, seed),
            Fill::Zeros => Tensor::zeros(shape),
            Fill::Ones => Tensor::full(shape, 1.0),
        }
    }
}

/// One step of the trunk schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Creates branch `phase` from the lowest-resolution live branch.
    Transition { phase: usize },
    /// One residual block on every live branch; `b1` counts blocks along Branch-1.
    Blocks {
        phase: usize,
        rank: usize,
        b1: usize,
    },
    /// Exchange between all live branches.
    Fuse { phase: usize, rank: usize },
}

/// The trunk schedule and the two positions the routing logic cares about.
#[derive(Clone, Debug)]
pub struct Plan {
    pub steps: Vec<Step>,
    /// Index of the step after which Branch-1 feeds the classifier.
    pub branch_out: usize,
    /// Index of the step after which rescaled patches re-enter.
    pub hook: usize,
}

impl Plan {
    pub fn new(arch: &ArchConfig) -> Result<Self> {
        arch.validate()?;
        let mut steps = Vec::new();
        let mut b1 = 0;
        for (phase, &blocks) in arch.layout().iter().enumerate() {
            if phase > 0 {
                steps.push(Step::Transition { phase });
            }
            for rank in 0..blocks {
                steps.push(Step::Blocks { phase, rank, b1 });
                steps.push(Step::Fuse { phase, rank });
                b1 += 1;
            }
        }
        let find = |target: usize| {
            steps
                .iter()
                .position(|s| matches!(s, Step::Blocks { b1, .. } if *b1 == target))
                .expect("validated layout has this block")
        };
        let branch_out = find(arch.branch_out_block);
        let hook = find(arch.reentry_block());
        Ok(Plan {
            steps,
            branch_out,
            hook,
        })
    }
}

/// Trunk state after [`Net::stem`] (and optionally [`Net::to_hook`]).
pub struct Prefix {
    pub batch: usize,
    pub ifm: Var,
    /// Live branch features; Branch-1 is pre-fusion at either stopping point.
    pub trunk: Vec<Var>,
    /// Branch-1 features consumed by the classification head.
    pub branch_out: Var,
    /// `batch × 4` class probabilities.
    pub probs: Var,
    /// Early feature maps of branches created so far.
    pub efms: Vec<Var>,
    cursor: usize,
}

impl Prefix {
    pub fn at_hook(&self, plan: &Plan) -> bool {
        self.cursor > plan.hook
    }
}

/// A segmentation map and which rows it is aligned with.
pub struct SmOutput {
    pub branch: usize,
    pub map: Var,
    /// True when rows follow the routed (rescaled) patches, false when they
    /// follow the source patches of the prefix.
    pub per_route: bool,
}

/// Outputs of [`Net::continue_routes`]; rows follow the routes.
pub struct Heads {
    /// `routes × 1` counts.
    pub counts: Var,
    pub cmod: Var,
    pub efms: Vec<Var>,
    pub lfms: Vec<Var>,
    pub ffms: Vec<Var>,
    pub sms: Vec<SmOutput>,
}

pub struct Net<'s> {
    arch: ArchConfig,
    plan: Plan,
    store: Store<'s>,
    norm: Normalization,
    pub graph: Graph,
    detach_aux: bool,
    shapes: Vec<(String, Vec<usize>)>,
}

impl<'s> Net<'s> {
    /// A network reading its weights from `state`.
    pub fn new(state: &'s ModelState, mode: Mode) -> Result<Self> {
        Ok(Net {
            arch: state.arch.clone(),
            plan: Plan::new(&state.arch)?,
            store: Store::Frozen(state),
            norm: state.norm,
            graph: Graph::new(mode),
            detach_aux: false,
            shapes: Vec::new(),
        })
    }

    /// Stops classifier and attention gradients from reaching the trunk.
    pub fn detach_aux_heads(mut self, on: bool) -> Self {
        self.detach_aux = on;
        self
    }

    /// Creates every parameter and buffer of `arch` by running one forward
    /// pass that touches all layers.
    pub(crate) fn materialize(arch: &ArchConfig, seed: u64) -> Result<(TensorMap, TensorMap)> {
        let mut net = Net {
            arch: arch.clone(),
            plan: Plan::new(arch)?,
            store: Store::Init {
                seed,
                params: TensorMap::new(),
                buffers: TensorMap::new(),
            },
            norm: Normalization::default(),
            graph: Graph::new(Mode::Eval),
            detach_aux: false,
            shapes: Vec::new(),
        };
        let s = arch.input_size;
        let zero = Tensor::zeros(&[3, s, s]);
        let mut prefix = net.stem(&[&zero])?;
        net.to_hook(&mut prefix)?;
        net.continue_routes(&prefix, &[0], &[&zero])?;
        match net.store {
            Store::Init {
                params, buffers, ..
            } => Ok((params, buffers)),
            Store::Frozen(_) => unreachable!("constructed in init mode"),
        }
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// `(label, shape without batch axis)` of every logged intermediate.
    pub fn shapes(&self) -> &[(String, Vec<usize>)] {
        &self.shapes
    }

    fn log(&mut self, label: impl Into<String>, v: Var) {
        let shape = self.graph.shape(v)[1..].to_vec();
        self.shapes.push((label.into(), shape));
    }

    fn tensor(&mut self, name: &str, shape: &[usize], fill: Fill) -> Result<Var> {
        let t = match &mut self.store {
            Store::Frozen(state) => state
                .params
                .get(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?,
            Store::Init { seed, params, .. } => params
                .entry(name.to_string())
                .or_insert_with(|| fill.make(shape, name_seed(*seed, name))),
        };
        if t.shape() != shape {
            return Err(Error::shape(format!("parameter {name}"), shape, t.shape()));
        }
        Ok(self.graph.param(name, t))
    }

    fn bn(&mut self, x: Var, name: &str) -> Result<Var> {
        let c = self.graph.shape(x)[1];
        let layer = format!("{name}.bn");
        let gamma = self.tensor(&format!("{layer}.gamma"), &[c], Fill::Ones)?;
        let beta = self.tensor(&format!("{layer}.beta"), &[c], Fill::Zeros)?;
        let (mk, vk) = (
            format!("{layer}.running_mean"),
            format!("{layer}.running_var"),
        );
        let (rm, rv) = match &mut self.store {
            Store::Frozen(state) => {
                let get = |k: &String| {
                    state
                        .buffers
                        .get(k)
                        .ok_or_else(|| Error::MissingParam(k.clone()))
                };
                (get(&mk)?, get(&vk)?)
            }
            Store::Init { buffers, .. } => {
                buffers
                    .entry(mk.clone())
                    .or_insert_with(|| Tensor::zeros(&[c]));
                buffers
                    .entry(vk.clone())
                    .or_insert_with(|| Tensor::full(&[c], 1.0));
                (&buffers[&mk], &buffers[&vk])
            }
        };
        for (k, t) in [(&mk, rm), (&vk, rv)] {
            if t.shape() != [c] {
                return Err(Error::shape(format!("buffer {k}"), &[c], t.shape()));
            }
        }
        self.graph
            .batch_norm(x, gamma, beta, (rm, rv), &layer, self.arch.bn_eps)
    }

    fn conv(&mut self, x: Var, name: &str, cout: usize, k: usize, stride: usize) -> Result<Var> {
        let cin = self.graph.shape(x)[1];
        let w = self.tensor(
            &format!("{name}.weight"),
            &[cout, cin, k, k],
            Fill::He(cin * k * k),
        )?;
        self.graph.conv2d(x, w, stride, k / 2)
    }

    /// Convolution, batch norm, and optionally ReLU.
    fn cbr(
        &mut self,
        x: Var,
        name: &str,
        cout: usize,
        k: usize,
        stride: usize,
        relu: bool,
    ) -> Result<Var> {
        let y = self.conv(x, name, cout, k, stride)?;
        let y = self.bn(y, name)?;
        Ok(if relu { self.graph.relu(y) } else { y })
    }

    fn linear(&mut self, x: Var, name: &str, out: usize) -> Result<Var> {
        let fin = self.graph.shape(x)[1];
        let w = self.tensor(&format!("{name}.weight"), &[out, fin], Fill::He(fin))?;
        let b = self.tensor(&format!("{name}.bias"), &[out], Fill::Zeros)?;
        self.graph.linear(x, w, b)
    }

    /// Normalizes and stacks `3 × S × S` pixel tensors into a batch.
    pub fn input(&mut self, patches: &[&Tensor]) -> Result<Var> {
        let s = self.arch.input_size;
        if patches.is_empty() {
            return Err(Error::Inference("empty batch".into()));
        }
        let mut items = Vec::with_capacity(patches.len());
        for p in patches {
            if p.shape() != [3, s, s] {
                return Err(Error::Inference(format!(
                    "network expects 3×{s}×{s} patches, got {:?}",
                    p.shape()
                )));
            }
            items.push(self.norm.apply(p));
        }
        let batch = Tensor::stack(&items)?;
        Ok(self.graph.input(batch))
    }

    pub fn idl(&mut self, x: Var) -> Result<Var> {
        let stem = self.arch.stem_channels;
        let x = self.cbr(x, "idl.conv1", stem, 3, 2, true)?;
        let x = self.cbr(x, "idl.conv2", stem, 3, 2, true)?;
        self.cbr(x, "idl.conv3", self.arch.base_channels, 1, 1, true)
    }

    fn unit(&mut self, x: Var, name: &str) -> Result<Var> {
        let c = self.graph.shape(x)[1];
        let y = match self.arch.unit_depth {
            UnitDepth::ThreeLayer => {
                let mid = self.arch.unit_width(c);
                let y = self.cbr(x, &format!("{name}.conv1"), mid, 1, 1, true)?;
                let y = self.cbr(y, &format!("{name}.conv2"), mid, 3, 1, true)?;
                self.cbr(y, &format!("{name}.conv3"), c, 1, 1, false)?
            }
            UnitDepth::TwoLayer => {
                let y = self.cbr(x, &format!("{name}.conv1"), c, 3, 1, true)?;
                self.cbr(y, &format!("{name}.conv2"), c, 3, 1, false)?
            }
        };
        let sum = self.graph.add(x, y)?;
        Ok(self.graph.relu(sum))
    }

    /// A residual block: `residual_units_per_block` units with identity skips.
    pub fn residual_block(&mut self, x: Var, name: &str) -> Result<Var> {
        let mut x = x;
        for u in 0..self.arch.residual_units_per_block {
            x = self.unit(x, &format!("{name}.u{u}"))?;
        }
        Ok(x)
    }

    /// Fusion of all live branches into each of them.
    pub fn fuse(&mut self, branches: &[Var], name: &str) -> Result<Vec<Var>> {
        if branches.len() == 1 {
            return Ok(branches.to_vec());
        }
        let mut out = Vec::with_capacity(branches.len());
        for t in 0..branches.len() {
            out.push(self.fuse_into(branches, t, name)?);
        }
        Ok(out)
    }

    /// The fused map for target branch `t` (0-based).
    pub fn fuse_into(&mut self, branches: &[Var], t: usize, name: &str) -> Result<Var> {
        for (b, &v) in branches.iter().enumerate() {
            let want = self.arch.branch_shape(b);
            if self.graph.shape(v)[1..] != want {
                return Err(Error::shape(
                    format!("fusion input branch {}", b + 1),
                    &want,
                    &self.graph.shape(v)[1..],
                ));
            }
        }
        if branches.len() == 1 {
            return Ok(branches[0]);
        }
        let mut acc: Option<Var> = None;
        for (s, &src) in branches.iter().enumerate() {
            let term = if s == t {
                src
            } else if s < t {
                let mut x = src;
                for m in 0..t - s {
                    let cout = self.arch.branch_channels(s + m + 1);
                    x = self.cbr(
                        x,
                        &format!("{name}.to{t}.from{s}.down{m}"),
                        cout,
                        3,
                        2,
                        true,
                    )?;
                }
                x
            } else {
                let side = self.arch.branch_side(t);
                let up = self.graph.resize(src, (side, side))?;
                self.cbr(
                    up,
                    &format!("{name}.to{t}.from{s}.up"),
                    self.arch.branch_channels(t),
                    1,
                    1,
                    false,
                )?
            };
            acc = Some(match acc {
                None => term,
                Some(a) => self.graph.add(a, term)?,
            });
        }
        Ok(self.graph.relu(acc.expect("at least one branch")))
    }

    fn run(
        &mut self,
        trunk: &mut Vec<Var>,
        efms: &mut Vec<Var>,
        range: Range<usize>,
    ) -> Result<()> {
        for i in range {
            match self.plan.steps[i] {
                Step::Transition { phase } => {
                    let src = *trunk.last().expect("live branch");
                    let c = self.arch.branch_channels(phase);
                    let x = self.cbr(src, &format!("trunk.p{phase}.transition"), c, 3, 2, true)?;
                    self.log(format!("efm.b{}", phase + 1), x);
                    trunk.push(x);
                    efms.push(x);
                }
                Step::Blocks { phase, rank, b1 } => {
                    for (br, v) in trunk.iter_mut().enumerate() {
                        *v = self.residual_block(*v, &format!("trunk.p{phase}.b{rank}.br{br}"))?;
                    }
                    if b1 == 0 {
                        self.log("efm.b1", trunk[0]);
                        efms.push(trunk[0]);
                    }
                }
                Step::Fuse { phase, rank } => {
                    *trunk = self.fuse(trunk, &format!("trunk.p{phase}.f{rank}"))?;
                }
            }
        }
        Ok(())
    }

    /// Classification head: `N × C × H × W` Branch-1 features to `N × 4` probabilities.
    pub fn ch(&mut self, x: Var) -> Result<Var> {
        let x = if self.detach_aux {
            self.graph.detach(x)
        } else {
            x
        };
        let a = self.arch.clone();
        let x = self.cbr(x, "ch.conv1", a.head_channels, 3, 2, true)?;
        self.log("ch.conv1", x);
        let x = self.cbr(x, "ch.conv2", a.base_channels, 3, 2, true)?;
        self.log("ch.conv2", x);
        let x = self.graph.avg_pool2(x)?;
        self.log("ch.pool", x);
        let x = self.graph.flatten(x)?;
        self.log("ch.flatten", x);
        let x = self.linear(x, "ch.fc1", a.fc_width)?;
        let x = self.graph.relu(x);
        self.log("ch.fc1", x);
        let x = self.linear(x, "ch.fc2", 4)?;
        self.log("ch.fc2", x);
        self.graph.softmax(x)
    }

    /// Embeds rescaled patches at Branch-1 shape.
    pub fn cmod(&mut self, x: Var) -> Result<Var> {
        let x = self.cbr(x, "cmod.conv1", self.arch.stem_channels, 3, 2, true)?;
        let x = self.cbr(x, "cmod.conv2", self.arch.base_channels, 3, 2, true)?;
        let x = self.residual_block(x, "cmod.rb")?;
        self.log("cmod", x);
        Ok(x)
    }

    /// Concatenates trunk and embedded features, then projects back to C channels.
    pub fn bottleneck(&mut self, b1: Var, cmod: Var) -> Result<Var> {
        let cat = self.graph.concat(&[b1, cmod])?;
        self.cbr(cat, "bl", self.arch.base_channels, 1, 1, true)
    }

    /// Segmentation map of an early feature map of 0-based branch `b`.
    pub fn attention_map(&mut self, efm: Var, b: usize) -> Result<Var> {
        let x = if self.detach_aux {
            self.graph.detach(efm)
        } else {
            efm
        };
        let c = self.arch.branch_channels(b);
        let x = self.cbr(x, &format!("vacm.b{b}.att1"), c, 3, 1, true)?;
        let x = self.cbr(x, &format!("vacm.b{b}.att2"), c, 3, 1, true)?;
        let name = format!("vacm.b{b}.att3");
        let x = self.conv(x, &name, 1, 3, 1)?;
        let bias = self.tensor(&format!("{name}.bias"), &[1], Fill::Zeros)?;
        let x = self.graph.bias(x, bias)?;
        Ok(self.graph.sigmoid(x))
    }

    /// Gates `efm` by `sm`, concatenates with `lfm` and projects to branch channels.
    pub fn attend(&mut self, sm: Var, efm: Var, lfm: Var, b: usize) -> Result<(Var, Var)> {
        let vafm = self.graph.gate(sm, efm)?;
        let ffm = self.merge(vafm, lfm, b)?;
        Ok((vafm, ffm))
    }

    fn merge(&mut self, vafm: Var, lfm: Var, b: usize) -> Result<Var> {
        let cat = self.graph.concat(&[vafm, lfm])?;
        self.cbr(
            cat,
            &format!("vacm.b{b}.merge"),
            self.arch.branch_channels(b),
            1,
            1,
            true,
        )
    }

    /// Regression head over the final feature maps of every branch.
    pub fn crh(&mut self, ffms: &[Var]) -> Result<Var> {
        let side = self.arch.branch_side(0);
        let mut parts = Vec::with_capacity(ffms.len());
        for (b, &f) in ffms.iter().enumerate() {
            let want = self.arch.branch_shape(b);
            if self.graph.shape(f)[1..] != want {
                return Err(Error::shape(
                    format!("regression input branch {}", b + 1),
                    &want,
                    &self.graph.shape(f)[1..],
                ));
            }
            parts.push(if b == 0 {
                f
            } else {
                self.graph.resize(f, (side, side))?
            });
        }
        let cat = self.graph.concat(&parts)?;
        self.log("crh.concat", cat);
        let head = self.arch.head_channels;
        let x = self.cbr(cat, "crh.reduce", head, 3, 2, true)?;
        self.log("crh.reduce", x);
        let x = self.cbr(x, "crh.conv", head, 3, 2, true)?;
        self.log("crh.conv", x);
        let x = self.graph.avg_pool2(x)?;
        self.log("crh.pool", x);
        let x = self.graph.flatten(x)?;
        self.log("crh.flatten", x);
        let x = self.linear(x, "crh.fc1", self.arch.fc_width)?;
        let x = self.graph.relu(x);
        self.log("crh.fc1", x);
        let x = self.linear(x, "crh.fc2", 1)?;
        self.log("crh.fc2", x);
        Ok(x)
    }

    /// Runs the stem and trunk up to the branch-out block, then classifies.
    pub fn stem(&mut self, patches: &[&Tensor]) -> Result<Prefix> {
        let x = self.input(patches)?;
        let ifm = self.idl(x)?;
        self.log("ifm", ifm);
        let mut trunk = vec![ifm];
        let mut efms = Vec::new();
        let end = self.plan.branch_out + 1;
        self.run(&mut trunk, &mut efms, 0..end)?;
        let branch_out = trunk[0];
        self.log("branch_out", branch_out);
        let probs = self.ch(branch_out)?;
        Ok(Prefix {
            batch: patches.len(),
            ifm,
            trunk,
            branch_out,
            probs,
            efms,
            cursor: end,
        })
    }

    /// Advances the trunk to the re-entry block.
    pub fn to_hook(&mut self, prefix: &mut Prefix) -> Result<()> {
        let end = self.plan.hook + 1;
        if prefix.cursor < end {
            self.run(&mut prefix.trunk, &mut prefix.efms, prefix.cursor..end)?;
            prefix.cursor = end;
        }
        Ok(())
    }

    /// Continues the trunk once per route. `sources[i]` is the prefix row
    /// whose trunk state route `i` reuses and `rescaled[i]` its rescaled patch.
    pub fn continue_routes(
        &mut self,
        prefix: &Prefix,
        sources: &[usize],
        rescaled: &[&Tensor],
    ) -> Result<Heads> {
        if prefix.cursor <= self.plan.hook {
            return Err(Error::Inference(
                "trunk has not reached the re-entry block".into(),
            ));
        }
        if sources.len() != rescaled.len() || sources.is_empty() {
            return Err(Error::Argument(format!(
                "{} routes but {} rescaled patches",
                sources.len(),
                rescaled.len()
            )));
        }
        let mut trunk = Vec::with_capacity(prefix.trunk.len());
        for &v in &prefix.trunk {
            trunk.push(self.graph.gather(v, sources)?);
        }
        let x = self.input(rescaled)?;
        let cm = self.cmod(x)?;
        trunk[0] = self.bottleneck(trunk[0], cm)?;
        let pre_hook = prefix.efms.len();
        let mut efms = Vec::new();
        let end = self.plan.steps.len();
        self.run(&mut trunk, &mut efms, self.plan.hook + 1..end)?;
        for (b, &v) in trunk.iter().enumerate() {
            self.log(format!("lfm.b{}", b + 1), v);
        }

        let mut ffms = Vec::with_capacity(trunk.len());
        let mut sms = Vec::new();
        let mut route_efms = Vec::with_capacity(trunk.len());
        for (b, &lfm) in trunk.iter().enumerate() {
            let ffm = if b < pre_hook {
                let efm = prefix.efms[b];
                route_efms.push(self.graph.gather(efm, sources)?);
                if self.arch.vacm_enabled {
                    let sm = self.attention_map(efm, b)?;
                    self.log(format!("sm.b{}", b + 1), sm);
                    let vafm = self.graph.gate(sm, efm)?;
                    let vafm = self.graph.gather(vafm, sources)?;
                    sms.push(SmOutput {
                        branch: b,
                        map: sm,
                        per_route: false,
                    });
                    self.merge(vafm, lfm, b)?
                } else {
                    lfm
                }
            } else {
                let efm = efms[b - pre_hook];
                route_efms.push(efm);
                if self.arch.vacm_enabled {
                    let sm = self.attention_map(efm, b)?;
                    self.log(format!("sm.b{}", b + 1), sm);
                    sms.push(SmOutput {
                        branch: b,
                        map: sm,
                        per_route: true,
                    });
                    self.attend(sm, efm, lfm, b)?.1
                } else {
                    lfm
                }
            };
            self.log(format!("ffm.b{}", b + 1), ffm);
            ffms.push(ffm);
        }
        let counts = self.crh(&ffms)?;
        Ok(Heads {
            counts,
            cmod: cm,
            efms: route_efms,
            lfms: trunk,
            ffms,
            sms,
        })
    }
}
