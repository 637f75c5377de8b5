//! A small define-by-run tape: every op appends a node holding its output,
//! and [`Graph::backward`] walks the tape in reverse.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::loss;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm behaviour: batch statistics (`Train`) or running statistics (`Eval`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by one batch-norm layer during a training forward.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Input,
    Param,
    Conv {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Bias {
        x: Var,
        b: Var,
    },
    Gate {
        gate: Var,
        x: Var,
    },
    Concat(Vec<Var>),
    Resize(Var),
    AvgPool2(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Softmax(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    CrossEntropy {
        probs: Var,
        target: Vec<f64>,
        eps: f64,
    },
    Bce {
        pred: Var,
        target: Vec<f64>,
        eps: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<String, Var>,
    bn_updates: Vec<BnUpdate>,
    trace: Vec<u64>,
}

fn mask_hash(bits: impl Iterator<Item = bool>) -> u64 {
    // FNV-1a over the mask bits.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bits {
        h ^= b as u64 + 1;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            bn_updates: Vec::new(),
            trace: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Batch statistics gathered by training-mode batch norms, in call order.
    pub fn bn_updates(&self) -> &[BnUpdate] {
        &self.bn_updates
    }

    /// Fingerprints of every non-differentiable switch (ReLU masks, loss
    /// clamps) taken during the forward pass, in op order.
    pub fn activation_trace(&self) -> &[u64] {
        &self.trace
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    /// Registers (once) a learnable parameter under `name`.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.shape(w).to_vec();
        let [cout, wcin, k, k2] = ws[..] else {
            return Err(Error::shape("conv2d weight", &[0, cin, 0, 0], &ws));
        };
        if wcin != cin || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d input",
                &[n, wcin, h, wd],
                self.shape(x),
            ));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = kernels::conv2d_forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
        let needs = self.grad_of(&[x, w]);
        Ok(self.push(value, Op::Conv { x, w, geom }, needs))
    }

    /// Per-channel batch normalization. `running` supplies the running
    /// `(mean, var)` used in eval mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&Tensor, &Tensor),
        layer: &str,
        eps: f64,
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape(
                    format!("batch norm {layer}"),
                    &[c],
                    self.shape(p),
                ));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let xs = self.value(x).data();
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter()
                        .sum::<f64>();
                }
                let mu = s / m as f64;
                let mut v = 0.0;
                for i in 0..n {
                    v += xs[(i * c + ch) * hw..(i * c + ch + 1) * hw]
                        .iter()
                        .map(|&a| (a - mu) * (a - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = v / m as f64;
            }
            (mean, var)
        } else {
            (running.0.data().to_vec(), running.1.data().to_vec())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xs[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = g[ch] * xh + b[ch];
                }
            }
        }
        if batch_stats {
            let unbiased = if m > 1 {
                var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect()
            } else {
                var.clone()
            };
            self.bn_updates.push(BnUpdate {
                layer: layer.to_string(),
                mean,
                var: unbiased,
            });
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let needs = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.trace
            .push(mask_hash(self.value(x).data().iter().map(|&v| v > 0.0)));
        let needs = self.grad_of(&[x]);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.grad_of(&[x]);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        for (o, v) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        let needs = self.grad_of(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    /// Adds `b[c]` to every element of channel `c`.
    pub fn bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = self.value(x).dims4()?;
        if self.shape(b) != [c] {
            return Err(Error::shape("bias", &[c], self.shape(b)));
        }
        let hw = h * w;
        let bs = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, chunk) in value.data_mut().chunks_mut(hw).enumerate() {
            for v in chunk {
                *v += bs[i % c];
            }
        }
        let needs = self.grad_of(&[x, b]);
        Ok(self.push(value, Op::Bias { x, b }, needs))
    }

    /// Multiplies every channel of `x` by the single-channel map `gate`.
    pub fn gate(&mut self, gate: Var, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gate) != [n, 1, h, w] {
            return Err(Error::shape("gate", &[n, 1, h, w], self.shape(gate)));
        }
        let hw = h * w;
        let gs = self.value(gate).data();
        let mut value = self.value(x).clone();
        let data = value.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in 0..hw {
                    data[base + j] *= gs[i * hw + j];
                }
            }
        }
        let needs = self.grad_of(&[gate, x]);
        Ok(self.push(value, Op::Gate { gate, x }, needs))
    }

    /// Channel-wise concatenation of rank-4 tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = self.value(parts[0]).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", &[n, pc, h, w], self.shape(p)));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for i in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[i * pc * hw..(i + 1) * pc * hw]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        let needs = self.grad_of(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), needs))
    }

    /// Half-pixel bilinear resize of every plane to `(h, w)`.
    pub fn resize(&mut self, x: Var, (ho, wo): (usize, usize)) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = vec![0.0; n * c * ho * wo];
        let src = self.value(x).data();
        for p in 0..n * c {
            kernels::resize_plane(
                &src[p * h * w..(p + 1) * h * w],
                (h, w),
                &mut out[p * ho * wo..(p + 1) * ho * wo],
                (ho, wo),
            );
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let needs = self.grad_of(&[x]);
        Ok(self.push(value, Op::Resize(x), needs))
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::shape("avg_pool2", &[n, c, 2, 2], self.shape(x)));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for p in 0..n * c {
            let s = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let (y, xx) = (2 * oy, 2 * ox);
                    out[p * ho * wo + oy * wo + ox] = 0.25
                        * (s[y * w + xx]
                            + s[y * w + xx + 1]
                            + s[(y + 1) * w + xx]
                            + s[(y + 1) * w + xx + 1]);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        let needs = self.grad_of(&[x]);
        Ok(self.push(value, Op::AvgPool2(x), needs))
    }

    /// Collapses all non-batch axes.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let f = shape[1..].iter().product::<usize>();
        let value = self.value(x).clone().reshape(&[n, f])?;
        let needs = self.grad_of(&[x]);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// `y = x·Wᵀ + b` with `W: out × in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, f], &[o, wf]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::shape("linear", &[0, 0], &xs));
        };
        if wf != f || self.shape(b) != [o] {
            return Err(Error::shape("linear weight", &[o, f], &ws));
        }
        let (xd, wd, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let row = &xd[i * f..(i + 1) * f];
            for j in 0..o {
                let wr = &wd[j * f..(j + 1) * f];
                out[i * o + j] = bd[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let value = Tensor::from_vec(&[n, o], out)?;
        let needs = self.grad_of(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Row-wise softmax of an `N × K` tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, k] = shape[..] else {
            return Err(Error::shape("softmax", &[0, 0], &shape));
        };
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            loss::softmax_in_place(&mut out[i * k..(i + 1) * k]);
        }
        let value = Tensor::from_vec(&[n, k], out)?;
        let needs = self.grad_of(&[x]);
        Ok(self.push(value, Op::Softmax(x), needs))
    }

    /// Selects batch rows `index` (with repetition) from `x`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let row = shape[1..].iter().product::<usize>();
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            if i >= n {
                return Err(Error::Argument(format!(
                    "gather index {i} out of range {n}"
                )));
            }
            out.extend_from_slice(&self.value(x).data()[i * row..(i + 1) * row]);
        }
        let mut new_shape = shape.clone();
        new_shape[0] = index.len();
        let value = Tensor::from_vec(&new_shape, out)?;
        let needs = self.grad_of(&[x]);
        Ok(self.push(
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Mean squared error between the entries of `pred` and `target`.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::shape("mse", &[target.len()], self.shape(pred)));
        }
        let value = loss::regression_loss(self.value(pred).data(), target)?;
        let needs = self.grad_of(&[pred]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Batch-mean categorical cross entropy of `N × K` probabilities.
    pub fn cross_entropy(&mut self, probs: Var, target: &[f64], eps: f64) -> Result<Var> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || self.value(probs).len() != target.len() {
            return Err(Error::shape("cross_entropy", &[target.len()], &shape));
        }
        let k = shape[1];
        let value = loss::classification_loss(self.value(probs).data(), target, k, eps)?;
        self.trace.push(mask_hash(
            self.value(probs)
                .data()
                .iter()
                .map(|&p| p < eps || p > 1.0 - eps),
        ));
        let needs = self.grad_of(&[probs]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                probs,
                target: target.to_vec(),
                eps,
            },
            needs,
        ))
    }

    /// Mean binary cross entropy over every element of `pred`.
    pub fn bce(&mut self, pred: Var, target: &[f64], eps: f64) -> Result<Var> {
        if self.value(pred).len() != target.len() {
            return Err(Error::shape("bce", &[target.len()], self.shape(pred)));
        }
        let value = loss::segmentation_loss(self.value(pred).data(), target, eps)?;
        self.trace.push(mask_hash(
            self.value(pred)
                .data()
                .iter()
                .map(|&p| p < eps || p > 1.0 - eps),
        ));
        let needs = self.grad_of(&[pred]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::Bce {
                pred,
                target: target.to_vec(),
                eps,
            },
            needs,
        ))
    }

    /// `Σ wᵢ·termᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum", &[1], self.shape(v)));
            }
            total += w * self.value(v).data()[0];
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let needs = self.grad_of(&vars);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            needs,
        ))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root", &[1], self.shape(root)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = node.value.dims4().expect("rank-4 batch norm");
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in base..base + hw {
                            dgamma[ch] += dy[j] * xhat[j];
                            dbeta[ch] += dy[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if *batch_stats {
                                    scale / m * (m * dy[j] - dbeta[ch] - xhat[j] * dgamma[ch])
                                } else {
                                    scale * dy[j]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let dx = dy
                    .iter()
                    .zip(xs)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                let dx = dy
                    .iter()
                    .zip(ys)
                    .map(|(&d, &s)| d * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy.to_vec());
                }
            }
            Op::Bias { x, b } => {
                let c = self.shape(*b)[0];
                let hw = dy.len() / (self.shape(*x)[0] * c);
                let mut db = vec![0.0; c];
                for (i, chunk) in dy.chunks(hw).enumerate() {
                    db[i % c] += chunk.iter().sum::<f64>();
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dy.to_vec());
                }
                accumulate(grads, *b, db);
            }
            Op::Gate { gate, x } => {
                let (n, c, h, w) = node.value.dims4().expect("rank-4 gate");
                let hw = h * w;
                let gs = self.value(*gate).data();
                let xs = self.value(*x).data();
                let mut dg = vec![0.0; n * hw];
                let mut dx = vec![0.0; dy.len()];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for j in 0..hw {
                            dx[base + j] = dy[base + j] * gs[i * hw + j];
                            dg[i * hw + j] += dy[base + j] * xs[base + j];
                        }
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gate) {
                    accumulate(grads, *gate, dg);
                }
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = node.value.dims4().expect("rank-4 concat");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(n * pc * hw);
                        for i in 0..n {
                            let start = (i * total + offset) * hw;
                            dp.extend_from_slice(&dy[start..start + pc * hw]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += pc;
                }
            }
            Op::Resize(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank-4 resize");
                let (_, _, ho, wo) = node.value.dims4().expect("rank-4 resize");
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    kernels::resize_plane_adjoint(
                        &dy[p * ho * wo..(p + 1) * ho * wo],
                        (ho, wo),
                        &mut dx[p * h * w..(p + 1) * h * w],
                        (h, w),
                    );
                }
                accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let (n, c, h, w) = self.value(*x).dims4().expect("rank-4 pool");
                let (ho, wo) = (h / 2, w / 2);
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = 0.25 * dy[p * ho * wo + oy * wo + ox];
                            let base = p * h * w;
                            let (y, xx) = (2 * oy, 2 * ox);
                            dx[base + y * w + xx] += g;
                            dx[base + y * w + xx + 1] += g;
                            dx[base + (y + 1) * w + xx] += g;
                            dx[base + (y + 1) * w + xx + 1] += g;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, dy.to_vec()),
            Op::Linear { x, w, b } => {
                let [n, f] = self.shape(*x)[..] else {
                    unreachable!()
                };
                let o = self.shape(*w)[0];
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                if self.wants(*x) {
                    let mut dx = vec![0.0; n * f];
                    for i in 0..n {
                        for j in 0..o {
                            let d = dy[i * o + j];
                            for (a, &wv) in dx[i * f..(i + 1) * f]
                                .iter_mut()
                                .zip(&wd[j * f..(j + 1) * f])
                            {
                                *a += d * wv;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                let mut dw = vec![0.0; o * f];
                let mut db = vec![0.0; o];
                for i in 0..n {
                    for j in 0..o {
                        let d = dy[i * o + j];
                        db[j] += d;
                        for (a, &xv) in dw[j * f..(j + 1) * f]
                            .iter_mut()
                            .zip(&xd[i * f..(i + 1) * f])
                        {
                            *a += d * xv;
                        }
                    }
                }
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Softmax(x) => {
                let [n, k] = node.value.shape()[..] else {
                    unreachable!()
                };
                let p = node.value.data();
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let row = i * k..(i + 1) * k;
                    let dot: f64 = dy[row.clone()]
                        .iter()
                        .zip(&p[row.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for j in row {
                        dx[j] = p[j] * (dy[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { x, index } => {
                let shape = self.shape(*x);
                let row = shape[1..].iter().product::<usize>();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (j, &i) in index.iter().enumerate() {
                    for (a, b) in dx[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&dy[j * row..(j + 1) * row])
                    {
                        *a += b;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Mse { pred, target } => {
                let m = target.len() as f64;
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| dy[0] * 2.0 * (p - t) / m)
                    .collect();
                accumulate(grads, *pred, dx);
            }
            Op::CrossEntropy { probs, target, eps } => {
                let n = self.shape(*probs)[0] as f64;
                let dx = self
                    .value(*probs)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            -dy[0] * t / (p * n)
                        }
                    })
                    .collect();
                accumulate(grads, *probs, dx);
            }
            Op::Bce { pred, target, eps } => {
                let m = target.len() as f64;
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            dy[0] * (-t / p + (1.0 - t) / (1.0 - p)) / m
                        }
                    })
                    .collect();
                accumulate(grads, *pred, dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.wants(v) {
                        accumulate(grads, v, vec![dy[0] * w]);
                    }
                }
            }
        }
    }

    /// Names of the parameters registered so far.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`, if any path reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every registered parameter; unreached parameters get zeros.
    pub fn params(&self, graph: &Graph) -> BTreeMap<String, Tensor> {
        graph
            .params
            .iter()
            .map(|(name, &v)| {
                let shape = graph.shape(v);
                let t = match self.get(v) {
                    Some(g) => Tensor::from_vec(shape, g.to_vec()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect()
    }
}
