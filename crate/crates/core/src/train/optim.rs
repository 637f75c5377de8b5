use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;

/// Key prefix of velocity tensors stored in checkpoints.
pub const VELOCITY_PREFIX: &str = "optim.velocity.";

/// Stochastic gradient descent with (Nesterov) momentum and decoupled-from-BN
/// L2 weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, nesterov: bool, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            nesterov,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// One update: `g = ∇ + λ·p` (λ = 0 for batch-norm scale/shift),
    /// `v ← μ·v + g`, then `p ← p − lr·(g + μ·v)` (Nesterov) or `p ← p − lr·v`.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if p.shape() != grad.shape() {
                return Err(Error::shape(
                    format!("gradient of {name}"),
                    p.shape(),
                    grad.shape(),
                ));
            }
            let decay = if ModelState::is_norm_param(name) {
                0.0
            } else {
                self.weight_decay
            };
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let mu = self.momentum;
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                let g = gv + decay * *pv;
                *vv = mu * *vv + g;
                *pv -= lr * if self.nesterov { g + mu * *vv } else { *vv };
            }
        }
        Ok(())
    }

    pub fn to_extras(&self) -> BTreeMap<String, Tensor> {
        self.velocity
            .iter()
            .map(|(k, v)| (format!("{VELOCITY_PREFIX}{k}"), v.clone()))
            .collect()
    }

    pub fn load_extras(&mut self, extras: &BTreeMap<String, Tensor>) {
        self.velocity = extras
            .iter()
            .filter_map(|(k, v)| {
                k.strip_prefix(VELOCITY_PREFIX)
                    .map(|n| (n.to_string(), v.clone()))
            })
            .collect();
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nesterov_matches_hand_update() {
        let mut params =
            BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![1.0]).unwrap())]);
        let grads = BTreeMap::from([("w".to_string(), Tensor::from_vec(&[1], vec![0.5]).unwrap())]);
        let mut opt = Sgd::new(0.9, true, 0.1);
        opt.step(&mut params, &grads, 0.1).unwrap();
        // g = 0.5 + 0.1 = 0.6, v = 0.6, p = 1 − 0.1·(0.6 + 0.54)
        assert!((params["w"].data()[0] - (1.0 - 0.1 * 1.14)).abs() < 1e-15);
        opt.step(&mut params, &grads, 0.1).unwrap();
        let p1 = 1.0 - 0.114;
        let g = 0.5 + 0.1 * p1;
        let v = 0.9 * 0.6 + g;
        assert!((params["w"].data()[0] - (p1 - 0.1 * (g + 0.9 * v))).abs() < 1e-15);
    }

    #[test]
    fn norm_params_skip_decay() {
        let mut params = BTreeMap::from([("x.bn.gamma".to_string(), Tensor::full(&[1], 2.0))]);
        let grads = BTreeMap::from([("x.bn.gamma".to_string(), Tensor::zeros(&[1]))]);
        let mut opt = Sgd::new(0.9, true, 1.0);
        opt.step(&mut params, &grads, 0.1).unwrap();
        assert_eq!(params["x.bn.gamma"].data()[0], 2.0);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([(
            "a".to_string(),
            Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(),
        )]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }
}
