use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::ArchConfig;
use super::net::Net;
use crate::data::DatasetStats;
use crate::error::{Error, Result};
use crate::tensor::{BnUpdate, Tensor};
use crate::tiling::Patch;

/// Per-channel input standardization applied after scaling pixels to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Normalization {
    /// Channel statistics of `patches` (pixel values divided by 255).
    pub fn from_patches<'a>(patches: impl IntoIterator<Item = &'a Patch>) -> Self {
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        let mut n = 0usize;
        for p in patches {
            let plane = p.side() * p.side();
            for (c, chunk) in p.pixels.data().chunks(plane).enumerate() {
                for &v in chunk {
                    let v = v / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += plane;
        }
        if n == 0 {
            return Normalization::default();
        }
        let mut out = Normalization::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = var.sqrt().max(1e-3);
        }
        out
    }

    /// Maps a `3 × H × W` pixel tensor in [0, 255] to network input.
    pub fn apply(&self, pixels: &Tensor) -> Tensor {
        let plane = pixels.len() / 3;
        let mut out = pixels.clone();
        for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            for v in chunk {
                *v = (*v / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }
}

/// Bookkeeping stored alongside the weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
}

/// Everything needed to run the network: weights, batch-norm running
/// statistics, and the configuration that shaped them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub arch: ArchConfig,
    pub stats: DatasetStats,
    pub norm: Normalization,
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
    pub meta: TrainMeta,
}

/// Seed for the parameter called `name`, independent of creation order.
pub(crate) fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// He-normal tensor with the given fan-in.
pub(crate) fn he_normal(shape: &[usize], fan_in: usize, seed: u64) -> Tensor {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches length")
}

impl ModelState {
    /// Freshly initialized weights for `arch`.
    pub fn init(
        arch: &ArchConfig,
        stats: DatasetStats,
        norm: Normalization,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let (params, buffers) = Net::materialize(arch, seed)?;
        Ok(ModelState {
            arch: arch.clone(),
            stats,
            norm,
            params,
            buffers,
            meta: TrainMeta {
                seed,
                ..TrainMeta::default()
            },
        })
    }

    /// Number of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Parameter-group prefix used for reporting (`trunk.p1`, `vacm`, ...).
    pub fn group_of(name: &str) -> &str {
        let mut parts = name.splitn(3, '.');
        let head = parts.next().unwrap_or(name);
        if head == "trunk" {
            let len = head.len() + 1 + parts.next().map_or(0, str::len);
            &name[..len.min(name.len())]
        } else {
            head
        }
    }

    /// True for batch-norm scale and shift, which are exempt from weight decay.
    pub fn is_norm_param(name: &str) -> bool {
        name.ends_with(".bn.gamma") || name.ends_with(".bn.beta")
    }

    /// Folds one training step's batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) -> Result<()> {
        let m = self.arch.bn_momentum;
        for u in updates {
            for (suffix, values) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.layer);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::MissingParam(key.clone()))?;
                for (r, &v) in buf.data_mut().iter_mut().zip(values.iter()) {
                    *r = (1.0 - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }

    /// Errors unless every tensor has the shape `arch` implies.
    pub fn check_shapes(&self) -> Result<()> {
        let (params, buffers) = Net::materialize(&self.arch, 0)?;
        for (kind, want, have) in [
            ("parameter", &params, &self.params),
            ("buffer", &buffers, &self.buffers),
        ] {
            for (name, t) in want {
                match have.get(name) {
                    None => return Err(Error::MissingParam(format!("{kind} {name}"))),
                    Some(h) if h.shape() != t.shape() => {
                        return Err(Error::shape(format!("{kind} {name}"), t.shape(), h.shape()))
                    }
                    _ => {}
                }
            }
            if let Some(extra) = have.keys().find(|k| !want.contains_key(*k)) {
                return Err(Error::Checkpoint(format!("unexpected {kind} {extra}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups() {
        assert_eq!(
            ModelState::group_of("trunk.p1.b0.br0.u0.conv1.weight"),
            "trunk.p1"
        );
        assert_eq!(ModelState::group_of("vacm.b0.att1.weight"), "vacm");
        assert_eq!(ModelState::group_of("bl.weight"), "bl");
        assert!(ModelState::is_norm_param("idl.conv1.bn.gamma"));
        assert!(!ModelState::is_norm_param("idl.conv1.weight"));
    }

    #[test]
    fn normalization_roundtrip() {
        let px = Tensor::from_vec(&[3, 1, 2], vec![0.0, 255.0, 51.0, 102.0, 255.0, 255.0]).unwrap();
        let p = Patch::new(Tensor::zeros(&[3, 2, 2]), (0, 0), vec![]).unwrap();
        let n = Normalization::from_patches([&p]);
        assert_eq!(n.mean, [0.0; 3]);
        let out = Normalization::default().apply(&px);
        assert!((out.data()[1] - 1.0).abs() < 1e-15);
        assert!((out.data()[2] - 0.2).abs() < 1e-15);
    }
}
