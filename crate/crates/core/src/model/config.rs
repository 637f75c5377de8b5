use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prm::LcpRule;

/// Residual unit flavour.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitDepth {
    /// 3×3 → 3×3.
    TwoLayer,
    /// 1×1 reduce → 3×3 → 1×1 expand.
    #[default]
    ThreeLayer,
}

/// Architecture hyperparameters. Every parameter shape is a function of
/// this struct alone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Channels of Branch-1; branch `x` carries `base_channels · 2^(x−1)`.
    pub base_channels: usize,
    pub num_branches: usize,
    pub residual_units_per_block: usize,
    pub unit_depth: UnitDepth,
    /// Side of the square input patch.
    pub input_size: usize,
    /// Index (0-based, along Branch-1) of the residual block whose output
    /// feeds the classification head. Rescaled patches re-enter after the
    /// next Branch-1 block.
    pub branch_out_block: usize,
    pub vacm_enabled: bool,
    /// Residual blocks per phase; `None` uses [`ArchConfig::default_layout`].
    pub blocks_per_phase: Option<Vec<usize>>,
    /// Filters of the two stride-2 stem convolutions (and of CMod's first).
    pub stem_channels: usize,
    /// Filters of the stride-2 convolutions inside the two heads.
    pub head_channels: usize,
    /// Width of the hidden fully connected layer in both heads.
    pub fc_width: usize,
    /// Channel reduction inside a 3-layer residual unit.
    pub bottleneck_ratio: usize,
    pub lcp_rule: LcpRule,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            base_channels: 32,
            num_branches: 3,
            residual_units_per_block: 4,
            unit_depth: UnitDepth::ThreeLayer,
            input_size: 256,
            branch_out_block: 1,
            vacm_enabled: true,
            blocks_per_phase: None,
            stem_channels: 64,
            head_channels: 64,
            fc_width: 1024,
            bottleneck_ratio: 4,
            lcp_rule: LcpRule::ShrinkCentered,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ArchConfig {
    /// Desk-scale network: 4 base channels on 64×64 patches.
    pub fn tiny() -> Self {
        ArchConfig {
            base_channels: 4,
            input_size: 64,
            stem_channels: 8,
            head_channels: 8,
            fc_width: 32,
            bottleneck_ratio: 2,
            ..ArchConfig::default()
        }
    }

    /// One block in the first phase and two in each later phase. A
    /// single-branch network gets three blocks so branch-out and re-entry
    /// both have a home.
    pub fn default_layout(num_branches: usize) -> Vec<usize> {
        if num_branches == 1 {
            vec![3]
        } else {
            std::iter::once(1)
                .chain(std::iter::repeat_n(2, num_branches - 1))
                .collect()
        }
    }

    pub fn layout(&self) -> Vec<usize> {
        self.blocks_per_phase
            .clone()
            .unwrap_or_else(|| Self::default_layout(self.num_branches))
    }

    /// Channels of 0-based branch `b`.
    pub fn branch_channels(&self, b: usize) -> usize {
        self.base_channels << b
    }

    /// Spatial side of 0-based branch `b`.
    pub fn branch_side(&self, b: usize) -> usize {
        self.input_size / (4 << b)
    }

    /// `(channels, side, side)` of 0-based branch `b`.
    pub fn branch_shape(&self, b: usize) -> [usize; 3] {
        let s = self.branch_side(b);
        [self.branch_channels(b), s, s]
    }

    /// Bottleneck width of a 3-layer unit on `channels` channels.
    pub fn unit_width(&self, channels: usize) -> usize {
        (channels / self.bottleneck_ratio).max(1)
    }

    /// Convolutions per residual block.
    pub fn convs_per_block(&self) -> usize {
        let per_unit = match self.unit_depth {
            UnitDepth::TwoLayer => 2,
            UnitDepth::ThreeLayer => 3,
        };
        per_unit * self.residual_units_per_block
    }

    pub fn reentry_block(&self) -> usize {
        self.branch_out_block + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=4).contains(&self.num_branches) {
            return bad(format!(
                "num_branches must be in 1..=4, got {}",
                self.num_branches
            ));
        }
        if self.base_channels == 0
            || self.stem_channels == 0
            || self.head_channels == 0
            || self.fc_width == 0
        {
            return bad("channel counts must be positive".into());
        }
        if self.residual_units_per_block == 0 || self.bottleneck_ratio == 0 {
            return bad("residual units and bottleneck ratio must be positive".into());
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return bad(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            ));
        }
        if self.branch_side(self.num_branches - 1) == 0 {
            return bad(format!(
                "input_size {} too small for {} branches",
                self.input_size, self.num_branches
            ));
        }
        let layout = self.layout();
        if layout.len() != self.num_branches || layout.contains(&0) {
            return bad(format!(
                "blocks_per_phase {layout:?} must list a positive count for each of {} phases",
                self.num_branches
            ));
        }
        let total: usize = layout.iter().sum();
        if self.reentry_block() >= total {
            return bad(format!(
                "branch_out_block {} leaves no later Branch-1 block to re-enter ({} blocks)",
                self.branch_out_block, total
            ));
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule() {
        let a = ArchConfig::default();
        assert_eq!(a.branch_shape(0), [32, 64, 64]);
        assert_eq!(a.branch_shape(1), [64, 32, 32]);
        assert_eq!(a.branch_shape(2), [128, 16, 16]);
        assert_eq!(a.layout(), vec![1, 2, 2]);
        assert_eq!(a.convs_per_block(), 12);
        a.validate().unwrap();
    }

    #[test]
    fn tiny_schedule() {
        let a = ArchConfig::tiny();
        assert_eq!(a.branch_shape(0), [4, 16, 16]);
        assert_eq!(a.branch_shape(2), [16, 4, 4]);
        a.validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = [
            ArchConfig {
                num_branches: 5,
                ..ArchConfig::default()
            },
            ArchConfig {
                branch_out_block: 4,
                ..ArchConfig::default()
            },
            ArchConfig {
                input_size: 100,
                ..ArchConfig::default()
            },
        ];
        for a in bad {
            assert!(a.validate().is_err());
        }
        for n in 1..=4 {
            let a = ArchConfig {
                num_branches: n,
                ..ArchConfig::default()
            };
            a.validate().unwrap();
        }
    }
}
