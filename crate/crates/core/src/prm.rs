//! Patch rescaling: maps a patch and its density class to zero, one or four
//! rescaled patches of the same size.

use serde::{Deserialize, Serialize};

use crate::data::{CrowdClass, Point};
use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::tensor::Tensor;
use crate::tiling::PATCH_SIZE;

/// How low-crowd patches are rescaled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LcpRule {
    /// Downscale 2× and center on a zero canvas.
    #[default]
    ShrinkCentered,
    /// Pass through unchanged.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// `(row, col)` offset of the quadrant in a patch of side `side`.
    pub fn offset(self, side: usize) -> (usize, usize) {
        let h = side / 2;
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, h),
            Quadrant::BottomLeft => (h, 0),
            Quadrant::BottomRight => (h, h),
        }
    }
}

/// Where a rescaled patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Identity,
    Shrunk,
    Quadrant(Quadrant),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RescaleOutcome {
    pub patches: Vec<Tensor>,
    pub provenance: Vec<Provenance>,
}

/// Number of patches the rescaler emits for `class`.
pub fn output_count(class: CrowdClass) -> usize {
    match class {
        CrowdClass::Ncp => 0,
        CrowdClass::Lcp | CrowdClass::Mcp => 1,
        CrowdClass::Hcp => 4,
    }
}

/// Rescaler for square patches of a fixed side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prm {
    pub side: usize,
    pub lcp: LcpRule,
}

impl Default for Prm {
    fn default() -> Self {
        Prm {
            side: PATCH_SIZE,
            lcp: LcpRule::default(),
        }
    }
}

/// [`Prm::rescale`] with the default 256-pixel rescaler.
pub fn prm_rescale(patch: &Tensor, class: CrowdClass) -> Result<RescaleOutcome> {
    Prm::default().rescale(patch, class)
}

impl Prm {
    pub fn new(side: usize, lcp: LcpRule) -> Result<Self> {
        if side < 2 || !side.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "rescaler side must be even, got {side}"
            )));
        }
        Ok(Prm { side, lcp })
    }

    fn check(&self, patch: &Tensor) -> Result<usize> {
        match *patch.shape() {
            [c, h, w] if h == self.side && w == self.side => Ok(c),
            _ => Err(Error::Argument(format!(
                "rescaler expects C×{s}×{s}, got {:?}",
                patch.shape(),
                s = self.side
            ))),
        }
    }

    /// The rescaling route `class` takes, without touching pixels.
    pub fn plan(&self, class: CrowdClass) -> Vec<Provenance> {
        match class {
            CrowdClass::Ncp => vec![],
            CrowdClass::Mcp => vec![Provenance::Identity],
            CrowdClass::Lcp => match self.lcp {
                LcpRule::ShrinkCentered => vec![Provenance::Shrunk],
                LcpRule::Identity => vec![Provenance::Identity],
            },
            CrowdClass::Hcp => Quadrant::ALL
                .iter()
                .map(|&q| Provenance::Quadrant(q))
                .collect(),
        }
    }

    pub fn rescale(&self, patch: &Tensor, class: CrowdClass) -> Result<RescaleOutcome> {
        self.check(patch)?;
        let provenance = self.plan(class);
        let patches = provenance
            .iter()
            .map(|&p| self.apply(patch, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(RescaleOutcome {
            patches,
            provenance,
        })
    }

    /// Produces one rescaled patch for a single route.
    pub fn apply(&self, patch: &Tensor, route: Provenance) -> Result<Tensor> {
        let c = self.check(patch)?;
        let s = self.side;
        let half = s / 2;
        match route {
            Provenance::Identity => Ok(patch.clone()),
            Provenance::Shrunk => {
                let small = bilinear_resize(patch, (half, half))?;
                let off = s / 4;
                let mut out = Tensor::zeros(&[c, s, s]);
                let data = out.data_mut();
                for ch in 0..c {
                    for r in 0..half {
                        let src = &small.data()[(ch * half + r) * half..(ch * half + r + 1) * half];
                        let dst = (ch * s + r + off) * s + off;
                        data[dst..dst + half].copy_from_slice(src);
                    }
                }
                Ok(out)
            }
            Provenance::Quadrant(q) => {
                let quad = quadrant(patch, q, s)?;
                bilinear_resize(&quad, (s, s))
            }
        }
    }

    /// Maps patch-local annotations onto the rescaled patch for `route`,
    /// keeping only those that land in it.
    pub fn map_points(&self, points: &[Point], route: Provenance) -> Vec<Point> {
        let s = self.side;
        match route {
            Provenance::Identity => points.to_vec(),
            // Half-pixel mapping of a 2× downscale, shifted onto the canvas.
            Provenance::Shrunk => points
                .iter()
                .map(|p| Point {
                    x: p.x / 2.0 - 0.25 + (s / 4) as f64,
                    y: p.y / 2.0 - 0.25 + (s / 4) as f64,
                })
                .collect(),
            Provenance::Quadrant(q) => {
                let (r0, c0) = q.offset(s);
                points
                    .iter()
                    .filter(|p| {
                        let (pr, pc) = p.pixel(s, s);
                        (r0..r0 + s / 2).contains(&pr) && (c0..c0 + s / 2).contains(&pc)
                    })
                    .map(|p| Point {
                        x: 2.0 * (p.x - c0 as f64) + 0.5,
                        y: 2.0 * (p.y - r0 as f64) + 0.5,
                    })
                    .collect()
            }
        }
    }
}

/// The `side/2` square quadrant `q` of a `C × side × side` tensor.
pub fn quadrant(patch: &Tensor, q: Quadrant, side: usize) -> Result<Tensor> {
    let [c, h, w] = patch.shape()[..] else {
        return Err(Error::Argument("quadrant expects C×H×W".into()));
    };
    if h != side || w != side {
        return Err(Error::shape("quadrant", &[c, side, side], patch.shape()));
    }
    let half = side / 2;
    let (r0, c0) = q.offset(side);
    let mut data = Vec::with_capacity(c * half * half);
    for ch in 0..c {
        for r in 0..half {
            let start = (ch * side + r0 + r) * side + c0;
            data.extend_from_slice(&patch.data()[start..start + half]);
        }
    }
    Tensor::from_vec(&[c, half, half], data)
}
