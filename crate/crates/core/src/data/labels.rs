use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Four-way crowd-density class of a patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CrowdClass {
    #[serde(rename = "NCP")]
    Ncp,
    #[serde(rename = "LCP")]
    Lcp,
    #[serde(rename = "MCP")]
    Mcp,
    #[serde(rename = "HCP")]
    Hcp,
}

impl CrowdClass {
    pub const ALL: [CrowdClass; 4] = [
        CrowdClass::Ncp,
        CrowdClass::Lcp,
        CrowdClass::Mcp,
        CrowdClass::Hcp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; 4] {
        let mut v = [0.0; 4];
        v[self.index()] = 1.0;
        v
    }
}

impl fmt::Display for CrowdClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrowdClass::Ncp => "NCP",
            CrowdClass::Lcp => "LCP",
            CrowdClass::Mcp => "MCP",
            CrowdClass::Hcp => "HCP",
        })
    }
}

impl FromStr for CrowdClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NCP" => Ok(CrowdClass::Ncp),
            "LCP" => Ok(CrowdClass::Lcp),
            "MCP" => Ok(CrowdClass::Mcp),
            "HCP" => Ok(CrowdClass::Hcp),
            _ => Err(Error::Argument(format!("unknown crowd class `{s}`"))),
        }
    }
}

/// Ground-truth class of a patch holding `cc_gt` people, relative to the
/// dataset-wide per-patch maximum `cc_max`.
///
/// The 5% and 20% thresholds are compared as `100·cc_gt` against
/// `5·cc_max` / `20·cc_max` so no boundary is lost to rounding.
pub fn label_patch(cc_gt: i64, cc_max: i64) -> Result<CrowdClass> {
    if cc_gt < 0 {
        return Err(Error::Argument(format!("negative patch count {cc_gt}")));
    }
    if cc_max < 1 {
        return Err(Error::Argument(format!(
            "cc_max must be positive, got {cc_max}"
        )));
    }
    let scaled = 100 * cc_gt as i128;
    let max = cc_max as i128;
    Ok(if cc_gt == 0 {
        CrowdClass::Ncp
    } else if scaled <= 5 * max {
        CrowdClass::Lcp
    } else if scaled <= 20 * max {
        CrowdClass::Mcp
    } else {
        CrowdClass::Hcp
    })
}

/// Dataset-level statistics needed for labelling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    /// Largest ground-truth count of any tile in the training split.
    pub cc_max: i64,
}

impl DatasetStats {
    /// Maximum over per-tile counts, floored at 1.
    pub fn from_counts(counts: impl IntoIterator<Item = usize>) -> Self {
        let cc_max = counts.into_iter().max().unwrap_or(0).max(1) as i64;
        DatasetStats { cc_max }
    }

    pub fn label(&self, count: usize) -> CrowdClass {
        label_patch(count as i64, self.cc_max).expect("cc_max is positive by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_cases() {
        assert_eq!(label_patch(0, 100).unwrap(), CrowdClass::Ncp);
        assert_eq!(label_patch(5, 100).unwrap(), CrowdClass::Lcp);
        assert_eq!(label_patch(6, 100).unwrap(), CrowdClass::Mcp);
        assert_eq!(label_patch(20, 100).unwrap(), CrowdClass::Mcp);
        assert_eq!(label_patch(21, 100).unwrap(), CrowdClass::Hcp);
    }

    #[test]
    fn argument_errors() {
        assert!(label_patch(-1, 100).is_err());
        assert!(label_patch(3, 0).is_err());
    }

    #[test]
    fn stats_floor_at_one() {
        assert_eq!(DatasetStats::from_counts([0, 0]).cc_max, 1);
        assert_eq!(DatasetStats::from_counts([3, 17, 2]).cc_max, 17);
    }

    #[test]
    fn class_roundtrips_through_text() {
        for c in CrowdClass::ALL {
            assert_eq!(c.to_string().parse::<CrowdClass>().unwrap(), c);
        }
    }
}
