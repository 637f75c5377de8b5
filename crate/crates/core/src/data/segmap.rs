use crate::data::Point;
use crate::error::{Error, Result};

/// Binary segmentation target at a given resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegTarget {
    pub map: Vec<u8>,
    pub resolution: (usize, usize),
}

impl SegTarget {
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.map[row * self.resolution.1 + col]
    }

    pub fn ones(&self) -> usize {
        self.map.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.map.iter().map(|&v| v as f64).collect()
    }
}

/// Head-disk target for a 256×256 patch, max-pooled to `out_resolution`.
pub fn make_gt_segmap(
    points: &[Point],
    radius: f64,
    out_resolution: (usize, usize),
) -> Result<SegTarget> {
    make_gt_segmap_sized(points, radius, 256, out_resolution)
}

/// Like [`make_gt_segmap`] for a square patch of side `side`.
///
/// A full-resolution pixel is 1 iff its integer coordinate lies within
/// Euclidean distance `radius` of a point; each output cell is the max over
/// its block.
pub fn make_gt_segmap_sized(
    points: &[Point],
    radius: f64,
    side: usize,
    (oh, ow): (usize, usize),
) -> Result<SegTarget> {
    if oh == 0 || ow == 0 || !side.is_multiple_of(oh) || !side.is_multiple_of(ow) {
        return Err(Error::Argument(format!(
            "output resolution {oh}x{ow} must divide the patch side {side}"
        )));
    }
    let (bh, bw) = (side / oh, side / ow);
    let mut map = vec![0u8; oh * ow];
    let r2 = radius * radius;
    for p in points {
        let rows = (p.y - radius).floor().max(0.0) as i64
            ..=((p.y + radius).ceil() as i64).min(side as i64 - 1);
        for row in rows {
            let dy = row as f64 - p.y;
            let cols = (p.x - radius).floor().max(0.0) as i64
                ..=((p.x + radius).ceil() as i64).min(side as i64 - 1);
            for col in cols {
                let dx = col as f64 - p.x;
                if dx * dx + dy * dy <= r2 {
                    map[(row as usize / bh) * ow + col as usize / bw] = 1;
                }
            }
        }
    }
    Ok(SegTarget {
        map,
        resolution: (oh, ow),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_force(points: &[Point], radius: f64, side: usize) -> Vec<u8> {
        let mut full = vec![0u8; side * side];
        for row in 0..side {
            for col in 0..side {
                for p in points {
                    let (dx, dy) = (col as f64 - p.x, row as f64 - p.y);
                    if dx * dx + dy * dy <= radius * radius {
                        full[row * side + col] = 1;
                    }
                }
            }
        }
        full
    }

    #[test]
    fn empty_points_all_zero() {
        let t = make_gt_segmap(&[], 8.0, (64, 64)).unwrap();
        assert_eq!(t.ones(), 0);
        assert_eq!(t.map.len(), 64 * 64);
    }

    #[test]
    fn centered_disk_matches_scan() {
        let t = make_gt_segmap(&[Point::new(128.0, 128.0)], 8.0, (256, 256)).unwrap();
        let mut expected = 0;
        for dy in -8i32..=8 {
            for dx in -8i32..=8 {
                if dx * dx + dy * dy <= 64 {
                    expected += 1;
                }
            }
        }
        assert_eq!(expected, 197);
        assert_eq!(t.ones(), expected);
        assert_eq!(t.get(128, 128), 1);
        assert_eq!(t.get(128, 137), 0);
    }

    #[test]
    fn corner_hit_survives_pooling() {
        let t = make_gt_segmap(&[Point::new(0.0, 0.0)], 8.0, (64, 64)).unwrap();
        assert_eq!(t.get(0, 0), 1);
    }

    #[test]
    fn resolution_must_divide() {
        assert!(make_gt_segmap(&[], 8.0, (60, 64)).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(pts in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 0..6), r in 0.5f64..5.0) {
            let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let full = brute_force(&points, r, 64);
            let t = make_gt_segmap_sized(&points, r, 64, (64, 64)).unwrap();
            prop_assert_eq!(&t.map, &full);
            let pooled = make_gt_segmap_sized(&points, r, 64, (16, 16)).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    let any = (0..4).any(|a| (0..4).any(|b| full[(4 * i + a) * 64 + 4 * j + b] == 1));
                    prop_assert_eq!(pooled.get(i, j) == 1, any);
                }
            }
        }

        #[test]
        fn adding_a_point_is_monotone(pts in prop::collection::vec((0.0f64..256.0, 0.0f64..256.0), 0..5), extra in (0.0f64..256.0, 0.0f64..256.0)) {
            let mut points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let before = make_gt_segmap(&points, 8.0, (64, 64)).unwrap();
            points.push(Point::new(extra.0, extra.1));
            let after = make_gt_segmap(&points, 8.0, (64, 64)).unwrap();
            for (b, a) in before.map.iter().zip(&after.map) {
                prop_assert!(a >= b);
            }
        }
    }
}
