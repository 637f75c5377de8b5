//! Non-overlapping square tiling of full images.

use image::RgbImage;

use crate::data::{CrowdClass, ImageRecord, Point};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 256;

/// A square tile of an image with its annotations in patch-local pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `3 × side × side`, intensities in `[0, 255]`.
    pub pixels: Tensor,
    /// `(row, col)` of the top-left corner in the source image.
    pub origin: (usize, usize),
    pub points: Vec<Point>,
    pub class_gt: Option<CrowdClass>,
}

impl Patch {
    pub fn new(pixels: Tensor, origin: (usize, usize), points: Vec<Point>) -> Result<Self> {
        match pixels.shape() {
            [3, h, w] if h == w && *h > 0 => {}
            s => {
                return Err(Error::shape(
                    "patch pixels",
                    &[3, PATCH_SIZE, PATCH_SIZE],
                    s,
                ))
            }
        }
        Ok(Patch {
            pixels,
            origin,
            points,
            class_gt: None,
        })
    }

    pub fn side(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn gt_count(&self) -> usize {
        self.points.len()
    }

    /// Horizontal mirror: column `x` maps to `side − 1 − x`.
    pub fn flipped(&self) -> Patch {
        let s = self.side();
        let src = self.pixels.data();
        let mut data = vec![0.0; src.len()];
        for row in 0..3 * s {
            for col in 0..s {
                data[row * s + col] = src[row * s + (s - 1 - col)];
            }
        }
        Patch {
            pixels: Tensor::from_vec(self.pixels.shape(), data).expect("same shape"),
            origin: self.origin,
            points: self
                .points
                .iter()
                .map(|p| Point {
                    x: (s - 1) as f64 - p.x,
                    y: p.y,
                })
                .collect(),
            class_gt: self.class_gt,
        }
    }
}

/// Copies a `side × side` window (zero outside the image) into a `3 × side × side` tensor.
pub(crate) fn crop_pixels(image: &RgbImage, (row0, col0): (usize, usize), side: usize) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut data = vec![0.0; 3 * side * side];
    for r in 0..side.min(h.saturating_sub(row0)) {
        for c in 0..side.min(w.saturating_sub(col0)) {
            let px = image.get_pixel((col0 + c) as u32, (row0 + r) as u32);
            for ch in 0..3 {
                data[(ch * side + r) * side + c] = px[ch] as f64;
            }
        }
    }
    Tensor::from_vec(&[3, side, side], data).expect("sized buffer")
}

/// Renders a `3 × H × W` tensor of intensities as an RGB image, rounding and
/// clamping to `[0, 255]`.
pub fn to_rgb_image(pixels: &Tensor) -> Result<RgbImage> {
    let [3, h, w] = *pixels.shape() else {
        return Err(Error::shape("rgb tensor", &[3, 0, 0], pixels.shape()));
    };
    let d = pixels.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| {
            d[(c * h + y as usize) * w + x as usize]
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([at(0), at(1), at(2)])
    }))
}

pub fn tile_image(record: &ImageRecord) -> Vec<Patch> {
    tile_image_sized(record, PATCH_SIZE)
}

/// Zero-pads bottom/right to a multiple of `side` and cuts row-major tiles.
/// A point belongs to the tile whose half-open extent contains its pixel.
pub fn tile_image_sized(record: &ImageRecord, side: usize) -> Vec<Patch> {
    let (h, w) = (record.height(), record.width());
    let (rows, cols) = (h.div_ceil(side), w.div_ceil(side));
    let mut buckets: Vec<Vec<Point>> = vec![Vec::new(); rows * cols];
    for p in &record.points {
        let (pr, pc) = p.pixel(h, w);
        let (tr, tc) = (pr / side, pc / side);
        buckets[tr * cols + tc].push(Point {
            x: p.x - (tc * side) as f64,
            y: p.y - (tr * side) as f64,
        });
    }
    let mut patches = Vec::with_capacity(rows * cols);
    for (i, points) in buckets.into_iter().enumerate() {
        let origin = ((i / cols) * side, (i % cols) * side);
        patches.push(Patch {
            pixels: crop_pixels(&record.image, origin, side),
            origin,
            points,
            class_gt: None,
        });
    }
    patches
}

/// Tile grid `(rows, cols)` for an image.
pub fn tile_grid(height: usize, width: usize, side: usize) -> (usize, usize) {
    (height.div_ceil(side), width.div_ceil(side))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn record(h: u32, w: u32, pts: &[(f64, f64)]) -> ImageRecord {
        let img = RgbImage::from_pixel(w, h, Rgb([10, 20, 30]));
        ImageRecord::new(
            "t",
            img,
            pts.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_tile() {
        let t = tile_image(&record(256, 256, &[]));
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].origin, (0, 0));
    }

    #[test]
    fn grid_of_six() {
        let t = tile_image(&record(512, 768, &[]));
        assert_eq!(t.len(), 6);
        let origins: Vec<_> = t.iter().map(|p| p.origin).collect();
        assert_eq!(
            origins,
            vec![(0, 0), (0, 256), (0, 512), (256, 0), (256, 256), (256, 512)]
        );
    }

    #[test]
    fn ragged_image_pads_with_zeros() {
        let t = tile_image(&record(300, 377, &[(376.5, 299.0), (10.0, 10.0)]));
        assert_eq!(t.len(), 4);
        let br = &t[3];
        assert_eq!(br.origin, (256, 256));
        // Local rows 0..44 and cols 0..121 come from the image.
        assert_eq!(br.pixels.data()[43 * 256 + 120], 10.0);
        assert_eq!(br.pixels.data()[43 * 256 + 121], 0.0);
        assert_eq!(br.pixels.data()[44 * 256], 0.0);
        assert_eq!(br.pixels.data()[0], 10.0);
        assert_eq!(br.gt_count(), 1);
        for p in &br.points {
            assert!(p.x < 121.0 && p.y < 44.0, "point landed in padding: {p:?}");
        }
    }

    #[test]
    fn edge_point_goes_to_next_tile() {
        let t = tile_image(&record(512, 512, &[(256.0, 255.75)]));
        assert_eq!(t[1].gt_count(), 1);
        assert_eq!(t[1].points[0], Point { x: 0.0, y: 255.75 });
    }

    #[test]
    fn flip_mirrors_point() {
        let p = Patch::new(
            Tensor::zeros(&[3, 256, 256]),
            (0, 0),
            vec![Point::new(10.0, 3.0)],
        )
        .unwrap();
        assert_eq!(p.flipped().points[0].x, 245.0);
    }

    proptest! {
        #[test]
        fn flip_is_an_involution(xs in prop::collection::vec((0.0f64..32.0, 0.0f64..32.0), 0..10), seed in 0u64..100) {
            let data: Vec<f64> = (0..3 * 32 * 32).map(|i| ((i as u64 * 13 + seed) % 256) as f64).collect();
            let p = Patch::new(
                Tensor::from_vec(&[3, 32, 32], data).unwrap(),
                (0, 0),
                xs.iter().map(|&(x, y)| Point::new(x, y)).collect(),
            ).unwrap();
            prop_assert_eq!(p.flipped().flipped(), p);
        }
    }
}
