use log::warn;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageRecord, Point};
use crate::error::{Error, Result};
use crate::resize::bilinear_resize;
use crate::tiling::{crop_pixels, Patch, PATCH_SIZE};

/// Crop sizes used for training patches at the default patch side.
pub const DEFAULT_CROP_SIZES: [usize; 3] = [128, 256, 512];

/// Draws `n_patches` random square crops, resizes each to 256×256 and
/// appends a horizontally flipped copy of each, giving `2·n_patches`.
pub fn sample_training_patches(
    records: &[ImageRecord],
    n_patches: usize,
    sizes: &[usize],
    seed: u64,
) -> Result<Vec<Patch>> {
    sample_training_patches_sized(records, n_patches, sizes, seed, PATCH_SIZE)
}

/// Like [`sample_training_patches`] with output patches of side `side`.
pub fn sample_training_patches_sized(
    records: &[ImageRecord],
    n_patches: usize,
    sizes: &[usize],
    seed: u64,
    side: usize,
) -> Result<Vec<Patch>> {
    let smallest = *sizes
        .iter()
        .min()
        .ok_or_else(|| Error::Argument("no crop sizes given".into()))?;
    let usable: Vec<&ImageRecord> = records
        .iter()
        .filter(|r| {
            let ok = r.height().min(r.width()) >= smallest;
            if !ok {
                warn!(
                    "skipping `{}`: {}x{} is smaller than every crop size",
                    r.id,
                    r.width(),
                    r.height()
                );
            }
            ok
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Sampling("no record is large enough to crop".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * n_patches);
    for _ in 0..n_patches {
        let rec = *usable.choose(&mut rng).expect("nonempty");
        let fits: Vec<usize> = sizes
            .iter()
            .copied()
            .filter(|&s| s <= rec.height() && s <= rec.width())
            .collect();
        let size = *fits.choose(&mut rng).expect("smallest size fits");
        let row0 = rng.random_range(0..=rec.height() - size);
        let col0 = rng.random_range(0..=rec.width() - size);
        let patch = crop_resized(rec, (row0, col0), size, side)?;
        let flipped = patch.flipped();
        out.push(patch);
        out.push(flipped);
    }
    Ok(out)
}

/// Crops `size × size` at `origin` and bilinearly resizes it to `side`,
/// rescaling the contained points with the same half-pixel mapping.
pub fn crop_resized(
    rec: &ImageRecord,
    (row0, col0): (usize, usize),
    size: usize,
    side: usize,
) -> Result<Patch> {
    let pixels = bilinear_resize(&crop_pixels(&rec.image, (row0, col0), size), (side, side))?;
    let scale = side as f64 / size as f64;
    let points = rec
        .points
        .iter()
        .filter(|p| {
            let (r, c) = p.pixel(rec.height(), rec.width());
            (row0..row0 + size).contains(&r) && (col0..col0 + size).contains(&c)
        })
        .map(|p| {
            Point::new(
                (p.x - col0 as f64 + 0.5) * scale - 0.5,
                (p.y - row0 as f64 + 0.5) * scale - 0.5,
            )
        })
        .collect();
    Patch::new(pixels, (row0, col0), points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use image::RgbImage;

    #[test]
    fn flip_doubles_the_set() {
        let recs = generate_synthetic(3, (300, 600), (5, 20), 1).unwrap();
        let patches = sample_training_patches(&recs, 10, &DEFAULT_CROP_SIZES, 4).unwrap();
        assert_eq!(patches.len(), 20);
        assert!(patches.iter().all(|p| p.side() == 256));
        for pair in patches.chunks(2) {
            assert_eq!(pair[0].flipped(), pair[1]);
        }
    }

    #[test]
    fn resizing_keeps_counts() {
        let pts = [
            (3.0, 4.0),
            (10.0, 10.0),
            (50.0, 60.0),
            (127.0, 127.0),
            (64.0, 1.0),
            (0.0, 0.0),
            (99.5, 20.25),
        ];
        let rec = ImageRecord::new(
            "r",
            RgbImage::new(200, 200),
            pts.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        )
        .unwrap();
        let patch = crop_resized(&rec, (0, 0), 128, 256).unwrap();
        assert_eq!(patch.gt_count(), 7);
        let small = crop_resized(&rec, (0, 0), 128, 64).unwrap();
        assert_eq!(small.gt_count(), 7);
    }

    #[test]
    fn deterministic_for_seed() {
        let recs = generate_synthetic(2, (300, 300), (5, 10), 2).unwrap();
        let a = sample_training_patches(&recs, 4, &DEFAULT_CROP_SIZES, 9).unwrap();
        let b = sample_training_patches(&recs, 4, &DEFAULT_CROP_SIZES, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_records_fail() {
        let recs = generate_synthetic(2, (64, 100), (0, 3), 2).unwrap();
        assert!(matches!(
            sample_training_patches(&recs, 4, &DEFAULT_CROP_SIZES, 9),
            Err(Error::Sampling(_))
        ));
    }
}
