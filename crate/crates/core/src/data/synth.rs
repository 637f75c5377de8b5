//! Synthetic crowds: dark disks ("heads") on a noisy textured background.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageRecord, Point};
use crate::error::{Error, Result};

const PLACEMENT_ATTEMPTS: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Blob radius range in pixels.
    pub blob_radius: (f64, f64),
    /// Amplitude of the per-pixel background noise.
    pub noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            blob_radius: (4.0, 8.0),
            noise: 12.0,
        }
    }
}

pub fn generate_synthetic(
    n_images: usize,
    size_range: (usize, usize),
    count_range: (usize, usize),
    seed: u64,
) -> Result<Vec<ImageRecord>> {
    generate_synthetic_with(
        n_images,
        size_range,
        count_range,
        seed,
        &SynthOptions::default(),
    )
}

pub fn generate_synthetic_with(
    n_images: usize,
    (min_size, max_size): (usize, usize),
    (min_count, max_count): (usize, usize),
    seed: u64,
    opts: &SynthOptions,
) -> Result<Vec<ImageRecord>> {
    if min_size == 0 || min_size > max_size || min_count > max_count {
        return Err(Error::Argument(format!(
            "empty range: sizes {min_size}..={max_size}, counts {min_count}..={max_count}"
        )));
    }
    let (r_min, r_max) = opts.blob_radius;
    if !(r_min > 0.0 && r_min <= r_max) {
        return Err(Error::Argument(format!(
            "bad blob radius range {r_min}..={r_max}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_images);
    for i in 0..n_images {
        let h = rng.random_range(min_size..=max_size);
        let w = rng.random_range(min_size..=max_size);
        let count = rng.random_range(min_count..=max_count);
        let footprint = PI * r_min * r_min;
        if count as f64 * footprint > (h * w) as f64 {
            return Err(Error::Generation(format!(
                "{count} blobs of radius {r_min} do not fit in a {w}x{h} image"
            )));
        }
        let points = place_points(&mut rng, count, h, w, r_min)?;
        let image = render(&mut rng, h, w, &points, opts);
        records.push(ImageRecord::new(
            format!("synth-{seed}-{i:05}"),
            image,
            points,
        )?);
    }
    Ok(records)
}

/// Rejection-samples centers no closer than `min_dist` to each other.
fn place_points(
    rng: &mut ChaCha8Rng,
    count: usize,
    h: usize,
    w: usize,
    min_dist: f64,
) -> Result<Vec<Point>> {
    let mut points: Vec<Point> = Vec::with_capacity(count);
    let d2 = min_dist * min_dist;
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let p = Point::new(
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
            );
            if p.x >= w as f64 || p.y >= h as f64 {
                continue;
            }
            if points
                .iter()
                .all(|q| (q.x - p.x).powi(2) + (q.y - p.y).powi(2) >= d2)
            {
                points.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place {count} separated blobs in a {w}x{h} image"
            )));
        }
    }
    Ok(points)
}

fn render(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    points: &[Point],
    opts: &SynthOptions,
) -> RgbImage {
    let base: [f64; 3] = [
        rng.random_range(150.0..210.0),
        rng.random_range(150.0..210.0),
        rng.random_range(150.0..210.0),
    ];
    let (fx, fy) = (rng.random_range(0.02..0.12), rng.random_range(0.02..0.12));
    let phase = rng.random_range(0.0..2.0 * PI);
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let texture = 15.0 * ((x as f64 * fx + phase).sin() * (y as f64 * fy).cos());
        let mut c = [0u8; 3];
        for (ch, v) in c.iter_mut().enumerate() {
            let noise = rng.random_range(-opts.noise..=opts.noise);
            *v = (base[ch] + texture + noise).clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(c);
    }
    for p in points {
        let r = rng.random_range(opts.blob_radius.0..=opts.blob_radius.1);
        let shade: f64 = rng.random_range(20.0..60.0);
        let y0 = (p.y - r).floor().max(0.0) as u32;
        let y1 = ((p.y + r).ceil() as u32).min(h as u32 - 1);
        let x0 = (p.x - r).floor().max(0.0) as u32;
        let x1 = ((p.x + r).ceil() as u32).min(w as u32 - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d2 = (x as f64 + 0.5 - p.x).powi(2) + (y as f64 + 0.5 - p.y).powi(2);
                if d2 <= r * r {
                    let v = (shade + rng.random_range(-5.0..=5.0)).clamp(0.0, 255.0) as u8;
                    img.put_pixel(x, y, Rgb([v, v, v]));
                }
            }
        }
    }
    img
}
