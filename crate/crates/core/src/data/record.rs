use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Annotation coordinates are snapped to this fraction of a pixel so that
/// mirroring and power-of-two rescaling stay exact in binary floating point.
const COORD_GRID: f64 = 256.0;

/// A head annotation in pixel units (`x` = column, `y` = row).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point {
            x: (x * COORD_GRID).round() / COORD_GRID,
            y: (y * COORD_GRID).round() / COORD_GRID,
        }
    }

    /// Integer pixel `(row, col)` the point falls in, clamped to the grid.
    pub fn pixel(&self, height: usize, width: usize) -> (usize, usize) {
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clamp(self.y, height), clamp(self.x, width))
    }
}

/// One dataset image together with its head annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: RgbImage,
    pub points: Vec<Point>,
}

impl ImageRecord {
    /// Validates that the image is nonempty and every point is in bounds.
    pub fn new(id: impl Into<String>, image: RgbImage, points: Vec<Point>) -> Result<Self> {
        let id = id.into();
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::Validation {
                id,
                reason: "image has zero area".into(),
            });
        }
        for p in &points {
            if !(p.x >= 0.0 && p.x < w as f64 && p.y >= 0.0 && p.y < h as f64) {
                return Err(Error::Validation {
                    id,
                    reason: format!("point ({}, {}) outside {}x{} image", p.x, p.y, w, h),
                });
            }
        }
        Ok(ImageRecord { id, image, points })
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Image path, relative to the manifest's directory unless absolute.
    pub image: PathBuf,
    pub points: Vec<[f64; 2]>,
}

fn load_err(path: &Path, reason: impl ToString) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Loads an unannotated image; the file stem becomes the record id.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let image = image::open(path).map_err(|e| load_err(path, e))?.to_rgb8();
    let id = path
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    ImageRecord::new(id, image, Vec::new())
}

/// Reads a JSON-lines manifest and the images it references.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let manifest_path = manifest_path.as_ref();
    let file = File::open(manifest_path).map_err(|e| load_err(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| load_err(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| load_err(manifest_path, format!("line {}: {e}", lineno + 1)))?;
        let image_path = if entry.image.is_absolute() {
            entry.image.clone()
        } else {
            base.join(&entry.image)
        };
        let image = image::open(&image_path)
            .map_err(|e| load_err(&image_path, e))?
            .to_rgb8();
        let points = entry
            .points
            .iter()
            .map(|&[x, y]| Point::new(x, y))
            .collect();
        records.push(ImageRecord::new(entry.id, image, points)?);
    }
    Ok(records)
}

/// Writes every record as `<dir>/<id>.png` plus a `manifest.jsonl` index,
/// returning the manifest path.
pub fn write_dataset(records: &[ImageRecord], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = BufWriter::new(File::create(&manifest)?);
    for r in records {
        let file = PathBuf::from(format!("{}.png", r.id));
        r.image.save(dir.join(&file))?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            image: file,
            points: r.points.iter().map(|p| [p.x, p.y]).collect(),
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(dir: &Path, name: &str, w: u32, h: u32) {
        RgbImage::new(w, h).save(dir.join(name)).unwrap();
    }

    #[test]
    fn empty_manifest_gives_no_records() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, "").unwrap();
        assert!(load_dataset(&m).unwrap().is_empty());
    }

    #[test]
    fn no_crowd_image_loads() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 256, 256);
        let m = dir.path().join("m.jsonl");
        fs::write(&m, r#"{"id": "a", "image": "a.png", "points": []}"#).unwrap();
        let recs = load_dataset(&m).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].points.is_empty());
    }

    #[test]
    fn out_of_bounds_point_names_image() {
        let dir = tempfile::tempdir().unwrap();
        write_png(dir.path(), "a.png", 256, 256);
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            r#"{"id": "img-7", "image": "a.png", "points": [[300, 10]]}"#,
        )
        .unwrap();
        match load_dataset(&m) {
            Err(Error::Validation { id, .. }) => assert_eq!(id, "img-7"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_image_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, r#"{"id": "a", "image": "nope.png", "points": []}"#).unwrap();
        match load_dataset(&m) {
            Err(Error::Load { path, .. }) => assert!(path.ends_with("nope.png")),
            other => panic!("expected load error, got {other:?}"),
        }
        match load_dataset(dir.path().join("absent.jsonl")) {
            Err(Error::Load { path, .. }) => assert!(path.ends_with("absent.jsonl")),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn write_then_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rec =
            ImageRecord::new("r0", RgbImage::new(40, 30), vec![Point::new(3.5, 7.25)]).unwrap();
        let manifest = write_dataset(std::slice::from_ref(&rec), dir.path()).unwrap();
        assert_eq!(load_dataset(manifest).unwrap(), vec![rec]);
    }
}
