//! Splits an image into fixed-size tiles and labels each by its head count.

use prmnet::data::{generate_synthetic, DatasetStats};
use prmnet::tiling::{tile_grid, tile_image};

fn main() -> prmnet::Result<()> {
    let record = generate_synthetic(1, (300, 700), (60, 60), 11)?.remove(0);
    let (rows, cols) = tile_grid(record.height(), record.width(), 256);
    println!(
        "{}×{} image, {rows}×{cols} tiles",
        record.width(),
        record.height()
    );
    let tiles = tile_image(&record);
    let stats = DatasetStats::from_counts(tiles.iter().map(|t| t.gt_count()));
    for t in &tiles {
        println!(
            "  tile at {:?}: {:>2} heads -> {}",
            t.origin,
            t.gt_count(),
            stats.label(t.gt_count())
        );
    }
    let total: usize = tiles.iter().map(|t| t.gt_count()).sum();
    println!("sum over tiles {total}, annotated {}", record.points.len());
    Ok(())
}
