//! Generates a small annotated dataset and writes it with its manifest.
//!
//! `cargo run --example synthetic -- OUT_DIR`

use prmnet::data::{generate_synthetic, load_dataset, write_dataset};

fn main() -> prmnet::Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic-data".into());
    let records = generate_synthetic(4, (256, 512), (0, 80), 7)?;
    let manifest = write_dataset(&records, &out)?;
    for r in load_dataset(&manifest)? {
        println!(
            "{:<10} {:>4}×{:<4} {:>3} heads",
            r.id,
            r.width(),
            r.height(),
            r.points.len()
        );
    }
    println!("manifest: {}", manifest.display());
    Ok(())
}
