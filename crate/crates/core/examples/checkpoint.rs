//! Saves a freshly initialized model, reloads it and checks the forward pass.

use prmnet::data::{generate_synthetic, DatasetStats};
use prmnet::model::{ArchConfig, ModelState, Normalization};
use prmnet::pipeline::count_image;

fn main() -> prmnet::Result<()> {
    let state = ModelState::init(
        &ArchConfig::tiny(),
        DatasetStats { cc_max: 20 },
        Normalization::default(),
        1,
    )?;
    let path = std::env::temp_dir().join("prmnet-example.ckpt");
    state.save(&path)?;
    let back = ModelState::load(&path)?;
    let bytes = std::fs::metadata(&path)?.len();
    println!("{} parameters, {bytes} bytes on disk", back.param_count());

    let image = generate_synthetic(1, (128, 128), (10, 10), 2)?.remove(0);
    let a = count_image(&image, &state)?;
    let b = count_image(&image, &back)?;
    println!(
        "count before {:.6}, after {:.6}, identical: {}",
        a.image_count,
        b.image_count,
        a == b
    );
    std::fs::remove_file(path)?;
    Ok(())
}
