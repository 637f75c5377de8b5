//! Counts one image with a checkpoint and writes the overlay and report.
//!
//! `cargo run --release --example count -- MODEL.ckpt IMAGE.png OUT_DIR`

use std::path::PathBuf;

use prmnet::data::load_image;
use prmnet::model::ModelState;
use prmnet::pipeline::infer_to_dir;

fn main() -> prmnet::Result<()> {
    let args: Vec<PathBuf> = std::env::args_os().skip(1).map(PathBuf::from).collect();
    let [model, image, out] = &args[..] else {
        eprintln!("usage: count MODEL.ckpt IMAGE.png OUT_DIR");
        std::process::exit(2);
    };
    let state = ModelState::load(model)?;
    let record = load_image(image)?;
    let report = infer_to_dir(&record, &state, out)?;
    for p in &report.per_patch {
        println!("{:?} {} {:.2}", p.origin, p.class, p.count);
    }
    println!("total {:.2}", report.image_count);
    Ok(())
}
