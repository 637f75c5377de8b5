//! Trains from a run description and evaluates the result on fresh images.
//!
//! `cargo run --release --example train -- configs/tiny.toml OUT_DIR`

use std::path::{Path, PathBuf};

use prmnet::data::{generate_synthetic_with, SynthOptions};
use prmnet::model::ModelState;
use prmnet::train::{evaluate, run_training, RunConfig};

fn main() -> prmnet::Result<()> {
    env_logger::init();
    let mut args = std::env::args_os().skip(1).map(PathBuf::from);
    let config = args.next().unwrap_or_else(|| "configs/tiny.toml".into());
    let out = args.next().unwrap_or_else(|| "runs/example".into());
    let cfg = RunConfig::from_file(&config)?;
    let report = run_training(&cfg, config.parent().unwrap_or(Path::new(".")), &out)?;
    for e in &report.epochs {
        println!(
            "epoch {:>3} lr {:.1e} loss {:.4} val MAE {:?}",
            e.epoch, e.lr, e.loss.total, e.val_mae
        );
    }

    let state = ModelState::load(out.join("final.ckpt"))?;
    let side = state.arch.input_size;
    let opts = SynthOptions {
        blob_radius: (1.5, 2.0),
        noise: 8.0,
    };
    let test = generate_synthetic_with(8, (side, 2 * side), (0, 40), 99, &opts)?;
    let eval = evaluate(&state, &test)?;
    println!("held-out MAE {:.2}, RMSE {:.2}", eval.mae, eval.rmse);
    Ok(())
}
