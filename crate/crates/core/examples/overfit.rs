//! Memorizes 64 synthetic tiny patches and reports the fit.

use std::time::Instant;

use prmnet::data::{generate_synthetic_with, DatasetStats, SynthOptions};
use prmnet::model::{ModelState, Normalization};
use prmnet::tiling::tile_image_sized;
use prmnet::train::{fit_metrics, TrainConfig, Trainer};

fn main() -> prmnet::Result<()> {
    env_logger::init();
    let cfg = TrainConfig {
        max_steps: Some(300),
        ..TrainConfig::tiny_overfit()
    };
    let side = cfg.arch.input_size;
    let opts = SynthOptions {
        blob_radius: (1.5, 2.0),
        noise: 8.0,
    };
    let records = generate_synthetic_with(64, (side, side), (0, 40), cfg.seed, &opts)?;
    let patches: Vec<_> = records
        .iter()
        .flat_map(|r| tile_image_sized(r, side))
        .collect();
    let stats = DatasetStats::from_counts(patches.iter().map(|p| p.gt_count()));
    let state = ModelState::init(
        &cfg.arch,
        stats,
        Normalization::from_patches(&patches),
        cfg.seed,
    )?;
    let t = Instant::now();
    let (state, report) = Trainer::new(&cfg, state, &patches, &[])?.run(|_, e| {
        if e.epoch % 5 == 0 {
            println!(
                "epoch {:>3}  loss {:.3}  reg {:.3}  ch {:.3}  sm {:.3}",
                e.epoch, e.loss.total, e.loss.regressor, e.loss.ch, e.loss.sm
            );
        }
        Ok(())
    })?;
    let m = fit_metrics(&state, &patches, &cfg)?;
    println!(
        "{} steps in {:.1?}: train MAE {:.3} (mean count {:.2}, {:.1}%), CH loss {:.4}, class accuracy {:.2}",
        report.steps,
        t.elapsed(),
        m.mae,
        m.mean_gt,
        100.0 * m.mae / m.mean_gt,
        m.loss.ch,
        m.class_accuracy
    );
    Ok(())
}
