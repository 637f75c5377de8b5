//! Finite-difference check of every parameter group on the tiny network.

use std::time::Instant;

use prmnet::model::ArchConfig;
use prmnet::train::{grad_check, GradCheckOptions, TrainConfig};

fn main() -> prmnet::Result<()> {
    let cfg = TrainConfig {
        arch: ArchConfig::tiny(),
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let report = grad_check(&cfg, 7, &GradCheckOptions::default())?;
    for g in &report.groups {
        println!(
            "{:<10} max rel err {:.2e}  ({} checked, {} with reduced step, {} skipped at kinks)",
            g.group, g.max_rel_err, g.checked, g.refined, g.skipped
        );
    }
    println!("overall {:.2e} in {:.1?}", report.max_rel_err, t.elapsed());
    Ok(())
}
