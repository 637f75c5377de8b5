//! Command-line front end for the `prmnet` library.
//!
//! Relative output paths are resolved against `$PRMNET_OUTPUT_ROOT` (default:
//! the working directory). On failure the last line on stderr is a JSON
//! object `{"status":"error","kind":...,"message":...}` and the exit code is
//! 1 (2 for usage errors).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;
use prmnet::data::{generate_synthetic, load_dataset, load_image, write_dataset, CrowdClass};
use prmnet::model::{Checkpoint, ModelState};
use prmnet::pipeline::infer_to_dir;
use prmnet::prm::{Prm, Provenance, Quadrant};
use prmnet::tiling::{tile_image_sized, to_rgb_image};
use prmnet::train::{evaluate, grad_check, run_training, GradCheckOptions, RunConfig};
use serde_json::json;

const OUTPUT_ROOT_VAR: &str = "PRMNET_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "prmnet", version, about = "Patch-rescaling crowd counter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run description.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count every image of a manifest and report MAE/RMSE and classifier statistics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Also write the report to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count one image and write the per-patch report and attention overlay.
    Count {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic annotated dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        min_size: usize,
        #[arg(long, default_value_t = 512)]
        max_size: usize,
        #[arg(long, default_value_t = 0)]
        min_count: usize,
        #[arg(long, default_value_t = 100)]
        max_count: usize,
    },
    /// Compare analytic and finite-difference gradients for the configured network.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump the rescaled patches a class would produce for every tile of an image.
    Rescale {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        class: CrowdClass,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        side: usize,
    },
}

fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn provenance_tag(p: Provenance) -> &'static str {
    match p {
        Provenance::Identity => "identity",
        Provenance::Shrunk => "shrunk",
        Provenance::Quadrant(Quadrant::TopLeft) => "q_tl",
        Provenance::Quadrant(Quadrant::TopRight) => "q_tr",
        Provenance::Quadrant(Quadrant::BottomLeft) => "q_bl",
        Provenance::Quadrant(Quadrant::BottomRight) => "q_br",
    }
}

fn load_model(path: &Path) -> Result<ModelState> {
    Ok(Checkpoint::load(path)?.state)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out_dir = output_path(
                &out.or(cfg.output.clone())
                    .unwrap_or_else(|| PathBuf::from("run")),
            );
            let base = config.parent().unwrap_or(Path::new("."));
            let report = run_training(&cfg, base, &out_dir)?;
            Ok(json!({
                "status": "ok",
                "steps": report.steps,
                "epochs": report.epochs.len(),
                "final_val_mae": report.last_val_mae(),
                "checkpoint": report.final_checkpoint,
            }))
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
        } => {
            let state = load_model(&checkpoint)?;
            let records = load_dataset(&manifest)?;
            let report = evaluate(&state, &records)?;
            let value = serde_json::to_value(&report)?;
            if let Some(out) = out {
                let path = output_path(&out);
                if let Some(dir) = path.parent() {
                    std::fs::create_dir_all(dir)?;
                }
                std::fs::write(&path, serde_json::to_string_pretty(&value)?)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(value)
        }
        Command::Count {
            checkpoint,
            image,
            out,
        } => {
            let state = load_model(&checkpoint)?;
            let record = load_image(&image)?;
            let report = infer_to_dir(&record, &state, &output_path(&out))?;
            Ok(json!({
                "status": "ok",
                "image_count": report.image_count,
                "patches": report.per_patch.len(),
                "overlay": report.overlay,
            }))
        }
        Command::Synth {
            n,
            out,
            seed,
            min_size,
            max_size,
            min_count,
            max_count,
        } => {
            let records =
                generate_synthetic(n, (min_size, max_size), (min_count, max_count), seed)?;
            let manifest = write_dataset(&records, output_path(&out))?;
            Ok(json!({ "status": "ok", "images": records.len(), "manifest": manifest }))
        }
        Command::Gradcheck { config, seed } => {
            let cfg = RunConfig::from_file(&config)?;
            let report = grad_check(&cfg.train, seed, &GradCheckOptions::default())?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Rescale {
            image,
            class,
            out,
            side,
        } => {
            let record = load_image(&image)?;
            let prm = Prm::new(side, Default::default())?;
            let dir = output_path(&out);
            std::fs::create_dir_all(&dir)?;
            let mut files = Vec::new();
            for tile in tile_image_sized(&record, side) {
                let outcome = prm.rescale(&tile.pixels, class)?;
                for (p, prov) in outcome.patches.iter().zip(&outcome.provenance) {
                    let name = format!(
                        "tile_{}_{}_{}.png",
                        tile.origin.0,
                        tile.origin.1,
                        provenance_tag(*prov)
                    );
                    let path = dir.join(name);
                    to_rgb_image(p)?.save(&path)?;
                    files.push(path);
                }
            }
            info!("wrote {} patches to {}", files.len(), dir.display());
            Ok(json!({ "status": "ok", "class": class, "files": files }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            let line =
                json!({ "status": "error", "kind": "usage", "message": e.kind().to_string() });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(value) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&value).expect("serializable")
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            let kind = err
                .downcast_ref::<prmnet::Error>()
                .map_or("error", prmnet::Error::kind);
            let line = json!({ "status": "error", "kind": kind, "message": format!("{err:#}") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
