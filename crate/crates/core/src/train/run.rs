//! File-driven training runs: a TOML document naming the data, the
//! optimization settings and where results go.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::{prepare, TrainReport, Trainer};
use crate::data::{generate_synthetic_with, load_dataset, ImageRecord, SynthOptions};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelState, Precision};

/// Synthetic images generated on the fly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub n_images: usize,
    pub size_range: (usize, usize),
    pub count_range: (usize, usize),
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub blob_radius: Option<(f64, f64)>,
}

/// Where training images come from; exactly one source must be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

impl DataConfig {
    pub fn load(&self, base: &Path) -> Result<Vec<ImageRecord>> {
        match (&self.manifest, &self.synthetic) {
            (Some(m), None) => load_dataset(base.join(m)),
            (None, Some(s)) => {
                let mut opts = SynthOptions::default();
                if let Some(r) = s.blob_radius {
                    opts.blob_radius = r;
                }
                generate_synthetic_with(s.n_images, s.size_range, s.count_range, s.seed, &opts)
            }
            _ => Err(Error::Config(
                "[data] needs exactly one of `manifest` or `synthetic`".into(),
            )),
        }
    }
}

/// A complete training run description.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    /// Output directory, relative to the output root.
    pub output: Option<PathBuf>,
    /// Write `epoch_<k>.ckpt` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Continue from this checkpoint (weights, optimizer state, epoch counter).
    pub resume: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        if cfg.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&text)
    }
}

/// Runs `cfg`, reading relative data paths against `data_base` and writing
/// checkpoints, `report.json` and `final.ckpt` under `out_dir`.
pub fn run_training(cfg: &RunConfig, data_base: &Path, out_dir: &Path) -> Result<TrainReport> {
    let records = cfg.data.load(data_base)?;
    info!("{} images loaded", records.len());
    let prep = prepare(&records, &cfg.train)?;
    info!(
        "{} training images, {} validation images, {} patches, cc_max {}",
        prep.train.len(),
        prep.val.len(),
        prep.patches.len(),
        prep.stats.cc_max
    );
    std::fs::create_dir_all(out_dir)?;
    let trainer = match &cfg.resume {
        Some(path) => Trainer::resume(
            &cfg.train,
            Checkpoint::load(path)?,
            &prep.patches,
            &prep.val,
        )?,
        None => {
            let state = ModelState::init(&cfg.train.arch, prep.stats, prep.norm, cfg.train.seed)?;
            Trainer::new(&cfg.train, state, &prep.patches, &prep.val)?
        }
    };
    let every = cfg.checkpoint_every;
    let (state, mut report) = trainer.run(|t, rec| {
        if every.is_some_and(|k| (rec.epoch + 1) % k == 0) {
            let path = out_dir.join(format!("epoch_{}.ckpt", rec.epoch + 1));
            t.checkpoint().save(&path, Precision::F64)?;
            info!("wrote {}", path.display());
        }
        Ok(())
    })?;
    let final_path = out_dir.join("final.ckpt");
    state.save(&final_path)?;
    report.final_checkpoint = Some(final_path);
    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}
