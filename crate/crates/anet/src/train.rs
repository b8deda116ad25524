//! Training loop, inference and checkpoints.
//!
//! A checkpoint `<name>` is two files: `<name>.json` holds the config, slot
//! table and optimizer metadata; `<name>.bin` holds every slot's values as
//! little-endian `f32` in slot order.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use filament_core::imgcore::{assemble_tiles, normalize_unit, split_tiles, Image2D, SourceDepth};
use filament_core::preprocess::{DatasetManifest, DatasetPair};

use crate::error::{Error, Result};
use crate::layers::{softmax_pixelwise, LossReduction, Mode};
use crate::model::{AnetConfig, AnetModel, ParamSlot};
use crate::optim::{AdamMeta, AdamState, DEFAULT_LR};
use crate::tensor::Tensor4;

/// One training example as network tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `(1, 1, H, W)` input.
    pub input: Tensor4,
    /// `(1, 1, H, W)` class indices.
    pub truth: Tensor4,
    /// `(1, 1, H, W)` loss weights.
    pub weight: Tensor4,
}

impl Sample {
    pub fn from_pair(pair: &DatasetPair) -> Result<Self> {
        let (w, h) = (pair.original.width(), pair.original.height());
        Ok(Sample {
            input: Tensor4::from_vec(1, 1, h, w, pair.original.values().to_vec())?,
            truth: Tensor4::from_vec(1, 1, h, w, pair.label.values().to_vec())?,
            weight: Tensor4::from_vec(1, 1, h, w, pair.weight.data.clone())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: DEFAULT_LR,
            seed: 0,
            checkpoint_every: 0,
            checkpoint_dir: None,
            reduction: LossReduction::WeightNormalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub clamped_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: AnetModel,
    pub adam: AdamState,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    /// Mean logged loss of each epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for row in &self.log {
            if out.len() < row.epoch {
                out.resize(row.epoch, (0.0, 0));
            }
            out[row.epoch - 1].0 += row.loss;
            out[row.epoch - 1].1 += 1;
        }
        out.into_iter().map(|(s, n)| s / n.max(1) as f64).collect()
    }
}

/// Trains on every pair listed in `manifest`.
pub fn train(manifest: &DatasetManifest, config: AnetConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    let samples = manifest
        .pairs
        .iter()
        .enumerate()
        .map(|(i, _)| Sample::from_pair(&manifest.load_pair(i)?))
        .collect::<Result<Vec<_>>>()?;
    train_samples(&samples, config, tc)
}

/// He-initialized model, seeded per-epoch shuffling, batch size 1.
pub fn train_samples(samples: &[Sample], config: AnetConfig, tc: &TrainConfig) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if !(tc.lr > 0.0 && tc.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be positive", tc.lr)));
    }
    let mut model = AnetModel::init(config, tc.seed)?;
    let mut adam = AdamState::new(&model, tc.lr);
    let mut order_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs * samples.len());
    let mut checkpoints = Vec::new();
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            step += 1;
            let s = &samples[i];
            let bundle = model.loss_and_gradients(&s.input, &s.truth, &s.weight, tc.reduction)?;
            let finite = bundle.value.is_finite() && bundle.grads.iter().all(|g| g.is_finite());
            if !finite {
                let checkpoint = match &tc.checkpoint_dir {
                    Some(dir) => {
                        let path = dir.join(format!("nonfinite_e{epoch:04}_s{step:06}"));
                        save_checkpoint(&model, Some(&adam), epoch, &path)?;
                        Some(path.with_extension("json"))
                    }
                    None => None,
                };
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    checkpoint,
                });
            }
            log.push(LogRow {
                epoch,
                step,
                loss: bundle.value,
                clamped_pixels: bundle.clamped,
            });
            model.apply_batch_stats(&bundle.stats);
            adam.step(&mut model, &bundle.grads)?;
        }
        if let (Some(dir), true) = (&tc.checkpoint_dir, tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0) {
            let path = dir.join(format!("epoch_{epoch:04}"));
            save_checkpoint(&model, Some(&adam), epoch, &path)?;
            checkpoints.push(path.with_extension("json"));
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        log,
        checkpoints,
    })
}

pub fn log_csv(log: &[LogRow]) -> String {
    let mut out = String::from("epoch,step,loss,clamped_pixels\n");
    for r in log {
        writeln!(out, "{},{},{},{}", r.epoch, r.step, r.loss, r.clamped_pixels).expect("writing to a String");
    }
    out
}

pub fn write_log_csv(log: &[LogRow], path: &Path) -> Result<()> {
    fs::write(path, log_csv(log)).map_err(|e| Error::io(path, e))
}

/// Foreground probability of one tile (evaluation mode, soft-max channel 1).
pub fn predict_tile(model: &AnetModel, tile: &Image2D) -> Result<Image2D> {
    let (w, h) = (tile.width(), tile.height());
    let x = Tensor4::from_vec(1, 1, h, w, tile.values().to_vec())?;
    let (scores, _) = model.forward(&x, Mode::Eval)?;
    let probs = softmax_pixelwise(&scores);
    let fg = probs.plane(0, 1).iter().map(|p| p.clamp(0.0, 1.0)).collect();
    Ok(Image2D::new(w, h, fg, tile.pixel_pitch_nm(), SourceDepth::F32)?)
}

/// Scales the image to `[0, 1]`, predicts every tile and stitches the probabilities.
pub fn predict_image(model: &AnetModel, img: &Image2D, tile_size: usize) -> Result<Image2D> {
    let m = model.config.size_multiple();
    if tile_size % m != 0 {
        return Err(Error::Shape(format!("tile size {tile_size} is not a multiple of {m}")));
    }
    let normalized = normalize_unit(img).image;
    let (tiles, grid) = split_tiles(&normalized, tile_size)?;
    let probs = tiles
        .par_iter()
        .map(|t| predict_tile(model, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble_tiles(&probs, &grid, img.width(), img.height())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: AnetConfig,
    pub epoch: usize,
    pub value_format: String,
    pub total_values: usize,
    pub params: Vec<ParamSlot>,
    pub adam: Option<AdamMeta>,
}

const VALUE_FORMAT: &str = "f32-le";

/// Writes `<stem>.json` and `<stem>.bin`.
pub fn save_checkpoint(model: &AnetModel, adam: Option<&AdamState>, epoch: usize, stem: &Path) -> Result<()> {
    if let Some(dir) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let manifest = CheckpointManifest {
        config: model.config,
        epoch,
        value_format: VALUE_FORMAT.into(),
        total_values: model.params.len(),
        params: model.slots().to_vec(),
        adam: adam.map(AdamState::meta),
    };
    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(4 * model.params.len());
    for &v in &model.params {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let bin_path = stem.with_extension("bin");
    fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))
}

/// Loads a checkpoint from its `.json` (or `.bin`, or extension-less) path.
pub fn load_checkpoint(path: &Path) -> Result<(AnetModel, CheckpointManifest)> {
    let json_path = path.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    let bad = |reason: String| Error::Checkpoint {
        path: json_path.clone(),
        reason,
    };
    if manifest.value_format != VALUE_FORMAT {
        return Err(bad(format!("unknown value format {}", manifest.value_format)));
    }
    let bin_path = path.with_extension("bin");
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != 4 * manifest.total_values {
        return Err(bad(format!(
            "{} bytes of values, expected {}",
            bytes.len(),
            4 * manifest.total_values
        )));
    }
    let params = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let model = AnetModel::from_params(manifest.config, params)?;
    if model.slots() != manifest.params.as_slice() {
        return Err(bad("slot table does not match the configured architecture".into()));
    }
    Ok((model, manifest))
}
