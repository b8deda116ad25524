//! The desk-scale end-to-end run: phantoms through to filament widths.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use filament_anet::{predict_image, save_checkpoint, train, write_log_csv, TrainConfig};
use filament_core::dwdc::make_label;
use filament_core::imgcore::{save_image, Image2D, SourceDepth};
use filament_core::postmetrics::postprocess_result;
use filament_core::preprocess::{build_dataset, gaussian_upsample_x2, load_manifest, threshold_denoise, Split, MANIFEST_FILE};
use filament_core::synthlab::{convolve2d, degrade, phantom_filaments, render_filaments, Boundary, DegradationSpec, Filament, NoiseKind};

use crate::config::{NoiseName, RunConfig};
use crate::measure::{filament_cuts, filament_width_nm, median};
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "train_log.csv";
pub const MODEL_STEM: &str = "model";

/// Seeds for one phantom and its noise, drawn in order from the run seed.
pub fn phantom_seeds(seed: u64, count: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (rng.random(), rng.random())).collect()
}

/// Noise parameter for the degradation model, relative to the blurred peak.
pub fn degradation_spec(cfg: &RunConfig, latent: &Image2D, seed: u64) -> Result<DegradationSpec, CliError> {
    let psf = cfg.degrade.psf()?;
    let peak = convolve2d(latent, &psf, Boundary::Reflect)?.max();
    let (noise_kind, noise_param) = match cfg.degrade.noise {
        NoiseName::Gaussian => (NoiseKind::Gaussian, cfg.degrade.noise_fraction * peak),
        NoiseName::Poisson => (NoiseKind::Poisson, cfg.degrade.noise_fraction * peak),
        NoiseName::None => (NoiseKind::None, 0.0),
    };
    Ok(DegradationSpec {
        psf,
        noise_kind,
        noise_param,
        seed,
    })
}

/// Repeated 2x Gaussian upsampling.
pub fn upsample(img: &Image2D, passes: usize, sigma_px: f64) -> Result<Image2D, CliError> {
    let mut out = img.clone();
    for _ in 0..passes {
        out = gaussian_upsample_x2(&out, sigma_px)?;
    }
    Ok(out)
}

/// Everything derived from one phantom before training.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub filaments: Vec<Filament>,
    pub latent: Image2D,
    pub degraded: Image2D,
    /// Upsampled degraded image: network input and test image.
    pub original: Image2D,
    pub label: Image2D,
}

pub fn prepare(cfg: &RunConfig, phantom_seed: u64, noise_seed: u64) -> Result<Prepared, CliError> {
    let spec = cfg.phantom.spec(phantom_seed);
    let filaments = phantom_filaments(&spec)?;
    let latent = render_filaments(
        spec.width,
        spec.height,
        &filaments,
        spec.thickness_px,
        spec.intensity,
        spec.pixel_pitch_nm,
    )?;
    let degraded = degrade(&latent, &degradation_spec(cfg, &latent, noise_seed)?)?;
    let pre = &cfg.preprocess;
    let original = upsample(&degraded, pre.upsample_passes, pre.upsample_sigma_px)?;
    let denoised = threshold_denoise(&original, pre.threshold_k.threshold_k());
    let lr = cfg.dwdc.lr_spec(&cfg.degrade, pre.scale())?;
    let label = make_label(&denoised, &cfg.dwdc.wavelet_spec(), &lr)?.label;
    Ok(Prepared {
        filaments,
        latent,
        degraded,
        original,
        label,
    })
}

/// Width measurement of one held-out filament.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilamentRow {
    pub image: usize,
    pub filament: usize,
    pub cuts: usize,
    pub degraded_fwhm_nm: Option<f64>,
    pub result_fwhm_nm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceReport {
    pub seed: u64,
    pub train_images: usize,
    pub train_tiles: usize,
    pub held_out_images: usize,
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub evaluated_pitch_nm: f64,
    pub filaments: usize,
    pub measurable_degraded: usize,
    pub measurable_result: usize,
    /// Share of held-out filaments with a measurable peak in the result image.
    pub measurable_fraction: f64,
    pub median_degraded_fwhm_nm: Option<f64>,
    pub median_result_fwhm_nm: Option<f64>,
    /// Median result width over median degraded width.
    pub fwhm_ratio: Option<f64>,
    pub per_filament: Vec<FilamentRow>,
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Scales filament geometry onto an upsampled grid.
pub fn scale_filaments(filaments: &[Filament], scale: f64) -> Vec<Filament> {
    let s = |p: [f64; 2]| [p[0] * scale, p[1] * scale];
    filaments
        .iter()
        .map(|f| Filament {
            p0: s(f.p0),
            p1: s(f.p1),
            p2: s(f.p2),
        })
        .collect()
}

/// Runs the whole chain into `out`, returning the summary that is also
/// written to `out/report.json`.
pub fn reproduce(cfg: &RunConfig, out: &Path) -> Result<ReproduceReport, CliError> {
    make_dir(out)?;
    write_json(cfg, &out.join("config.json"))?;
    let seeds = phantom_seeds(cfg.seed, cfg.phantom.count);
    log::info!("preparing {} phantoms", seeds.len());
    let prepared = seeds
        .par_iter()
        .map(|&(p, n)| prepare(cfg, p, n))
        .collect::<Result<Vec<_>, _>>()?;

    let dirs: Vec<PathBuf> = ["phantoms", "degraded", "originals", "labels", "results"]
        .iter()
        .map(|d| out.join(d))
        .collect();
    for d in &dirs {
        make_dir(d)?;
    }
    for (i, p) in prepared.iter().enumerate() {
        save_image(&p.latent, &dirs[0].join(format!("phantom_{i:04}.f32")), SourceDepth::F32)?;
        save_image(&p.degraded, &dirs[1].join(format!("degraded_{i:04}.f32")), SourceDepth::F32)?;
        save_image(&p.original, &dirs[2].join(format!("original_{i:04}.f32")), SourceDepth::F32)?;
        save_image(&p.label, &dirs[3].join(format!("label_{i:04}.pgm")), SourceDepth::U8)?;
        write_json(&p.filaments, &dirs[0].join(format!("filaments_{i:04}.json")))?;
    }

    let n_train = cfg.phantom.count - cfg.phantom.held_out;
    let (train_set, test_set) = prepared.split_at(n_train);
    let originals: Vec<Image2D> = train_set.iter().map(|p| p.original.clone()).collect();
    let labels: Vec<Image2D> = train_set.iter().map(|p| p.label.clone()).collect();
    let dataset_dir = out.join("dataset");
    build_dataset(
        &originals,
        &labels,
        cfg.dataset.tile_size,
        &cfg.dataset.weight_params(),
        Split::Train,
        &dataset_dir,
    )?;
    let manifest = load_manifest(&dataset_dir.join(MANIFEST_FILE))?;

    let ckpt_dir = out.join("checkpoints");
    make_dir(&ckpt_dir)?;
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        lr: cfg.train.lr,
        seed: cfg.seed,
        checkpoint_every: cfg.train.checkpoint_every,
        checkpoint_dir: Some(ckpt_dir),
        reduction: cfg.train.reduction,
    };
    log::info!("training on {} tiles for {} epochs", manifest.len(), tc.epochs);
    let trained = train(&manifest, cfg.train.anet(), &tc)?;
    write_log_csv(&trained.log, &out.join(LOG_FILE))?;
    save_checkpoint(&trained.model, Some(&trained.adam), tc.epochs, &out.join(MODEL_STEM))?;
    let means = trained.epoch_means();

    log::info!("predicting {} held-out images", test_set.len());
    let results = test_set
        .par_iter()
        .map(|p| {
            let prob = predict_image(&trained.model, &p.original, cfg.dataset.tile_size)?;
            Ok(postprocess_result(&prob, &p.original, cfg.predict.threshold)?)
        })
        .collect::<Result<Vec<_>, CliError>>()?;

    let scale = cfg.preprocess.scale();
    let mut rows = Vec::new();
    for (k, (p, result)) in test_set.iter().zip(&results).enumerate() {
        let image = n_train + k;
        save_image(result, &dirs[4].join(format!("result_{image:04}.f32")), SourceDepth::F32)?;
        let fils = scale_filaments(&p.filaments, scale as f64);
        for f in 0..fils.len() {
            let cuts = filament_cuts(&fils, f, result.width(), result.height(), cfg.eval.half_window_px);
            rows.push(FilamentRow {
                image,
                filament: f,
                cuts: cuts.len(),
                degraded_fwhm_nm: filament_width_nm(&cuts, &p.original),
                result_fwhm_nm: filament_width_nm(&cuts, result),
            });
        }
    }
    let degraded: Vec<f64> = rows.iter().filter_map(|r| r.degraded_fwhm_nm).collect();
    let result: Vec<f64> = rows.iter().filter_map(|r| r.result_fwhm_nm).collect();
    let (md, mr) = (median(&degraded), median(&result));
    let report = ReproduceReport {
        seed: cfg.seed,
        train_images: n_train,
        train_tiles: manifest.len(),
        held_out_images: test_set.len(),
        epochs: cfg.train.epochs,
        first_epoch_loss: means.first().copied().unwrap_or(f64::NAN),
        final_epoch_loss: means.last().copied().unwrap_or(f64::NAN),
        evaluated_pitch_nm: cfg.phantom.pixel_pitch_nm / scale as f64,
        filaments: rows.len(),
        measurable_degraded: degraded.len(),
        measurable_result: result.len(),
        measurable_fraction: if rows.is_empty() {
            0.0
        } else {
            result.len() as f64 / rows.len() as f64
        },
        median_degraded_fwhm_nm: md,
        median_result_fwhm_nm: mr,
        fwhm_ratio: md.zip(mr).map(|(d, r)| r / d),
        per_filament: rows,
    };
    write_json(&report, &out.join(REPORT_FILE))?;
    Ok(report)
}
