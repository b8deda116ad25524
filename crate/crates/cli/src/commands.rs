//! Subcommand definitions; each runs one pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use filament_anet::{load_checkpoint, predict_image, save_checkpoint, train, write_log_csv, AnetConfig, LossReduction, TrainConfig};
use filament_core::dwdc::{make_label, LrSpec, ThresholdMode, ThresholdValue, WaveletFamily, WaveletSpec};
use filament_core::imgcore::{load_image, save_image, Image2D, SourceDepth};
use filament_core::postmetrics::{
    fwhm, line_profile, max_intensity_projection, postprocess_result, quality_report, stack_result, write_profile_csv,
    write_report,
};
use filament_core::preprocess::{build_dataset, load_manifest, threshold_denoise, Split, ThresholdK, WeightParams};
use filament_core::synthlab::{degrade, gaussian_psf, phantom_filaments, render_filaments, DegradationSpec, NoiseKind};

use crate::config::{load_config, load_valid_config, validate_config};
use crate::reproduce::{phantom_seeds, reproduce, upsample};
use crate::{with_workers, worker_count, CliError};

#[derive(Debug, Parser)]
#[command(name = "filament-sr", version, about = "Synthetic filament super-resolution pipeline")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render seeded filament phantoms.
    Phantom(PhantomArgs),
    /// Blur an image with a Gaussian PSF and add seeded noise.
    Degrade(DegradeArgs),
    /// Gaussian-upsample and optionally threshold-denoise an image.
    Preprocess(PreprocessArgs),
    /// Turn a preprocessed image into a binary label.
    Label(LabelArgs),
    /// Tile image/label pairs and compute weight maps.
    Dataset(DatasetArgs),
    /// Train the network on a dataset manifest.
    Train(TrainArgs),
    /// Segment an image and multiply the mask with it.
    Predict(PredictArgs),
    /// PSNR and SSIM between two images.
    Eval(EvalArgs),
    /// Row intensity profile and its FWHM.
    Profile(ProfileArgs),
    /// Assemble slices into a z-stack with a maximum-intensity projection.
    Stack(StackArgs),
    /// Run the whole desk-scale pipeline and write a summary report.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration; built-in defaults when absent.
    #[arg(long = "config", alias = "spec")]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    Gaussian,
    Poisson,
    None,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pub psf_sigma: f64,
    #[arg(long)]
    pub psf_radius: Option<usize>,
    /// Noise level as a fraction of the blurred peak.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Gaussian)]
    pub noise_kind: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of 2x upsampling passes.
    #[arg(long, default_value_t = 1)]
    pub passes: usize,
    #[arg(long, default_value_t = filament_core::preprocess::DEFAULT_UPSAMPLE_SIGMA_PX)]
    pub sigma: f64,
    /// Background threshold factor (`auto` or a number), applied after upsampling.
    #[arg(long)]
    pub threshold_k: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WaveletArg {
    Haar,
    #[value(alias = "d4")]
    Daubechies4,
}

#[derive(Debug, Args)]
pub struct LabelArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Output label; written as an 8-bit PGM.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = WaveletArg::Haar)]
    pub wavelet: WaveletArg,
    #[arg(long, default_value_t = 2)]
    pub levels: usize,
    #[arg(long, default_value_t = 20)]
    pub lr_iters: usize,
    /// PSF width at the input's resolution.
    #[arg(long, default_value_t = 2.0)]
    pub psf_sigma: f64,
    /// Background threshold factor (`auto` or a number) applied first.
    #[arg(long)]
    pub threshold_k: Option<String>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub originals: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    pub labels: Vec<PathBuf>,
    #[arg(long, default_value_t = 512)]
    pub tile: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub w0: f64,
    #[arg(long, default_value_t = 5.0)]
    pub sigma_w: f64,
    #[arg(long)]
    pub test: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    WeightNormalized,
    Sum,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub depth: usize,
    #[arg(long, default_value_t = 8)]
    pub base: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the model, log and periodic checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::WeightNormalized)]
    pub reduction: ReductionArg,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Checkpoint (`.json`, with its `.bin` alongside).
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Result image (mask times input), raw float.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Tile side; defaults to 512 or the largest admissible side that fits.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Also write the foreground probability map here.
    #[arg(long)]
    pub prob_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// PSNR peak value; defaults to the bit depth's maximum.
    #[arg(long)]
    pub max_value: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub row: usize,
    /// First column (inclusive).
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Last column (exclusive); defaults to the image width.
    #[arg(long)]
    pub end: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StackArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub slices: Vec<PathBuf>,
    #[arg(long)]
    pub zstep: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the effective configuration and its violations, then stop.
    #[arg(long)]
    pub dry_run: bool,
}

fn parse_k(raw: &str) -> Result<ThresholdK, CliError> {
    if raw.eq_ignore_ascii_case("auto") {
        return Ok(ThresholdK::Auto);
    }
    raw.parse::<f64>()
        .ok()
        .filter(|k| !k.is_nan())
        .map(ThresholdK::Value)
        .ok_or_else(|| CliError::Config(format!("threshold factor `{raw}` is neither `auto` nor a number")))
}

fn load(path: &Path) -> Result<Image2D, CliError> {
    Ok(load_image(path, None)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn make_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

/// Largest admissible tile: 512 when it fits, else the biggest multiple of
/// `2^depth` inside the image.
pub fn default_tile(config: &AnetConfig, width: usize, height: usize) -> Result<usize, CliError> {
    let m = config.size_multiple();
    let side = width.min(height).min(512) / m * m;
    if side == 0 {
        return Err(CliError::Config(format!(
            "a {width}x{height} image is smaller than the network's {m}-pixel size multiple"
        )));
    }
    Ok(side)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    // `reproduce` reads its worker count from the configuration as well.
    if let Command::Reproduce(a) = cli.command {
        return cmd_reproduce(a);
    }
    with_workers(worker_count(None)?, || match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Degrade(a) => cmd_degrade(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Label(a) => cmd_label(a),
        Command::Dataset(a) => cmd_dataset(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Stack(a) => cmd_stack(a),
        Command::Reproduce(_) => unreachable!("handled above"),
    })?
}

fn cmd_phantom(a: PhantomArgs) -> Result<(), CliError> {
    let mut cfg = load_valid_config(a.config.config.as_deref(), &a.config.overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    make_dir(&a.out)?;
    let p = &cfg.phantom;
    for (i, (seed, _)) in phantom_seeds(cfg.seed, p.count).into_iter().enumerate() {
        let spec = p.spec(seed);
        let filaments = phantom_filaments(&spec)?;
        let img = render_filaments(
            spec.width,
            spec.height,
            &filaments,
            spec.thickness_px,
            spec.intensity,
            spec.pixel_pitch_nm,
        )?;
        save_image(&img, &a.out.join(format!("phantom_{i:04}.f32")), SourceDepth::F32)?;
        write_json(&filaments, &a.out.join(format!("filaments_{i:04}.json")))?;
    }
    println!("wrote {} phantoms to {}", p.count, a.out.display());
    Ok(())
}

fn cmd_degrade(a: DegradeArgs) -> Result<(), CliError> {
    let img = load(&a.input)?;
    let radius = a.psf_radius.unwrap_or((3.0 * a.psf_sigma).ceil().max(1.0) as usize);
    let psf = gaussian_psf(a.psf_sigma, radius)?;
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(CliError::Config(format!("noise fraction {} must be non-negative", a.noise)));
    }
    let peak = filament_core::synthlab::convolve2d(&img, &psf, filament_core::synthlab::Boundary::Reflect)?.max();
    let (noise_kind, noise_param) = match a.noise_kind {
        NoiseArg::Gaussian => (NoiseKind::Gaussian, a.noise * peak),
        NoiseArg::Poisson => (NoiseKind::Poisson, a.noise * peak),
        NoiseArg::None => (NoiseKind::None, 0.0),
    };
    let out = degrade(
        &img,
        &DegradationSpec {
            psf,
            noise_kind,
            noise_param,
            seed: a.seed,
        },
    )?;
    save_image(&out, &a.out, SourceDepth::F32)?;
    Ok(())
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<(), CliError> {
    let img = load(&a.input)?;
    let mut out = upsample(&img, a.passes, a.sigma)?;
    if let Some(k) = &a.threshold_k {
        out = threshold_denoise(&out, parse_k(k)?);
    }
    save_image(&out, &a.out, SourceDepth::F32)?;
    Ok(())
}

fn cmd_label(a: LabelArgs) -> Result<(), CliError> {
    let mut img = load(&a.input)?;
    if let Some(k) = &a.threshold_k {
        img = threshold_denoise(&img, parse_k(k)?);
    }
    let wspec = WaveletSpec {
        family: match a.wavelet {
            WaveletArg::Haar => WaveletFamily::Haar,
            WaveletArg::Daubechies4 => WaveletFamily::Daubechies4,
        },
        levels: a.levels,
        threshold_mode: ThresholdMode::Soft,
        threshold_value: ThresholdValue::Auto,
    };
    let radius = (3.0 * a.psf_sigma).ceil().max(1.0) as usize;
    let lspec = LrSpec::new(gaussian_psf(a.psf_sigma, radius)?, a.lr_iters, 1e-12)?;
    let outcome = make_label(&img, &wspec, &lspec)?;
    if outcome.zero_input {
        eprintln!("warning: input carries no signal; the label is all background");
    }
    save_image(&outcome.label, &a.out, SourceDepth::U8)?;
    Ok(())
}

fn cmd_dataset(a: DatasetArgs) -> Result<(), CliError> {
    let originals = a.originals.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let labels = a.labels.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    let split = if a.test { Split::Test } else { Split::Train };
    let params = WeightParams {
        w0: a.w0,
        sigma_px: a.sigma_w,
    };
    let m = build_dataset(&originals, &labels, a.tile, &params, split, &a.out)?;
    println!(
        "{} pairs from {} images ({} background-only)",
        m.counts.pairs, m.counts.images, m.counts.background_only
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let manifest = load_manifest(&a.manifest)?;
    let config = AnetConfig::new(a.depth, a.base);
    make_dir(&a.out)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.clone()),
        reduction: match a.reduction {
            ReductionArg::WeightNormalized => LossReduction::WeightNormalized,
            ReductionArg::Sum => LossReduction::Sum,
        },
    };
    let outcome = train(&manifest, config, &tc)?;
    write_log_csv(&outcome.log, &a.out.join("train_log.csv"))?;
    save_checkpoint(&outcome.model, Some(&outcome.adam), a.epochs, &a.out.join("model"))?;
    if let Some(last) = outcome.epoch_means().last() {
        println!("final epoch mean loss {last}");
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<(), CliError> {
    let (model, _) = load_checkpoint(&a.model)?;
    let img = load(&a.input)?;
    let tile = match a.tile {
        Some(t) => t,
        None => default_tile(&model.config, img.width(), img.height())?,
    };
    let prob = predict_image(&model, &img, tile)?;
    if let Some(p) = &a.prob_out {
        save_image(&prob, p, SourceDepth::F32)?;
    }
    let result = postprocess_result(&prob, &img, a.threshold)?;
    save_image(&result, &a.out, SourceDepth::F32)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let (x, y) = (load(&a.a)?, load(&a.b)?);
    let report = quality_report(&x, &y, a.max_value)?;
    write_report(&report, &a.report)?;
    match report.psnr_db {
        Some(p) => println!("PSNR {p:.3} dB, SSIM {:.4}", report.ssim),
        None => println!("identical images (PSNR infinite), SSIM {:.4}", report.ssim),
    }
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<(), CliError> {
    let img = load(&a.input)?;
    let end = a.end.unwrap_or(img.width());
    let profile = line_profile(&img, a.row, a.start..end)?;
    write_profile_csv(&profile, &a.out)?;
    match fwhm(&profile) {
        Ok(m) => println!(
            "FWHM {:.2} nm{}",
            m.width_nm,
            if m.multimodal { " (multimodal)" } else { "" }
        ),
        Err(e) => println!("no FWHM: {e}"),
    }
    Ok(())
}

fn cmd_stack(a: StackArgs) -> Result<(), CliError> {
    let slices = a.slices.iter().map(|p| load(p)).collect::<Result<Vec<_>, _>>()?;
    make_dir(&a.out)?;
    let (stack, _) = stack_result(slices, a.zstep, &a.out)?;
    save_image(&max_intensity_projection(&stack), &a.out.join("mip.f32"), SourceDepth::F32)?;
    println!("{} slices at {} nm", stack.len(), stack.z_step_nm());
    Ok(())
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.config.as_deref(), &a.config.overrides)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(out) = &a.out {
        cfg.paths.out_dir = out.clone();
    }
    let violations = validate_config(&cfg);
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        for v in &violations {
            println!("violation: {v}");
        }
        return if violations.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(format!("{} violation(s)", violations.len())))
        };
    }
    if !violations.is_empty() {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Config(format!("invalid configuration:\n  {}", lines.join("\n  "))));
    }
    let workers = worker_count(cfg.workers)?;
    let out = cfg.paths.out_dir.clone();
    let report = with_workers(workers, || reproduce(&cfg, &out))??;
    println!(
        "held-out filaments {}, measurable {} ({:.1}%)",
        report.filaments,
        report.measurable_result,
        100.0 * report.measurable_fraction
    );
    if let (Some(d), Some(r), Some(q)) = (
        report.median_degraded_fwhm_nm,
        report.median_result_fwhm_nm,
        report.fwhm_ratio,
    ) {
        println!("median FWHM degraded {d:.1} nm, result {r:.1} nm, ratio {q:.3}");
    }
    println!("report: {}", out.join(crate::reproduce::REPORT_FILE).display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_parsing() {
        assert_eq!(parse_k("auto").unwrap(), ThresholdK::Auto);
        assert_eq!(parse_k("1.5").unwrap(), ThresholdK::Value(1.5));
        assert!(parse_k("wide").is_err());
    }

    #[test]
    fn tile_defaults() {
        let cfg = AnetConfig::new(4, 2);
        assert_eq!(default_tile(&cfg, 2048, 2048).unwrap(), 512);
        assert_eq!(default_tile(&cfg, 100, 120).unwrap(), 96);
        assert!(default_tile(&cfg, 10, 10).is_err());
    }
}
