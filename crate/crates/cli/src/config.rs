//! The run configuration: one JSON document, overridable by dotted keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use filament_anet::{AnetConfig, LossReduction};
use filament_core::dwdc::{LrSpec, ThresholdMode, ThresholdValue, WaveletFamily, WaveletSpec};
use filament_core::preprocess::{ThresholdK, WeightParams};
use filament_core::synthlab::{gaussian_psf, PhantomSpec, Psf};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Ordered reductions and a fixed worker pool; on by default.
    pub deterministic: bool,
    /// Worker threads; `FILAMENT_SR_WORKERS` takes precedence.
    pub workers: Option<usize>,
    pub paths: PathsConfig,
    pub phantom: PhantomConfig,
    pub degrade: DegradeConfig,
    pub preprocess: PreprocessConfig,
    pub dwdc: DwdcConfig,
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub predict: PredictConfig,
    pub eval: EvalConfig,
    pub stack: StackConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            deterministic: true,
            workers: None,
            paths: PathsConfig::default(),
            phantom: PhantomConfig::default(),
            degrade: DegradeConfig::default(),
            preprocess: PreprocessConfig::default(),
            dwdc: DwdcConfig::default(),
            dataset: DatasetConfig::default(),
            train: TrainSection::default(),
            predict: PredictConfig::default(),
            eval: EvalConfig::default(),
            stack: StackConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: PathBuf::from("reproduce_out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Phantoms generated in total; the last `held_out` are never trained on.
    pub count: usize,
    pub held_out: usize,
    pub width: usize,
    pub height: usize,
    pub n_filaments: usize,
    pub thickness_px: f64,
    pub intensity: f64,
    pub curvature: f64,
    pub pixel_pitch_nm: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            count: 80,
            held_out: 16,
            width: 64,
            height: 64,
            n_filaments: 3,
            thickness_px: 1.0,
            intensity: 1.0,
            curvature: 0.3,
            pixel_pitch_nm: 62.5,
        }
    }
}

impl PhantomConfig {
    pub fn spec(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            width: self.width,
            height: self.height,
            n_filaments: self.n_filaments,
            thickness_px: self.thickness_px,
            intensity: self.intensity,
            curvature: self.curvature,
            seed,
            pixel_pitch_nm: self.pixel_pitch_nm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseName {
    Gaussian,
    Poisson,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    pub psf_sigma_px: f64,
    pub psf_radius_px: usize,
    pub noise: NoiseName,
    /// Gaussian: standard deviation as a fraction of the blurred peak.
    /// Poisson: intensity per photon count, as a fraction of the blurred peak.
    pub noise_fraction: f64,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            psf_sigma_px: 2.0,
            psf_radius_px: 6,
            noise: NoiseName::Gaussian,
            noise_fraction: 0.05,
        }
    }
}

impl DegradeConfig {
    pub fn psf(&self) -> Result<Psf, CliError> {
        Ok(gaussian_psf(self.psf_sigma_px, self.psf_radius_px)?)
    }
}

/// Background threshold factor: `"auto"` or a number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KSetting {
    Value(f64),
    Named(KName),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KName {
    Auto,
}

impl KSetting {
    pub fn threshold_k(self) -> ThresholdK {
        match self {
            KSetting::Value(v) => ThresholdK::Value(v),
            KSetting::Named(KName::Auto) => ThresholdK::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Number of 2x Gaussian upsampling passes.
    pub upsample_passes: usize,
    pub upsample_sigma_px: f64,
    pub threshold_k: KSetting,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            upsample_passes: 1,
            upsample_sigma_px: filament_core::preprocess::DEFAULT_UPSAMPLE_SIGMA_PX,
            threshold_k: KSetting::Named(KName::Auto),
        }
    }
}

impl PreprocessConfig {
    pub fn scale(&self) -> usize {
        1 << self.upsample_passes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveletName {
    Haar,
    #[serde(alias = "d4", alias = "db4")]
    Daubechies4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkName {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DwdcConfig {
    pub wavelet: WaveletName,
    pub levels: usize,
    pub shrink: ShrinkName,
    /// Wavelet threshold; `None` selects the universal threshold.
    pub wavelet_threshold: Option<f64>,
    pub lr_iterations: usize,
    pub lr_epsilon: f64,
    /// Deconvolution PSF width at the labelling resolution; `None` scales the
    /// degradation PSF by the upsampling factor.
    pub psf_sigma_px: Option<f64>,
}

impl Default for DwdcConfig {
    fn default() -> Self {
        DwdcConfig {
            wavelet: WaveletName::Haar,
            levels: 2,
            shrink: ShrinkName::Soft,
            wavelet_threshold: None,
            lr_iterations: 200,
            lr_epsilon: 1e-12,
            psf_sigma_px: None,
        }
    }
}

impl DwdcConfig {
    pub fn wavelet_spec(&self) -> WaveletSpec {
        WaveletSpec {
            family: match self.wavelet {
                WaveletName::Haar => WaveletFamily::Haar,
                WaveletName::Daubechies4 => WaveletFamily::Daubechies4,
            },
            levels: self.levels,
            threshold_mode: match self.shrink {
                ShrinkName::Soft => ThresholdMode::Soft,
                ShrinkName::Hard => ThresholdMode::Hard,
            },
            threshold_value: match self.wavelet_threshold {
                Some(t) => ThresholdValue::Fixed(t),
                None => ThresholdValue::Auto,
            },
        }
    }

    /// Deconvolution PSF for images upsampled by `scale`.
    pub fn lr_spec(&self, degrade: &DegradeConfig, scale: usize) -> Result<LrSpec, CliError> {
        let sigma = self.psf_sigma_px.unwrap_or(degrade.psf_sigma_px * scale as f64);
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        Ok(LrSpec::new(gaussian_psf(sigma, radius)?, self.lr_iterations, self.lr_epsilon)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub tile_size: usize,
    pub w0: f64,
    pub sigma_w: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let w = WeightParams::default();
        DatasetConfig {
            tile_size: 64,
            w0: w.w0,
            sigma_w: w.sigma_px,
        }
    }
}

impl DatasetConfig {
    pub fn weight_params(&self) -> WeightParams {
        WeightParams {
            w0: self.w0,
            sigma_px: self.sigma_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub depth: usize,
    pub base_channels: usize,
    pub epochs: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub reduction: LossReduction,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            depth: 3,
            base_channels: 8,
            epochs: 30,
            lr: 1e-3,
            checkpoint_every: 10,
            reduction: LossReduction::WeightNormalized,
        }
    }
}

impl TrainSection {
    pub fn anet(&self) -> AnetConfig {
        AnetConfig::new(self.depth, self.base_channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub threshold: f64,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            threshold: filament_core::postmetrics::DEFAULT_RESULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Cross-section half-length at the evaluated (upsampled) resolution.
    pub half_window_px: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { half_window_px: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StackConfig {
    pub z_step_nm: f64,
}

impl Default for StackConfig {
    fn default() -> Self {
        StackConfig { z_step_nm: 200.0 }
    }
}

/// One failed precondition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Every dotted key involved.
    pub keys: Vec<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.keys.join(", "), self.message)
    }
}

struct Checker(Vec<Violation>);

impl Checker {
    fn require(&mut self, ok: bool, keys: &[&str], message: impl Into<String>) {
        if !ok {
            self.0.push(Violation {
                keys: keys.iter().map(|k| k.to_string()).collect(),
                message: message.into(),
            });
        }
    }

    fn positive(&mut self, v: f64, key: &str) {
        self.require(v > 0.0 && v.is_finite(), &[key], format!("must be positive and finite, got {v}"));
    }

    fn non_negative(&mut self, v: f64, key: &str) {
        self.require(v >= 0.0 && v.is_finite(), &[key], format!("must be non-negative and finite, got {v}"));
    }

    fn at_least(&mut self, v: usize, min: usize, key: &str) {
        self.require(v >= min, &[key], format!("must be at least {min}, got {v}"));
    }
}

/// Every violated precondition; empty when the configuration is runnable.
pub fn validate_config(cfg: &RunConfig) -> Vec<Violation> {
    let mut c = Checker(Vec::new());
    if let Some(w) = cfg.workers {
        c.at_least(w, 1, "workers");
    }

    let p = &cfg.phantom;
    c.at_least(p.count, 2, "phantom.count");
    c.at_least(p.held_out, 1, "phantom.held_out");
    c.require(
        p.held_out < p.count,
        &["phantom.held_out", "phantom.count"],
        format!("{} held-out phantoms leave none of {} to train on", p.held_out, p.count),
    );
    c.at_least(p.width, 1, "phantom.width");
    c.at_least(p.height, 1, "phantom.height");
    c.at_least(p.n_filaments, 1, "phantom.n_filaments");
    c.require(
        p.thickness_px >= 0.5 && p.thickness_px.is_finite(),
        &["phantom.thickness_px"],
        format!("must be at least 0.5, got {}", p.thickness_px),
    );
    c.positive(p.intensity, "phantom.intensity");
    c.non_negative(p.curvature, "phantom.curvature");
    c.positive(p.pixel_pitch_nm, "phantom.pixel_pitch_nm");

    let d = &cfg.degrade;
    c.positive(d.psf_sigma_px, "degrade.psf_sigma_px");
    c.at_least(d.psf_radius_px, 1, "degrade.psf_radius_px");
    c.require(
        2 * d.psf_radius_px < p.width.min(p.height).max(1),
        &["degrade.psf_radius_px", "phantom.width", "phantom.height"],
        "point spread function is wider than the phantom",
    );
    c.non_negative(d.noise_fraction, "degrade.noise_fraction");
    if d.noise == NoiseName::Poisson {
        c.positive(d.noise_fraction, "degrade.noise_fraction");
    }

    let pre = &cfg.preprocess;
    c.require(pre.upsample_passes <= 4, &["preprocess.upsample_passes"], "at most 4 passes");
    c.positive(pre.upsample_sigma_px, "preprocess.upsample_sigma_px");
    if let KSetting::Value(k) = pre.threshold_k {
        c.require(!k.is_nan(), &["preprocess.threshold_k"], "must be a number or \"auto\"");
    }
    let scale = pre.scale().min(16);
    let (lw, lh) = (p.width * scale, p.height * scale);

    let w = &cfg.dwdc;
    c.at_least(w.levels, 1, "dwdc.levels");
    let max_levels = WaveletSpec::max_levels(lw, lh);
    c.require(
        w.levels <= max_levels,
        &["dwdc.levels", "phantom.width", "phantom.height"],
        format!("{} levels exceed the {max_levels} a {lw}x{lh} image supports", w.levels),
    );
    if let Some(t) = w.wavelet_threshold {
        c.non_negative(t, "dwdc.wavelet_threshold");
    }
    c.at_least(w.lr_iterations, 1, "dwdc.lr_iterations");
    c.positive(w.lr_epsilon, "dwdc.lr_epsilon");
    if let Some(s) = w.psf_sigma_px {
        c.positive(s, "dwdc.psf_sigma_px");
    }

    let ds = &cfg.dataset;
    c.at_least(ds.tile_size, 1, "dataset.tile_size");
    c.non_negative(ds.w0, "dataset.w0");
    c.positive(ds.sigma_w, "dataset.sigma_w");

    let t = &cfg.train;
    c.at_least(t.depth, 1, "train.depth");
    c.require(t.depth <= 16, &["train.depth"], format!("depth {} is unreasonably deep", t.depth));
    c.at_least(t.base_channels, 1, "train.base_channels");
    c.at_least(t.epochs, 1, "train.epochs");
    c.positive(t.lr, "train.lr");
    if ds.tile_size > 0 && (1..=16).contains(&t.depth) {
        let m = 1usize << t.depth;
        c.require(
            ds.tile_size % m == 0,
            &["dataset.tile_size", "train.depth"],
            format!("tile size {} is not divisible by 2^{} = {m}", ds.tile_size, t.depth),
        );
    }

    c.require(
        (0.0..=1.0).contains(&cfg.predict.threshold),
        &["predict.threshold"],
        format!("must lie in [0, 1], got {}", cfg.predict.threshold),
    );
    c.at_least(cfg.eval.half_window_px, 3, "eval.half_window_px");
    c.positive(cfg.stack.z_step_nm, "stack.z_step_nm");
    c.0
}

/// Sets `dotted.key` in a JSON document. The value is parsed as JSON when it
/// parses, and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = node
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("`{}` is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one part")
}

/// Builds a configuration from an optional JSON file plus overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let mut doc = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Io(p.to_path_buf(), e))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))
}

/// Loads and validates; violations become one configuration error.
pub fn load_valid_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, CliError> {
    let cfg = load_config(path, overrides)?;
    let violations = validate_config(&cfg);
    if violations.is_empty() {
        Ok(cfg)
    } else {
        let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(CliError::Config(format!("invalid configuration:\n  {}", lines.join("\n  "))))
    }
}
