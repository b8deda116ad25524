//! Postprocessing, image-quality metrics, FWHM resolution and stack export.

mod profile;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dwdc::{binarize, BinarizeMethod};
use crate::error::{Error, Result};
use crate::imgcore::{save_stack_manifest, Image2D, ImageStack, SourceDepth, StackManifest};

pub use profile::{fwhm, line_profile, write_profile_csv, FwhmMeasurement, LineProfile};

pub const DEFAULT_RESULT_THRESHOLD: f64 = 0.5;

fn check_shapes(a: &Image2D, b: &Image2D) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Binarizes the prediction at `threshold` and keeps the test image where it is foreground.
pub fn postprocess_result(prediction: &Image2D, test: &Image2D, threshold: f64) -> Result<Image2D> {
    check_shapes(prediction, test)?;
    let mask = binarize(prediction, BinarizeMethod::Fixed(threshold))?;
    let values = mask
        .values()
        .iter()
        .zip(test.values())
        .map(|(m, t)| if *m == 1.0 { *t } else { 0.0 })
        .collect();
    test.with_values(values)
}

/// Peak value implied by an image's source depth; `None` for float data.
pub fn default_max_value(img: &Image2D) -> Option<f64> {
    img.source_depth().max_value()
}

/// Peak signal-to-noise ratio in dB; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image2D, b: &Image2D, max_val: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if !(max_val > 0.0 && max_val.is_finite()) {
        return Err(Error::Parameter(format!("PSNR peak value {max_val} must be positive")));
    }
    let mse = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.map(|t| t / s)
}

/// Separable Gaussian filter over the valid window positions only.
fn filter_valid(data: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for r in 0..h {
        let src = &data[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&src[c..c + SSIM_WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src = &rows[(r + k) * ow..(r + k + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

/// Dynamic range used by [`ssim`]: 255 for 8-bit, 65535 for 16-bit and 1 for float data.
pub fn ssim_range(img: &Image2D) -> f64 {
    default_max_value(img).unwrap_or(1.0)
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).
pub fn ssim(a: &Image2D, b: &Image2D) -> Result<f64> {
    ssim_with_range(a, b, ssim_range(a))
}

pub fn ssim_with_range(a: &Image2D, b: &Image2D, range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::Parameter(format!("SSIM dynamic range {range} must be positive")));
    }
    let taps = ssim_taps();
    let (x, y) = (a.values(), b.values());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let sxx = filter_valid(&xx, w, h, &taps);
    let syy = filter_valid(&yy, w, h, &taps);
    let sxy = filter_valid(&xy, w, h, &taps);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    /// `None` when the images are identical (infinite PSNR).
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fwhm_nm: Option<f64>,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// PSNR and SSIM of `b` against the reference `a`, with peak/range taken from `a`'s depth
/// unless `max_val` is given.
pub fn quality_report(a: &Image2D, b: &Image2D, max_val: Option<f64>) -> Result<QualityReport> {
    let mut notes = Vec::new();
    let peak = match max_val.or_else(|| default_max_value(a)) {
        Some(v) => v,
        None => {
            notes.push("float data: peak value and SSIM range default to 1".to_string());
            1.0
        }
    };
    let p = psnr(a, b, peak)?;
    if p.is_infinite() {
        notes.push("images identical: PSNR is infinite".to_string());
    }
    Ok(QualityReport {
        psnr_db: p.is_finite().then_some(p),
        ssim: ssim_with_range(a, b, peak)?,
        fwhm_nm: None,
        notes,
    })
}

pub fn write_report(report: &QualityReport, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub const STACK_MANIFEST_FILE: &str = "stack.json";

/// Builds a z-ordered stack and writes it to `out_dir` (slices plus `stack.json`).
pub fn stack_result(slices: Vec<Image2D>, z_step_nm: f64, out_dir: &Path) -> Result<(ImageStack, StackManifest)> {
    let stack = ImageStack::new(slices, z_step_nm)?;
    let manifest = save_stack_manifest(&stack, &out_dir.join(STACK_MANIFEST_FILE))?;
    Ok((stack, manifest))
}

/// Per-pixel maximum over z.
pub fn max_intensity_projection(stack: &ImageStack) -> Image2D {
    let slices = stack.slices();
    let mut values = slices[0].values().to_vec();
    for s in &slices[1..] {
        for (m, v) in values.iter_mut().zip(s.values()) {
            *m = m.max(*v);
        }
    }
    let depth = if slices.iter().all(|s| s.source_depth() == slices[0].source_depth()) {
        slices[0].source_depth()
    } else {
        SourceDepth::F32
    };
    slices[0]
        .with_values(values)
        .expect("maximum of valid slices is valid")
        .with_depth(depth)
}
