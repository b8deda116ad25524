//! Label synthesis: wavelet denoising, Lucy-Richardson deconvolution and
//! binarization, chained by [`make_label`].

mod lucy;
mod wavelet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image2D, SourceDepth};

pub use lucy::{lucy_richardson, lucy_richardson_inspect, poisson_log_likelihood, LrOutcome, LrSpec};
pub use wavelet::{
    dwt2_forward, dwt2_forward_plane, dwt2_inverse, dwt2_inverse_plane, universal_threshold, wavelet_denoise,
    DetailBands, DwtPyramid, ThresholdMode, ThresholdValue, WaveletFamily, WaveletSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarizeMethod {
    Otsu,
    /// Foreground where the value is strictly above the threshold.
    Fixed(f64),
}

const OTSU_BINS: usize = 256;

fn otsu_bins(img: &Image2D) -> Result<(Vec<usize>, f64, f64)> {
    let (lo, hi) = (img.min(), img.max());
    if hi <= lo {
        return Err(Error::DegenerateHistogram);
    }
    let scale = OTSU_BINS as f64 / (hi - lo);
    let bins = img
        .values()
        .iter()
        .map(|v| (((v - lo) * scale) as usize).min(OTSU_BINS - 1))
        .collect();
    Ok((bins, lo, hi))
}

/// Otsu's split over a 256-bin histogram of min-max normalized intensities.
///
/// Returns the last background bin index; pixels in higher bins are foreground.
fn otsu_bin(bins: &[usize]) -> usize {
    let mut hist = [0usize; OTSU_BINS];
    for &b in bins {
        hist[b] += 1;
    }
    let total = bins.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (f64::NEG_INFINITY, 0);
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count as f64;
        sum0 += k as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    best_k
}

/// Intensity at the upper edge of the Otsu background bin.
pub fn otsu_threshold(img: &Image2D) -> Result<f64> {
    let (bins, lo, hi) = otsu_bins(img)?;
    let k = otsu_bin(&bins);
    Ok(lo + (k + 1) as f64 / OTSU_BINS as f64 * (hi - lo))
}

/// Maps an image onto `{0, 1}`.
pub fn binarize(img: &Image2D, method: BinarizeMethod) -> Result<Image2D> {
    let values = match method {
        BinarizeMethod::Fixed(t) => img
            .values()
            .iter()
            .map(|&v| if v > t { 1.0 } else { 0.0 })
            .collect(),
        BinarizeMethod::Otsu => {
            let (bins, _, _) = otsu_bins(img)?;
            let k = otsu_bin(&bins);
            bins.iter().map(|&b| if b > k { 1.0 } else { 0.0 }).collect()
        }
    };
    Ok(img.with_values(values)?.with_depth(SourceDepth::U8))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutcome {
    pub label: Image2D,
    /// Input carried no signal; the label is all background.
    pub zero_input: bool,
}

/// Denoise, deconvolve, then Otsu-binarize a preprocessed image into a label.
pub fn make_label(preprocessed: &Image2D, wspec: &WaveletSpec, lspec: &LrSpec) -> Result<LabelOutcome> {
    if preprocessed.max() <= 0.0 {
        let label = Image2D::zeros(
            preprocessed.width(),
            preprocessed.height(),
            preprocessed.pixel_pitch_nm(),
            SourceDepth::U8,
        )?;
        return Ok(LabelOutcome {
            label,
            zero_input: true,
        });
    }
    let denoised = wavelet_denoise(preprocessed, wspec)?;
    let deconvolved = lucy_richardson(&denoised, lspec)?;
    if deconvolved.zero_input {
        let label = Image2D::zeros(
            preprocessed.width(),
            preprocessed.height(),
            preprocessed.pixel_pitch_nm(),
            SourceDepth::U8,
        )?;
        return Ok(LabelOutcome {
            label,
            zero_input: true,
        });
    }
    Ok(LabelOutcome {
        label: binarize(&deconvolved.image, BinarizeMethod::Otsu)?,
        zero_input: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postmetrics::{fwhm, line_profile};
    use crate::synthlab::{degrade, gaussian_psf, render_filaments, DegradationSpec, Filament, NoiseKind};

    fn bimodal() -> Image2D {
        Image2D::from_fn(16, 16, 1.0, SourceDepth::U8, |r, _| if r < 8 { 10.0 } else { 200.0 }).unwrap()
    }

    /// Exhaustive Otsu over every distinct split of the raw pixel values.
    fn brute_otsu_split(values: &[f64]) -> f64 {
        let mut distinct: Vec<f64> = values.to_vec();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for t in &distinct[..distinct.len() - 1] {
            let (a, b): (Vec<f64>, Vec<f64>) = values.iter().partition(|v| **v <= *t);
            let (wa, wb) = (a.len() as f64, b.len() as f64);
            let ma = a.iter().sum::<f64>() / wa;
            let mb = b.iter().sum::<f64>() / wb;
            let between = wa * wb * (ma - mb).powi(2);
            if between > best.0 {
                best = (between, *t);
            }
        }
        best.1
    }

    #[test]
    fn otsu_separates_bimodal_halves() {
        let img = bimodal();
        let t = otsu_threshold(&img).unwrap();
        assert!(t > 10.0 && t < 200.0, "{t}");
        assert_eq!(brute_otsu_split(img.values()), 10.0);
        let mask = binarize(&img, BinarizeMethod::Otsu).unwrap();
        for r in 0..16 {
            for c in 0..16 {
                assert_eq!(mask.get(r, c), if r < 8 { 0.0 } else { 1.0 });
            }
        }
    }

    #[test]
    fn otsu_agrees_with_brute_force_on_trimodal_data() {
        // Three well-separated clusters; histogram Otsu must pick the same split
        // as the exhaustive search over raw values.
        let img = Image2D::from_fn(30, 10, 1.0, SourceDepth::F32, |r, c| {
            let base = match c / 10 {
                0 => 5.0,
                1 => 120.0,
                _ => 250.0,
            };
            base + (r % 3) as f64
        })
        .unwrap();
        let t_brute = brute_otsu_split(img.values());
        let mask = binarize(&img, BinarizeMethod::Otsu).unwrap();
        for (v, m) in img.values().iter().zip(mask.values()) {
            assert_eq!(*m, if *v > t_brute { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn fixed_threshold_and_idempotence() {
        let img = Image2D::new(2, 1, vec![0.2, 0.7], 1.0, SourceDepth::F32).unwrap();
        let m = binarize(&img, BinarizeMethod::Fixed(0.5)).unwrap();
        assert_eq!(m.values(), &[0.0, 1.0]);
        assert_eq!(binarize(&m, BinarizeMethod::Fixed(0.5)).unwrap().values(), m.values());
        let otsu = binarize(&bimodal(), BinarizeMethod::Otsu).unwrap();
        assert!(otsu.values().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn constant_image_has_no_otsu_threshold() {
        let img = Image2D::new(2, 2, vec![3.0; 4], 1.0, SourceDepth::F32).unwrap();
        assert!(matches!(binarize(&img, BinarizeMethod::Otsu), Err(Error::DegenerateHistogram)));
    }

    #[test]
    fn label_is_narrower_than_blurred_filament() {
        let f = Filament {
            p0: [32.0, 2.0],
            p1: [32.0, 32.0],
            p2: [32.0, 62.0],
        };
        let phantom = render_filaments(64, 64, &[f], 1.5, 100.0, 62.5).unwrap();
        let psf = gaussian_psf(2.0, 6).unwrap();
        let blurred = degrade(
            &phantom,
            &DegradationSpec {
                psf: psf.clone(),
                noise_kind: NoiseKind::None,
                noise_param: 0.0,
                seed: 0,
            },
        )
        .unwrap();
        let lspec = LrSpec::new(psf, 20, 1e-12).unwrap();
        let out = make_label(&blurred, &WaveletSpec::default(), &lspec).unwrap();
        assert!(!out.zero_input);
        let before = fwhm(&line_profile(&blurred, 32, 16..48).unwrap()).unwrap().width_nm;
        let after = fwhm(&line_profile(&out.label, 32, 16..48).unwrap()).unwrap().width_nm;
        assert!(after < before, "{after} vs {before}");
        let again = make_label(&blurred, &WaveletSpec::default(), &lspec).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn zero_input_gives_zero_label() {
        let z = Image2D::zeros(32, 32, 62.5, SourceDepth::F32).unwrap();
        let lspec = LrSpec::new(gaussian_psf(2.0, 6).unwrap(), 20, 1e-12).unwrap();
        let out = make_label(&z, &WaveletSpec::default(), &lspec).unwrap();
        assert!(out.zero_input);
        assert!(out.label.values().iter().all(|v| *v == 0.0));
    }
}
