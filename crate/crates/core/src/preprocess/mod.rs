//! Raw-image conditioning and training-set construction.

mod dataset;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image2D, ImageStack};

pub use dataset::{MANIFEST_FILE, build_dataset, load_manifest, load_pairs, DatasetCounts, DatasetManifest, DatasetPair, PairPaths, Split};
pub use weights::{compute_weight_map, connected_components, squared_distance_transform, WeightMap, WeightParams};

/// Multiplier on the background spread for [`threshold_denoise`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdK {
    /// k = 2.
    #[default]
    Auto,
    Value(f64),
}

impl ThresholdK {
    pub fn value(self) -> f64 {
        match self {
            ThresholdK::Auto => 2.0,
            ThresholdK::Value(k) => k,
        }
    }
}

/// Background level and spread estimated from the darkest half of the pixels.
///
/// The darkest half is a one-sided sample of the background, so it is mirrored
/// about its upper edge before taking mean and (population) standard deviation:
/// the mean becomes that edge and the spread is the RMS distance below it.
pub fn background_stats(img: &Image2D) -> (f64, f64) {
    let mut sorted = img.values().to_vec();
    sorted.sort_by(f64::total_cmp);
    let dark = &sorted[..(sorted.len() / 2).max(1)];
    let edge = dark[dark.len() - 1];
    let var = dark.iter().map(|v| (edge - v).powi(2)).sum::<f64>() / dark.len() as f64;
    (edge, var.sqrt())
}

/// Zeroes every pixel below `T = mean_b + k std_b`; pixels at or above `T` are kept unchanged.
pub fn threshold_denoise(img: &Image2D, k: ThresholdK) -> Image2D {
    let k = k.value();
    let (mean, std) = background_stats(img);
    let t = if k.is_infinite() { k } else { mean + k * std };
    let values = img
        .values()
        .iter()
        .map(|&v| if v < t { 0.0 } else { v })
        .collect();
    img.with_values(values).expect("thresholding keeps the image valid")
}

/// Default resampling kernel width, in output pixels.
pub const DEFAULT_UPSAMPLE_SIGMA_PX: f64 = 0.7;

/// Per-axis taps `(input index, weight)` for every output coordinate.
///
/// Output sample `o` sits at input coordinate `o / 2`; distances are measured in
/// output pixels and the window covers `max(3 sigma, 1)` of them.
fn upsample_taps(n_in: usize, sigma: f64) -> Vec<Vec<(usize, f64)>> {
    let radius = (3.0 * sigma).max(1.0);
    let two_s2 = 2.0 * sigma * sigma;
    (0..2 * n_in)
        .map(|o| {
            let mut taps: Vec<(usize, f64)> = (0..n_in)
                .filter_map(|i| {
                    let d = o as f64 - 2.0 * i as f64;
                    (d.abs() <= radius).then(|| (i, (-(d * d) / two_s2).exp()))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Doubles both sides by normalized Gaussian-weighted resampling and halves the pixel pitch.
pub fn gaussian_upsample_x2(img: &Image2D, sigma_px: f64) -> Result<Image2D> {
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::Parameter(format!("upsampling sigma {sigma_px} must be positive")));
    }
    let (w, h) = (img.width(), img.height());
    let xt = upsample_taps(w, sigma_px);
    let yt = upsample_taps(h, sigma_px);
    // Rows first (w -> 2w), then columns (h -> 2h).
    let mut wide = vec![0.0; 2 * w * h];
    for r in 0..h {
        let src = img.row(r);
        for (x, taps) in xt.iter().enumerate() {
            wide[r * 2 * w + x] = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
        }
    }
    let mut out = vec![0.0; 4 * w * h];
    for (y, taps) in yt.iter().enumerate() {
        let dst = &mut out[y * 2 * w..(y + 1) * 2 * w];
        for &(i, wt) in taps {
            for (d, s) in dst.iter_mut().zip(&wide[i * 2 * w..(i + 1) * 2 * w]) {
                *d += wt * s;
            }
        }
    }
    Image2D::new(2 * w, 2 * h, out, img.pixel_pitch_nm() / 2.0, img.source_depth())
}

/// Upsamples every slice, then smooths along z with the same Gaussian.
///
/// Slices are not resampled in z; adjacent slices sit two output units apart,
/// matching the in-plane input spacing.
pub fn gaussian_upsample_stack_x2(stack: &ImageStack, sigma_px: f64) -> Result<ImageStack> {
    let planes = stack
        .slices()
        .iter()
        .map(|s| gaussian_upsample_x2(s, sigma_px))
        .collect::<Result<Vec<_>>>()?;
    let radius = (3.0 * sigma_px).max(1.0);
    let two_s2 = 2.0 * sigma_px * sigma_px;
    let n = planes.len();
    let smoothed = (0..n)
        .map(|z| {
            let taps: Vec<(usize, f64)> = (0..n)
                .filter_map(|j| {
                    let d = 2.0 * (z as f64 - j as f64);
                    (d.abs() <= radius).then(|| (j, (-(d * d) / two_s2).exp()))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            let mut values = vec![0.0; planes[z].len()];
            for (j, wt) in taps {
                for (v, s) in values.iter_mut().zip(planes[j].values()) {
                    *v += wt / total * s;
                }
            }
            planes[z].with_values(values)
        })
        .collect::<Result<Vec<_>>>()?;
    ImageStack::new(smoothed, stack.z_step_nm())
}
