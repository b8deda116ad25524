//! Separable orthonormal 2D DWT with periodized filter banks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image2D, Plane};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum WaveletFamily {
    #[default]
    Haar,
    /// Four-tap Daubechies filter (two vanishing moments).
    Daubechies4,
}

impl WaveletFamily {
    fn lowpass(self) -> Vec<f64> {
        match self {
            WaveletFamily::Haar => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
            WaveletFamily::Daubechies4 => {
                let s3 = 3f64.sqrt();
                let d = 4.0 * 2f64.sqrt();
                vec![(1.0 + s3) / d, (3.0 + s3) / d, (3.0 - s3) / d, (1.0 - s3) / d]
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ThresholdMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdValue {
    /// Universal threshold from the finest diagonal band.
    #[default]
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveletSpec {
    pub family: WaveletFamily,
    pub levels: usize,
    pub threshold_mode: ThresholdMode,
    pub threshold_value: ThresholdValue,
}

impl Default for WaveletSpec {
    fn default() -> Self {
        WaveletSpec {
            family: WaveletFamily::Haar,
            levels: 2,
            threshold_mode: ThresholdMode::Soft,
            threshold_value: ThresholdValue::Auto,
        }
    }
}

impl WaveletSpec {
    pub fn max_levels(width: usize, height: usize) -> usize {
        let m = width.min(height);
        if m == 0 {
            0
        } else {
            m.ilog2() as usize
        }
    }

    pub fn validate_for(&self, width: usize, height: usize) -> Result<()> {
        let max = Self::max_levels(width, height);
        if self.levels == 0 || self.levels > max {
            return Err(Error::Parameter(format!(
                "{} wavelet levels requested, a {width}x{height} image allows 1..={max}",
                self.levels
            )));
        }
        if let ThresholdValue::Fixed(t) = self.threshold_value {
            if !(t.is_finite() && t >= 0.0) {
                return Err(Error::Parameter(format!("threshold {t} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Detail bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailBands {
    /// Low-pass along x, high-pass along y.
    pub horizontal: Plane,
    /// High-pass along x, low-pass along y.
    pub vertical: Plane,
    pub diagonal: Plane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwtPyramid {
    pub approximation: Plane,
    /// Finest level first.
    pub details: Vec<DetailBands>,
    /// Input size (width, height) of each level before even-padding, finest first.
    pub shapes: Vec<(usize, usize)>,
}

impl DwtPyramid {
    pub fn coefficient_count(&self) -> usize {
        self.approximation.data.len()
            + self
                .details
                .iter()
                .map(|d| d.horizontal.data.len() + d.vertical.data.len() + d.diagonal.data.len())
                .sum::<usize>()
    }

    fn coefficients(&self) -> impl Iterator<Item = &f64> {
        self.approximation.data.iter().chain(
            self.details
                .iter()
                .flat_map(|d| d.horizontal.data.iter().chain(&d.vertical.data).chain(&d.diagonal.data)),
        )
    }

    pub fn energy(&self) -> f64 {
        self.coefficients().map(|c| c * c).sum()
    }

    pub fn zeros_like(&self) -> DwtPyramid {
        let z = |p: &Plane| Plane::zeros(p.width, p.height);
        DwtPyramid {
            approximation: z(&self.approximation),
            details: self
                .details
                .iter()
                .map(|d| DetailBands {
                    horizontal: z(&d.horizontal),
                    vertical: z(&d.vertical),
                    diagonal: z(&d.diagonal),
                })
                .collect(),
            shapes: self.shapes.clone(),
        }
    }
}

fn highpass(lo: &[f64]) -> Vec<f64> {
    let n = lo.len();
    (0..n)
        .map(|m| if m % 2 == 0 { lo[n - 1 - m] } else { -lo[n - 1 - m] })
        .collect()
}

fn analyze_1d(x: &[f64], lo: &[f64], hi: &[f64], a: &mut [f64], d: &mut [f64]) {
    let n = x.len();
    for k in 0..n / 2 {
        let (mut sa, mut sd) = (0.0, 0.0);
        for (m, (l, h)) in lo.iter().zip(hi).enumerate() {
            let v = x[(2 * k + m) % n];
            sa += l * v;
            sd += h * v;
        }
        a[k] = sa;
        d[k] = sd;
    }
}

fn synthesize_1d(a: &[f64], d: &[f64], lo: &[f64], hi: &[f64], x: &mut [f64]) {
    let n = x.len();
    x.fill(0.0);
    for k in 0..n / 2 {
        for (m, (l, h)) in lo.iter().zip(hi).enumerate() {
            x[(2 * k + m) % n] += l * a[k] + h * d[k];
        }
    }
}

/// Duplicates the last row/column so both sides are even.
fn pad_even(p: &Plane) -> Plane {
    let w = p.width + p.width % 2;
    let h = p.height + p.height % 2;
    if w == p.width && h == p.height {
        return p.clone();
    }
    let mut out = Plane::zeros(w, h);
    for r in 0..h {
        let sr = r.min(p.height - 1);
        for c in 0..w {
            out.set(r, c, p.get(sr, c.min(p.width - 1)));
        }
    }
    out
}

fn forward_level(p: &Plane, lo: &[f64], hi: &[f64]) -> (Plane, DetailBands) {
    let x = pad_even(p);
    let (w, h) = (x.width, x.height);
    let (hw, hh) = (w / 2, h / 2);
    // Rows: split into low (left half) and high (right half).
    let mut rows = Plane::zeros(w, h);
    for r in 0..h {
        let (a, d) = rows.data[r * w..(r + 1) * w].split_at_mut(hw);
        analyze_1d(x.row(r), lo, hi, a, d);
    }
    let mut ll = Plane::zeros(hw, hh);
    let mut lh = Plane::zeros(hw, hh);
    let mut hl = Plane::zeros(hw, hh);
    let mut hh_band = Plane::zeros(hw, hh);
    let mut col = vec![0.0; h];
    let mut a = vec![0.0; hh];
    let mut d = vec![0.0; hh];
    for c in 0..w {
        for r in 0..h {
            col[r] = rows.get(r, c);
        }
        analyze_1d(&col, lo, hi, &mut a, &mut d);
        let (low_x, cx) = if c < hw { (true, c) } else { (false, c - hw) };
        for r in 0..hh {
            if low_x {
                ll.set(r, cx, a[r]);
                lh.set(r, cx, d[r]);
            } else {
                hl.set(r, cx, a[r]);
                hh_band.set(r, cx, d[r]);
            }
        }
    }
    (
        ll,
        DetailBands {
            horizontal: lh,
            vertical: hl,
            diagonal: hh_band,
        },
    )
}

fn inverse_level(approx: &Plane, bands: &DetailBands, shape: (usize, usize), lo: &[f64], hi: &[f64]) -> Plane {
    let (hw, hh) = (approx.width, approx.height);
    let (w, h) = (2 * hw, 2 * hh);
    let mut rows = Plane::zeros(w, h);
    let mut col = vec![0.0; h];
    let mut a = vec![0.0; hh];
    let mut d = vec![0.0; hh];
    for c in 0..w {
        let (low, high, cx) = if c < hw {
            (approx, &bands.horizontal, c)
        } else {
            (&bands.vertical, &bands.diagonal, c - hw)
        };
        for r in 0..hh {
            a[r] = low.get(r, cx);
            d[r] = high.get(r, cx);
        }
        synthesize_1d(&a, &d, lo, hi, &mut col);
        for r in 0..h {
            rows.set(r, c, col[r]);
        }
    }
    let mut full = Plane::zeros(w, h);
    for r in 0..h {
        let (a, d) = rows.row(r).split_at(hw);
        synthesize_1d(a, d, lo, hi, &mut full.data[r * w..(r + 1) * w]);
    }
    let (ow, oh) = shape;
    if ow == w && oh == h {
        return full;
    }
    let mut out = Plane::zeros(ow, oh);
    for r in 0..oh {
        out.data[r * ow..(r + 1) * ow].copy_from_slice(&full.row(r)[..ow]);
    }
    out
}

pub fn dwt2_forward_plane(p: &Plane, spec: &WaveletSpec) -> Result<DwtPyramid> {
    spec.validate_for(p.width, p.height)?;
    let lo = spec.family.lowpass();
    let hi = highpass(&lo);
    let mut approx = p.clone();
    let mut details = Vec::with_capacity(spec.levels);
    let mut shapes = Vec::with_capacity(spec.levels);
    for _ in 0..spec.levels {
        shapes.push((approx.width, approx.height));
        let (a, d) = forward_level(&approx, &lo, &hi);
        details.push(d);
        approx = a;
    }
    Ok(DwtPyramid {
        approximation: approx,
        details,
        shapes,
    })
}

pub fn dwt2_inverse_plane(pyr: &DwtPyramid, spec: &WaveletSpec) -> Result<Plane> {
    if pyr.details.len() != spec.levels || pyr.shapes.len() != spec.levels {
        return Err(Error::Pyramid(format!(
            "pyramid has {} levels, spec asks for {}",
            pyr.details.len(),
            spec.levels
        )));
    }
    let lo = spec.family.lowpass();
    let hi = highpass(&lo);
    let mut approx = pyr.approximation.clone();
    for (level, (bands, &shape)) in pyr.details.iter().zip(&pyr.shapes).enumerate().rev() {
        let dims = (approx.width, approx.height);
        for band in [&bands.horizontal, &bands.vertical, &bands.diagonal] {
            if (band.width, band.height) != dims {
                return Err(Error::Pyramid(format!(
                    "level {level} band is {}x{}, approximation is {}x{}",
                    band.width, band.height, dims.0, dims.1
                )));
            }
        }
        if shape.0.div_ceil(2) != dims.0 || shape.1.div_ceil(2) != dims.1 {
            return Err(Error::Pyramid(format!(
                "level {level} shape {}x{} does not halve to {}x{}",
                shape.0, shape.1, dims.0, dims.1
            )));
        }
        approx = inverse_level(&approx, bands, shape, &lo, &hi);
    }
    Ok(approx)
}

pub fn dwt2_forward(img: &Image2D, spec: &WaveletSpec) -> Result<DwtPyramid> {
    dwt2_forward_plane(&img.to_plane(), spec)
}

/// Inverse transform back to an image. Negative reconstructions are clamped to
/// zero; use [`dwt2_inverse_plane`] for the raw signed result.
pub fn dwt2_inverse(pyr: &DwtPyramid, spec: &WaveletSpec, like: &Image2D) -> Result<Image2D> {
    let plane = dwt2_inverse_plane(pyr, spec)?;
    if plane.width != like.width() || plane.height != like.height() {
        return Err(Error::Pyramid(format!(
            "pyramid reconstructs {}x{}, expected {}x{}",
            plane.width,
            plane.height,
            like.width(),
            like.height()
        )));
    }
    Image2D::from_plane_clamped(plane, like.pixel_pitch_nm(), like.source_depth())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Universal threshold `sigma * sqrt(2 ln N)`, with sigma estimated by the
/// median absolute finest diagonal coefficient over 0.6745.
pub fn universal_threshold(pyr: &DwtPyramid, pixel_count: usize) -> f64 {
    let finest = &pyr.details[0].diagonal.data;
    let sigma = median(finest.iter().map(|c| c.abs()).collect()) / 0.6745;
    sigma * (2.0 * (pixel_count as f64).ln()).sqrt()
}

fn shrink(c: f64, t: f64, mode: ThresholdMode) -> f64 {
    match mode {
        ThresholdMode::Soft => c.signum() * (c.abs() - t).max(0.0),
        ThresholdMode::Hard => {
            if c.abs() < t {
                0.0
            } else {
                c
            }
        }
    }
}

/// Thresholds every detail band and reconstructs, clamping negatives to zero.
pub fn wavelet_denoise(img: &Image2D, spec: &WaveletSpec) -> Result<Image2D> {
    let mut pyr = dwt2_forward(img, spec)?;
    let t = match spec.threshold_value {
        ThresholdValue::Auto => universal_threshold(&pyr, img.len()),
        ThresholdValue::Fixed(t) => t,
    };
    for bands in &mut pyr.details {
        for band in [&mut bands.horizontal, &mut bands.vertical, &mut bands.diagonal] {
            for c in &mut band.data {
                *c = shrink(*c, t, spec.threshold_mode);
            }
        }
    }
    dwt2_inverse(&pyr, spec, img)
}
