//! Calibrated grayscale images, file formats, bit-depth conversion and tiling.
//!
//! [`Image2D`] is the currency passed between every pipeline stage. Values are
//! stored row-major as `f64` in raw units (no implicit normalization), together
//! with the pixel pitch that line-profile measurements convert through.

mod io;
mod tiles;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_image, load_stack_manifest, save_image, save_stack_manifest, FloatSidecar, StackManifest};
pub use tiles::{assemble_tiles, split_tiles, TileGrid};
pub(crate) use io::resolve;

/// Pixel pitch assumed when a file carries no calibration (raw confocal interval).
pub const DEFAULT_PIXEL_PITCH_NM: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceDepth {
    U8,
    U16,
    F32,
}

impl SourceDepth {
    pub fn name(self) -> &'static str {
        match self {
            SourceDepth::U8 => "U8",
            SourceDepth::U16 => "U16",
            SourceDepth::F32 => "F32",
        }
    }

    /// Largest representable sample, `None` for float data.
    pub fn max_value(self) -> Option<f64> {
        match self {
            SourceDepth::U8 => Some(255.0),
            SourceDepth::U16 => Some(65535.0),
            SourceDepth::F32 => None,
        }
    }
}

/// Unconstrained row-major 2D array, used for transform coefficients and weight maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} plane",
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }
}

/// A calibrated grayscale plane.
///
/// Invariants: `values.len() == width * height`, every value finite and
/// non-negative, `pixel_pitch_nm > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    width: usize,
    height: usize,
    values: Vec<f64>,
    pixel_pitch_nm: f64,
    source_depth: SourceDepth,
}

impl Image2D {
    pub fn new(
        width: usize,
        height: usize,
        values: Vec<f64>,
        pixel_pitch_nm: f64,
        source_depth: SourceDepth,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Invalid(format!("zero-sized image {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Invalid(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if !(pixel_pitch_nm.is_finite() && pixel_pitch_nm > 0.0) {
            return Err(Error::Invalid(format!("pixel pitch {pixel_pitch_nm} nm")));
        }
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Invalid(format!("value {v} at index {i}")));
        }
        Ok(Image2D {
            width,
            height,
            values,
            pixel_pitch_nm,
            source_depth,
        })
    }

    pub fn zeros(width: usize, height: usize, pixel_pitch_nm: f64, depth: SourceDepth) -> Result<Self> {
        Image2D::new(width, height, vec![0.0; width * height], pixel_pitch_nm, depth)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        pixel_pitch_nm: f64,
        depth: SourceDepth,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Image2D::new(width, height, values, pixel_pitch_nm, depth)
    }

    /// Builds an image from a plane, clamping negatives to zero.
    pub fn from_plane_clamped(plane: Plane, pixel_pitch_nm: f64, depth: SourceDepth) -> Result<Self> {
        let Plane {
            width,
            height,
            mut data,
        } = plane;
        for v in &mut data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Image2D::new(width, height, data, pixel_pitch_nm, depth)
    }

    /// New image with the same geometry and calibration but different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Image2D::new(self.width, self.height, values, self.pixel_pitch_nm, self.source_depth)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn pixel_pitch_nm(&self) -> f64 {
        self.pixel_pitch_nm
    }

    pub fn source_depth(&self) -> SourceDepth {
        self.source_depth
    }

    pub fn set_pixel_pitch_nm(&mut self, pitch: f64) -> Result<()> {
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::Invalid(format!("pixel pitch {pitch} nm")));
        }
        self.pixel_pitch_nm = pitch;
        Ok(())
    }

    pub fn with_depth(mut self, depth: SourceDepth) -> Self {
        self.source_depth = depth;
        self
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_shape(&self, other: &Image2D) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn to_plane(&self) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.values.clone(),
        }
    }
}

/// Ordered z-stack of equally shaped, equally calibrated slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack {
    slices: Vec<Image2D>,
    z_step_nm: f64,
}

impl ImageStack {
    pub fn new(slices: Vec<Image2D>, z_step_nm: f64) -> Result<Self> {
        let first = slices
            .first()
            .ok_or_else(|| Error::Stack("a stack needs at least one slice".into()))?;
        if !(z_step_nm.is_finite() && z_step_nm > 0.0) {
            return Err(Error::Stack(format!("z step {z_step_nm} nm")));
        }
        for (i, s) in slices.iter().enumerate().skip(1) {
            if !s.same_shape(first) || s.pixel_pitch_nm() != first.pixel_pitch_nm() {
                return Err(Error::Stack(format!(
                    "slice {i} is {}x{} @ {} nm, slice 0 is {}x{} @ {} nm",
                    s.width(),
                    s.height(),
                    s.pixel_pitch_nm(),
                    first.width(),
                    first.height(),
                    first.pixel_pitch_nm()
                )));
            }
        }
        Ok(ImageStack { slices, z_step_nm })
    }

    pub fn slices(&self) -> &[Image2D] {
        &self.slices
    }

    pub fn z_step_nm(&self) -> f64 {
        self.z_step_nm
    }

    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid for any offset.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Maps full-range 16-bit data linearly onto 8 bits.
pub fn convert_16_to_8(img: &Image2D) -> Result<Image2D> {
    if img.source_depth() != SourceDepth::U16 {
        return Err(Error::Depth {
            expected: "U16",
            actual: img.source_depth().name(),
        });
    }
    let mut out = Vec::with_capacity(img.len());
    for (i, &v) in img.values().iter().enumerate() {
        if v > 65535.0 {
            return Err(Error::Range {
                value: v,
                index: i,
                depth: "U16",
            });
        }
        // f64::round is half-away-from-zero.
        out.push((v * 255.0 / 65535.0).round());
    }
    Ok(img.with_values(out)?.with_depth(SourceDepth::U8))
}

/// Result of [`normalize_unit`]; `all_zero` flags an input with no signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub image: Image2D,
    pub all_zero: bool,
}

/// Divides by the maximum so values land in `[0, 1]`.
pub fn normalize_unit(img: &Image2D) -> Normalized {
    let max = img.max();
    if max <= 0.0 {
        return Normalized {
            image: img.clone().with_depth(SourceDepth::F32),
            all_zero: true,
        };
    }
    let values = img.values().iter().map(|v| v / max).collect();
    Normalized {
        image: img
            .with_values(values)
            .expect("scaling keeps values finite and non-negative")
            .with_depth(SourceDepth::F32),
        all_zero: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn u16_image(values: Vec<f64>) -> Image2D {
        let n = values.len();
        Image2D::new(n, 1, values, 250.0, SourceDepth::U16).unwrap()
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(Image2D::new(2, 1, vec![1.0, -1.0], 1.0, SourceDepth::F32).is_err());
        assert!(Image2D::new(2, 1, vec![1.0, f64::NAN], 1.0, SourceDepth::F32).is_err());
        assert!(Image2D::new(2, 2, vec![1.0], 1.0, SourceDepth::F32).is_err());
        assert!(Image2D::new(1, 1, vec![1.0], 0.0, SourceDepth::F32).is_err());
    }

    #[test]
    fn depth_conversion_endpoints() {
        let out = convert_16_to_8(&u16_image(vec![0.0, 65535.0, 32768.0])).unwrap();
        assert_eq!(out.values(), &[0.0, 255.0, 128.0]);
        assert_eq!(out.source_depth(), SourceDepth::U8);
    }

    #[test]
    fn depth_conversion_is_monotone_over_every_input() {
        let all: Vec<f64> = (0..=65535u32).map(f64::from).collect();
        let out = convert_16_to_8(&u16_image(all)).unwrap();
        assert!(out.values().windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(out.values()[0], 0.0);
        assert_eq!(out.values()[65535], 255.0);
    }

    #[test]
    fn depth_conversion_requires_u16() {
        let img = Image2D::new(1, 1, vec![3.0], 1.0, SourceDepth::U8).unwrap();
        assert!(matches!(convert_16_to_8(&img), Err(Error::Depth { .. })));
    }

    #[test]
    fn normalize_examples() {
        let img = Image2D::new(3, 1, vec![0.0, 50.0, 200.0], 1.0, SourceDepth::U8).unwrap();
        assert_eq!(normalize_unit(&img).image.values(), &[0.0, 0.25, 1.0]);

        let flat = Image2D::new(2, 2, vec![100.0; 4], 1.0, SourceDepth::U8).unwrap();
        assert_eq!(normalize_unit(&flat).image.values(), &[1.0; 4]);

        let zeros = Image2D::zeros(2, 2, 1.0, SourceDepth::U8).unwrap();
        let n = normalize_unit(&zeros);
        assert!(n.all_zero);
        assert_eq!(n.image.values(), &[0.0; 4]);
    }

    #[test]
    fn reflect_is_half_sample_symmetric() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(values in prop::collection::vec(0.0f64..1e4, 1..64)) {
            let n = values.len();
            let img = Image2D::new(n, 1, values, 1.0, SourceDepth::F32).unwrap();
            let once = normalize_unit(&img).image;
            let twice = normalize_unit(&once).image;
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }
    }
}
