//! Synthetic filament phantoms and the forward degradation model
//! `observed = clamp(latent ⊛ psf + noise)`.

mod phantom;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{reflect_index, Image2D, Plane};

pub use phantom::{generate_phantom, phantom_filaments, render_filaments, Filament, PhantomSpec};

/// Normalized 2D point-spread kernel with odd side lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct Psf {
    width: usize,
    height: usize,
    kernel: Vec<f64>,
    sigma_px: Option<f64>,
}

impl Psf {
    /// Wraps an arbitrary non-negative kernel, rescaling it to unit sum.
    pub fn from_kernel(width: usize, height: usize, kernel: Vec<f64>) -> Result<Self> {
        if width % 2 == 0 || height % 2 == 0 {
            return Err(Error::Parameter(format!("PSF sides must be odd, got {width}x{height}")));
        }
        if kernel.len() != width * height {
            return Err(Error::Parameter(format!(
                "{} kernel entries for {width}x{height}",
                kernel.len()
            )));
        }
        if kernel.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Parameter("PSF entries must be finite and non-negative".into()));
        }
        let sum: f64 = kernel.iter().sum();
        if sum <= 0.0 {
            return Err(Error::Parameter("PSF has zero mass".into()));
        }
        Ok(Psf {
            width,
            height,
            kernel: kernel.into_iter().map(|v| v / sum).collect(),
            sigma_px: None,
        })
    }

    pub fn delta() -> Self {
        Psf {
            width: 1,
            height: 1,
            kernel: vec![1.0],
            sigma_px: None,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    pub fn sigma_px(&self) -> Option<f64> {
        self.sigma_px
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.kernel[row * self.width + col]
    }

    /// The kernel rotated by 180 degrees.
    pub fn flipped(&self) -> Psf {
        let mut kernel = self.kernel.clone();
        kernel.reverse();
        Psf {
            kernel,
            ..self.clone()
        }
    }
}

/// Sampled isotropic Gaussian on a `(2r+1)^2` support, normalized to unit sum.
pub fn gaussian_psf(sigma_px: f64, radius_px: usize) -> Result<Psf> {
    if !(sigma_px.is_finite() && sigma_px > 0.0) {
        return Err(Error::Parameter(format!("PSF sigma must be positive, got {sigma_px}")));
    }
    if radius_px == 0 {
        return Err(Error::Parameter("PSF radius must be at least 1".into()));
    }
    let side = 2 * radius_px + 1;
    let r = radius_px as f64;
    let two_s2 = 2.0 * sigma_px * sigma_px;
    let mut kernel = Vec::with_capacity(side * side);
    for i in 0..side {
        let y = i as f64 - r;
        for j in 0..side {
            let x = j as f64 - r;
            kernel.push((-(x * x + y * y) / two_s2).exp());
        }
    }
    let mut psf = Psf::from_kernel(side, side, kernel)?;
    psf.sigma_px = Some(sigma_px);
    Ok(psf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Boundary {
    #[default]
    Reflect,
    Zero,
}

/// True 2D convolution (kernel flipped) on a plane; output has the input's size.
pub fn convolve_plane(src: &Plane, psf: &Psf, boundary: Boundary) -> Result<Plane> {
    if psf.width() > src.width || psf.height() > src.height {
        return Err(Error::Size(format!(
            "{}x{} PSF is larger than the {}x{} image",
            psf.width(),
            psf.height(),
            src.width,
            src.height
        )));
    }
    let (kw, kh) = (psf.width(), psf.height());
    let (cx, cy) = (kw / 2, kh / 2);
    let pw = src.width + kw - 1;
    let ph = src.height + kh - 1;
    let mut padded = vec![0.0; pw * ph];
    for py in 0..ph {
        let sy = py as isize - cy as isize;
        let row = match boundary {
            Boundary::Reflect => Some(reflect_index(sy, src.height)),
            Boundary::Zero => (0..src.height as isize).contains(&sy).then_some(sy as usize),
        };
        let Some(row) = row else { continue };
        let src_row = src.row(row);
        for px in 0..pw {
            let sx = px as isize - cx as isize;
            padded[py * pw + px] = match boundary {
                Boundary::Reflect => src_row[reflect_index(sx, src.width)],
                Boundary::Zero => {
                    if (0..src.width as isize).contains(&sx) {
                        src_row[sx as usize]
                    } else {
                        0.0
                    }
                }
            };
        }
    }
    let width = src.width;
    let mut out = Plane::zeros(src.width, src.height);
    out.data.par_chunks_mut(width).enumerate().for_each(|(y, out_row)| {
        for i in 0..kh {
            let prow = &padded[(y + i) * pw..(y + i + 1) * pw];
            for j in 0..kw {
                let k = psf.get(kh - 1 - i, kw - 1 - j);
                if k == 0.0 {
                    continue;
                }
                for (o, p) in out_row.iter_mut().zip(&prow[j..j + width]) {
                    *o += k * p;
                }
            }
        }
    });
    Ok(out)
}

/// Correlation with `psf`, i.e. convolution with the 180-degree rotated kernel.
pub fn correlate_plane(src: &Plane, psf: &Psf, boundary: Boundary) -> Result<Plane> {
    convolve_plane(src, &psf.flipped(), boundary)
}

pub fn convolve2d(img: &Image2D, psf: &Psf, boundary: Boundary) -> Result<Image2D> {
    let out = convolve_plane(&img.to_plane(), psf, boundary)?;
    // Non-negative kernel on non-negative data; clamp only rounding dust.
    Image2D::from_plane_clamped(out, img.pixel_pitch_nm(), img.source_depth())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseKind {
    Gaussian,
    Poisson,
    None,
}

/// Parameters of the forward model. `noise_param` is the standard deviation for
/// Gaussian noise and the photon scale (intensity per count) for Poisson noise.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationSpec {
    pub psf: Psf,
    pub noise_kind: NoiseKind,
    pub noise_param: f64,
    pub seed: u64,
}

/// Blurs `latent`, adds seeded noise, and clamps to non-negative.
pub fn degrade(latent: &Image2D, spec: &DegradationSpec) -> Result<Image2D> {
    if !(spec.noise_param.is_finite() && spec.noise_param >= 0.0) {
        return Err(Error::Parameter(format!(
            "noise parameter must be non-negative, got {}",
            spec.noise_param
        )));
    }
    let blurred = convolve_plane(&latent.to_plane(), &spec.psf, Boundary::Reflect)?;
    let mut values = blurred.data;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    match spec.noise_kind {
        NoiseKind::None => {}
        _ if spec.noise_param == 0.0 => {}
        NoiseKind::Gaussian => {
            let normal = Normal::new(0.0, spec.noise_param)
                .map_err(|e| Error::Parameter(format!("gaussian noise: {e}")))?;
            for v in &mut values {
                *v += normal.sample(&mut rng);
            }
        }
        NoiseKind::Poisson => {
            let scale = spec.noise_param;
            for v in &mut values {
                let lambda = *v / scale;
                *v = if lambda > 0.0 {
                    let dist = Poisson::new(lambda)
                        .map_err(|e| Error::Parameter(format!("poisson noise: {e}")))?;
                    dist.sample(&mut rng) * scale
                } else {
                    0.0
                };
            }
        }
    }
    for v in &mut values {
        *v = v.max(0.0);
    }
    latent.with_values(values)
}
