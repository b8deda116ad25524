use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{Image2D, SourceDepth};

/// Random microtubule-like scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub n_filaments: usize,
    /// FWHM of the Gaussian cross-section, pixels.
    pub thickness_px: f64,
    pub intensity: f64,
    /// Bend of the middle control point relative to the chord length.
    pub curvature: f64,
    pub seed: u64,
    #[serde(default = "default_pitch")]
    pub pixel_pitch_nm: f64,
}

fn default_pitch() -> f64 {
    62.5
}

/// Quadratic Bézier segment in pixel coordinates, points as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Filament {
    pub p0: [f64; 2],
    pub p1: [f64; 2],
    pub p2: [f64; 2],
}

impl Filament {
    pub fn point(&self, t: f64) -> [f64; 2] {
        let u = 1.0 - t;
        let a = u * u;
        let b = 2.0 * u * t;
        let c = t * t;
        [
            a * self.p0[0] + b * self.p1[0] + c * self.p2[0],
            a * self.p0[1] + b * self.p1[1] + c * self.p2[1],
        ]
    }

    pub fn tangent(&self, t: f64) -> [f64; 2] {
        let u = 1.0 - t;
        [
            2.0 * u * (self.p1[0] - self.p0[0]) + 2.0 * t * (self.p2[0] - self.p1[0]),
            2.0 * u * (self.p1[1] - self.p0[1]) + 2.0 * t * (self.p2[1] - self.p1[1]),
        ]
    }

    /// Dense polyline approximation, about four vertices per pixel of arc.
    pub fn polyline(&self) -> Vec<[f64; 2]> {
        let d01 = dist(self.p0, self.p1);
        let d12 = dist(self.p1, self.p2);
        let n = ((d01 + d12) * 4.0).ceil().max(2.0) as usize;
        (0..=n).map(|i| self.point(i as f64 / n as f64)).collect()
    }

    /// Shortest distance from `p` to the curve (via the polyline).
    pub fn distance_to(&self, p: [f64; 2]) -> f64 {
        self.polyline()
            .windows(2)
            .map(|s| point_segment_distance(p, s[0], s[1]))
            .fold(f64::INFINITY, f64::min)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist(p, [a[0] + t * ab[0], a[1] + t * ab[1]])
}

fn validate(spec: &PhantomSpec) -> Result<()> {
    if spec.width == 0 || spec.height == 0 {
        return Err(Error::Parameter(format!(
            "phantom has zero area ({}x{})",
            spec.width, spec.height
        )));
    }
    if spec.n_filaments == 0 {
        return Err(Error::Parameter("phantom needs at least one filament".into()));
    }
    if !(spec.thickness_px >= 0.5 && spec.thickness_px.is_finite()) {
        return Err(Error::Parameter(format!(
            "filament thickness {} px is below 0.5",
            spec.thickness_px
        )));
    }
    if !(spec.intensity > 0.0 && spec.intensity.is_finite()) {
        return Err(Error::Parameter(format!("intensity {} must be positive", spec.intensity)));
    }
    if !(spec.curvature >= 0.0 && spec.curvature.is_finite()) {
        return Err(Error::Parameter(format!("curvature {} must be non-negative", spec.curvature)));
    }
    if !(spec.pixel_pitch_nm > 0.0 && spec.pixel_pitch_nm.is_finite()) {
        return Err(Error::Parameter(format!("pixel pitch {}", spec.pixel_pitch_nm)));
    }
    Ok(())
}

/// The seeded filament geometry behind [`generate_phantom`].
///
/// Each curve spans half to one times the shorter side in a random direction
/// and bows by up to `curvature` x chord length. All three control points lie
/// within the pixel grid, so the whole curve does.
pub fn phantom_filaments(spec: &PhantomSpec) -> Result<Vec<Filament>> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (xmax, ymax) = ((spec.width - 1) as f64, (spec.height - 1) as f64);
    let short = xmax.min(ymax);
    let inside = |p: [f64; 2]| (0.0..=xmax).contains(&p[0]) && (0.0..=ymax).contains(&p[1]);
    let clamp = |p: [f64; 2]| [p[0].clamp(0.0, xmax), p[1].clamp(0.0, ymax)];
    Ok((0..spec.n_filaments)
        .map(|_| {
            let mut draw = || {
                let p0 = [rng.random_range(0.0..=xmax), rng.random_range(0.0..=ymax)];
                let (s, c) = rng.random_range(0.0..std::f64::consts::TAU).sin_cos();
                let len = rng.random_range(0.5..=1.0) * short;
                (p0, [p0[0] + len * c, p0[1] + len * s], s, c, len)
            };
            let mut pick = draw();
            for _ in 0..1000 {
                if inside(pick.1) {
                    break;
                }
                pick = draw();
            }
            let (p0, p2, s, c, len) = pick;
            let p2 = clamp(p2);
            let bow = spec.curvature * len * rng.random_range(-1.0..=1.0);
            let p1 = clamp([(p0[0] + p2[0]) / 2.0 - s * bow, (p0[1] + p2[1]) / 2.0 + c * bow]);
            Filament { p0, p1, p2 }
        })
        .collect())
}

/// Draws filaments with a Gaussian cross-section of FWHM `thickness_px`.
///
/// Overlapping filaments add. The profile is cut off at five standard
/// deviations, so the background is exactly zero.
pub fn render_filaments(
    width: usize,
    height: usize,
    filaments: &[Filament],
    thickness_px: f64,
    intensity: f64,
    pixel_pitch_nm: f64,
) -> Result<Image2D> {
    let sigma = thickness_px / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
    let cutoff = 5.0 * sigma;
    let mut values = vec![0.0; width * height];
    let mut nearest = vec![f64::INFINITY; width * height];
    for f in filaments {
        nearest.fill(f64::INFINITY);
        for seg in f.polyline().windows(2) {
            let (a, b) = (seg[0], seg[1]);
            let x0 = (a[0].min(b[0]) - cutoff).floor().max(0.0) as usize;
            let y0 = (a[1].min(b[1]) - cutoff).floor().max(0.0) as usize;
            let x1 = (a[0].max(b[0]) + cutoff).ceil().min(width as f64 - 1.0);
            let y1 = (a[1].max(b[1]) + cutoff).ceil().min(height as f64 - 1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let d = point_segment_distance([x as f64, y as f64], a, b);
                    let slot = &mut nearest[y * width + x];
                    if d < *slot {
                        *slot = d;
                    }
                }
            }
        }
        for (v, &d) in values.iter_mut().zip(&nearest) {
            if d <= cutoff {
                *v += intensity * (-(d * d) / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    Image2D::new(width, height, values, pixel_pitch_nm, SourceDepth::F32)
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Image2D> {
    let filaments = phantom_filaments(spec)?;
    render_filaments(
        spec.width,
        spec.height,
        &filaments,
        spec.thickness_px,
        spec.intensity,
        spec.pixel_pitch_nm,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::postmetrics::{fwhm, line_profile};

    fn spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            width: 64,
            height: 48,
            n_filaments: 4,
            thickness_px: 1.5,
            intensity: 1000.0,
            curvature: 0.3,
            seed,
            pixel_pitch_nm: 62.5,
        }
    }

    #[test]
    fn straight_line_cross_section_has_requested_fwhm() {
        let line = Filament {
            p0: [4.0, 20.0],
            p1: [32.0, 20.0],
            p2: [60.0, 20.0],
        };
        let img = render_filaments(64, 40, &[line], 3.0, 1.0, 1.0).unwrap();
        // Vertical cross-profile through column 30: transpose into a row.
        let column: Vec<f64> = (0..40).map(|r| img.get(r, 30)).collect();
        let col_img = Image2D::new(40, 1, column, 1.0, SourceDepth::F32).unwrap();
        let m = fwhm(&line_profile(&col_img, 0, 0..40).unwrap()).unwrap();
        assert!((m.width_nm / 3.0 - 1.0).abs() <= 0.05, "fwhm {}", m.width_nm);
    }

    #[test]
    fn background_is_exactly_zero_and_signal_present() {
        let img = generate_phantom(&spec(1)).unwrap();
        assert!(img.max() > 0.0);
        assert!(img.values().iter().filter(|v| **v == 0.0).count() > img.len() / 2);
        let filaments = phantom_filaments(&spec(1)).unwrap();
        for r in 0..img.height() {
            for c in 0..img.width() {
                let far = filaments
                    .iter()
                    .all(|f| f.distance_to([c as f64, r as f64]) > 3.5);
                if far {
                    assert_eq!(img.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_phantom(&spec(5)).unwrap(), generate_phantom(&spec(5)).unwrap());
        assert_ne!(generate_phantom(&spec(5)).unwrap(), generate_phantom(&spec(6)).unwrap());
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(generate_phantom(&PhantomSpec { width: 0, ..spec(1) }).is_err());
        assert!(generate_phantom(&PhantomSpec { n_filaments: 0, ..spec(1) }).is_err());
        assert!(generate_phantom(&PhantomSpec { thickness_px: 0.4, ..spec(1) }).is_err());
    }

    #[test]
    fn curves_stay_on_the_grid() {
        for seed in 0..50 {
            for f in phantom_filaments(&spec(seed)).unwrap() {
                for p in f.polyline() {
                    assert!((0.0..=63.0).contains(&p[0]) && (0.0..=47.0).contains(&p[1]), "seed {seed}: {p:?}");
                }
            }
        }
    }

    #[test]
    fn every_seed_renders_signal() {
        for seed in 0..50 {
            let s = PhantomSpec { n_filaments: 1, ..spec(seed) };
            assert!(generate_phantom(&s).unwrap().max() > 0.0, "seed {seed}");
        }
    }
}
