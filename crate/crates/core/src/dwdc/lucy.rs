use crate::error::{Error, Result};
use crate::imgcore::{Image2D, Plane};
use crate::synthlab::{convolve_plane, correlate_plane, Boundary, Psf};

#[derive(Debug, Clone, PartialEq)]
pub struct LrSpec {
    pub psf: Psf,
    pub iterations: usize,
    /// Floor applied to the re-blurred estimate before dividing.
    pub epsilon: f64,
}

impl LrSpec {
    pub fn new(psf: Psf, iterations: usize, epsilon: f64) -> Result<Self> {
        let spec = LrSpec {
            psf,
            iterations,
            epsilon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Parameter("Lucy-Richardson needs at least one iteration".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Parameter(format!(
                "Lucy-Richardson epsilon {} outside (0, 1e-3]",
                self.epsilon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrOutcome {
    pub image: Image2D,
    /// Set when the observation carried no signal; the result is all zeros.
    pub zero_input: bool,
}

/// Poisson log-likelihood `sum(d ln(u*p) - u*p)` of `estimate` given `observed`
/// (constant terms dropped; zero-count pixels contribute `-u*p`).
pub fn poisson_log_likelihood(observed: &Plane, estimate: &Plane, psf: &Psf) -> Result<f64> {
    let blurred = convolve_plane(estimate, psf, Boundary::Reflect)?;
    Ok(observed
        .data
        .iter()
        .zip(&blurred.data)
        .map(|(&d, &b)| if d > 0.0 { d * b.ln() - b } else { -b })
        .sum())
}

/// Richardson-Lucy deconvolution starting from the observation itself.
pub fn lucy_richardson(observed: &Image2D, spec: &LrSpec) -> Result<LrOutcome> {
    lucy_richardson_inspect(observed, spec, |_, _| {})
}

/// As [`lucy_richardson`], calling `on_iteration(k, estimate)` after every update.
pub fn lucy_richardson_inspect(
    observed: &Image2D,
    spec: &LrSpec,
    mut on_iteration: impl FnMut(usize, &Plane),
) -> Result<LrOutcome> {
    spec.validate()?;
    if observed.max() <= 0.0 {
        return Ok(LrOutcome {
            image: observed.clone(),
            zero_input: true,
        });
    }
    let data = observed.to_plane();
    let mut estimate = data.clone();
    let mut ratio = Plane::zeros(data.width, data.height);
    for k in 1..=spec.iterations {
        let blurred = convolve_plane(&estimate, &spec.psf, Boundary::Reflect)?;
        for ((r, &d), &b) in ratio.data.iter_mut().zip(&data.data).zip(&blurred.data) {
            *r = if d > 0.0 { d / b.max(spec.epsilon) } else { 0.0 };
        }
        let correction = correlate_plane(&ratio, &spec.psf, Boundary::Reflect)?;
        for (u, c) in estimate.data.iter_mut().zip(&correction.data) {
            *u = (*u * c).max(0.0);
        }
        on_iteration(k, &estimate);
    }
    Ok(LrOutcome {
        image: Image2D::from_plane_clamped(estimate, observed.pixel_pitch_nm(), observed.source_depth())?,
        zero_input: false,
    })
}
