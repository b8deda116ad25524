use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::Image2D;

/// Intensities sampled along one image row, positioned in nanometres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineProfile {
    pub positions_nm: Vec<f64>,
    pub intensities: Vec<f64>,
}

impl LineProfile {
    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn pitch_nm(&self) -> Option<f64> {
        (self.len() >= 2).then(|| self.positions_nm[1] - self.positions_nm[0])
    }
}

pub fn line_profile(img: &Image2D, row: usize, cols: Range<usize>) -> Result<LineProfile> {
    if row >= img.height() {
        return Err(Error::Index(format!("row {row} outside image of height {}", img.height())));
    }
    if cols.start >= cols.end || cols.end > img.width() {
        return Err(Error::Index(format!(
            "columns {}..{} outside image of width {}",
            cols.start,
            cols.end,
            img.width()
        )));
    }
    let pitch = img.pixel_pitch_nm();
    Ok(LineProfile {
        positions_nm: cols.clone().map(|c| c as f64 * pitch).collect(),
        intensities: img.row(row)[cols].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FwhmMeasurement {
    pub width_nm: f64,
    pub left_nm: f64,
    pub right_nm: f64,
    pub peak_index: usize,
    /// Another part of the profile rises to the half level outside the measured peak.
    pub multimodal: bool,
}

/// Full width at half maximum of the global peak, above the profile minimum.
pub fn fwhm(profile: &LineProfile) -> Result<FwhmMeasurement> {
    let v = &profile.intensities;
    if v.len() < 3 {
        return Err(Error::NoPeak(format!("profile of {} samples", v.len())));
    }
    let (mut peak, mut top) = (0, v[0]);
    for (i, &x) in v.iter().enumerate() {
        if x > top {
            peak = i;
            top = x;
        }
    }
    let base = v.iter().copied().fold(f64::INFINITY, f64::min);
    if top <= base {
        return Err(Error::NoPeak("flat profile".into()));
    }
    let half = base + (top - base) / 2.0;
    let left = (0..peak)
        .rev()
        .find(|&i| v[i] < half)
        .map(|i| i as f64 + (half - v[i]) / (v[i + 1] - v[i]))
        .ok_or_else(|| Error::NoPeak("no half-maximum crossing left of the peak".into()))?;
    let right = (peak + 1..v.len())
        .find(|&i| v[i] < half)
        .map(|i| i as f64 - (half - v[i]) / (v[i - 1] - v[i]))
        .ok_or_else(|| Error::NoPeak("no half-maximum crossing right of the peak".into()))?;
    let multimodal = v
        .iter()
        .enumerate()
        .any(|(i, &x)| ((i as f64) < left || (i as f64) > right) && x >= half);
    let pitch = profile.pitch_nm().unwrap_or(1.0);
    let origin = profile.positions_nm[0];
    Ok(FwhmMeasurement {
        width_nm: (right - left) * pitch,
        left_nm: origin + left * pitch,
        right_nm: origin + right * pitch,
        peak_index: peak,
        multimodal,
    })
}

/// Writes `position_nm,intensity` rows.
pub fn write_profile_csv(profile: &LineProfile, path: &Path) -> Result<()> {
    let mut out = String::from("position_nm,intensity\n");
    for (p, i) in profile.positions_nm.iter().zip(&profile.intensities) {
        writeln!(out, "{p},{i}").expect("writing to a String");
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::SourceDepth;
    use crate::synthlab::{render_filaments, Filament};
    use proptest::prelude::*;

    fn gaussian_profile(sigma: f64, n: usize, pitch: f64) -> LineProfile {
        let c = (n / 2) as f64 + 0.3;
        LineProfile {
            positions_nm: (0..n).map(|i| i as f64 * pitch).collect(),
            intensities: (0..n).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect(),
        }
    }

    #[test]
    fn constant_image_gives_flat_profile_at_pitch() {
        let img = Image2D::new(10, 3, vec![7.0; 30], 62.5, SourceDepth::U8).unwrap();
        let p = line_profile(&img, 1, 2..9).unwrap();
        assert!(p.intensities.iter().all(|v| *v == 7.0));
        for w in p.positions_nm.windows(2) {
            assert_eq!(w[1] - w[0], 62.5);
        }
        assert!(matches!(fwhm(&p), Err(Error::NoPeak(_))));
        assert!(matches!(line_profile(&img, 3, 0..4), Err(Error::Index(_))));
        assert!(matches!(line_profile(&img, 0, 4..11), Err(Error::Index(_))));
    }

    #[test]
    fn gaussian_fwhm_sigma_ten() {
        let m = fwhm(&gaussian_profile(10.0, 201, 62.5)).unwrap();
        let want = 2.0 * (2.0 * 2f64.ln()).sqrt() * 10.0 * 62.5;
        assert!((m.width_nm / want - 1.0).abs() < 0.02, "{} vs {want}", m.width_nm);
        assert!((m.width_nm - 1471.8).abs() / 1471.8 < 0.02);
        assert!(!m.multimodal);
    }

    #[test]
    fn top_hat_width() {
        let mut v = vec![0.0; 30];
        v[10..17].fill(5.0);
        let p = LineProfile {
            positions_nm: (0..30).map(|i| i as f64).collect(),
            intensities: v,
        };
        assert!((fwhm(&p).unwrap().width_nm - 7.0).abs() <= 1.0);
    }

    #[test]
    fn second_peak_is_flagged() {
        let mut p = gaussian_profile(2.0, 60, 1.0);
        p.intensities[5] = 0.9;
        let m = fwhm(&p).unwrap();
        assert!(m.multimodal);
        assert!((m.width_nm - 2.3548 * 2.0).abs() < 0.2);
    }

    #[test]
    fn truncated_peak_has_no_crossing() {
        let p = LineProfile {
            positions_nm: vec![0.0, 1.0, 2.0, 3.0],
            intensities: vec![4.0, 3.0, 2.0, 1.0],
        };
        assert!(matches!(fwhm(&p), Err(Error::NoPeak(_))));
    }

    #[test]
    fn rendered_ridge_follows_analytic_cross_section() {
        let f = Filament {
            p0: [20.3, 1.0],
            p1: [20.3, 20.0],
            p2: [20.3, 39.0],
        };
        let thickness = 6.0;
        let img = render_filaments(40, 40, &[f], thickness, 100.0, 62.5).unwrap();
        let p = line_profile(&img, 20, 0..40).unwrap();
        let sigma = thickness / (2.0 * (2.0 * 2f64.ln()).sqrt());
        for (c, v) in p.intensities.iter().enumerate() {
            let want = 100.0 * (-((c as f64 - 20.3).powi(2)) / (2.0 * sigma * sigma)).exp();
            assert!((v - want).abs() <= 0.01 * 100.0, "col {c}: {v} vs {want}");
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let p = gaussian_profile(3.0, 5, 62.5);
        write_profile_csv(&p, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "position_nm,intensity");
        assert_eq!(lines.len(), 6);
        assert!(lines[2].starts_with("62.5,"));
    }

    proptest! {
        #[test]
        fn gaussian_fwhm_within_two_percent(sigma in 2.0f64..20.0) {
            let m = fwhm(&gaussian_profile(sigma, 241, 62.5)).unwrap();
            let want = 2.0 * (2.0 * 2f64.ln()).sqrt() * sigma * 62.5;
            prop_assert!((m.width_nm / want - 1.0).abs() < 0.02);
        }
    }
}
