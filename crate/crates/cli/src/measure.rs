//! Per-filament cross-section widths on held-out phantoms.
//!
//! Each filament is cut once, at a sampled point whose tangent is closest to
//! an image axis, by a short profile along the other axis. The same cut is
//! applied to every image being compared.

use serde::{Deserialize, Serialize};

use filament_core::imgcore::Image2D;
use filament_core::postmetrics::{fwhm, LineProfile};
use filament_core::synthlab::Filament;

/// Preferred clearance between the cut and any other filament, pixels.
pub const ISOLATION_PX: f64 = 6.0;
const SAMPLES: usize = 41;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// Profile runs along a row.
    Row,
    /// Profile runs along a column.
    Column,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub axis: Axis,
    pub row: usize,
    pub col: usize,
    /// First and last pixel index along the profile axis.
    pub start: usize,
    pub end: usize,
    /// A peak further than this from the centre belongs to something else.
    pub tolerance: usize,
}

impl Cut {
    fn centre(&self) -> usize {
        match self.axis {
            Axis::Row => self.col,
            Axis::Column => self.row,
        }
    }

    pub fn profile(&self, img: &Image2D) -> LineProfile {
        let pitch = img.pixel_pitch_nm();
        let idx = self.start..=self.end;
        let intensities = match self.axis {
            Axis::Row => idx.clone().map(|c| img.get(self.row, c)).collect(),
            Axis::Column => idx.clone().map(|r| img.get(r, self.col)).collect(),
        };
        LineProfile {
            positions_nm: idx.map(|i| i as f64 * pitch).collect(),
            intensities,
        }
    }

    /// FWHM in nanometres, or `None` when no peak sits near the cut centre.
    pub fn width_nm(&self, img: &Image2D) -> Option<f64> {
        let m = fwhm(&self.profile(img)).ok()?;
        let peak = self.start + m.peak_index;
        (peak.abs_diff(self.centre()) <= self.tolerance).then_some(m.width_nm)
    }
}

/// Cuts across filament `index` of `all` at evenly spaced curve samples that
/// lie inside the image with room for `half_window` pixels either side. When
/// some samples are at least [`ISOLATION_PX`] from every other filament, only
/// those are kept. Peaks must fall within a third of the half window.
pub fn filament_cuts(all: &[Filament], index: usize, width: usize, height: usize, half_window: usize) -> Vec<Cut> {
    let f = &all[index];
    let mut cuts: Vec<(bool, Cut)> = Vec::new();
    for k in 0..SAMPLES {
        let t = k as f64 / (SAMPLES - 1) as f64;
        let p = f.point(t);
        let (col, row) = (p[0].round(), p[1].round());
        if col < 0.0 || row < 0.0 || col >= width as f64 || row >= height as f64 {
            continue;
        }
        let (col, row) = (col as usize, row as usize);
        let tan = f.tangent(t);
        if tan[0] == 0.0 && tan[1] == 0.0 {
            continue;
        }
        let (axis, centre, len) = if tan[1].abs() >= tan[0].abs() {
            (Axis::Row, col, width)
        } else {
            (Axis::Column, row, height)
        };
        if centre < half_window || centre + half_window >= len {
            continue;
        }
        let cut = Cut {
            axis,
            row,
            col,
            start: centre - half_window,
            end: centre + half_window,
            tolerance: half_window / 3,
        };
        if cuts.iter().any(|(_, c)| *c == cut) {
            continue;
        }
        let isolated = all
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != index)
            .all(|(_, g)| g.distance_to([col as f64, row as f64]) >= ISOLATION_PX);
        cuts.push((isolated, cut));
    }
    let any_isolated = cuts.iter().any(|(iso, _)| *iso);
    cuts.into_iter()
        .filter(|(iso, _)| *iso || !any_isolated)
        .map(|(_, c)| c)
        .collect()
}

/// Median FWHM over the measurable cuts, or `None` if no cut has a peak.
pub fn filament_width_nm(cuts: &[Cut], img: &Image2D) -> Option<f64> {
    let widths: Vec<f64> = cuts.iter().filter_map(|c| c.width_nm(img)).collect();
    median(&widths)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use filament_core::imgcore::SourceDepth;
    use filament_core::synthlab::render_filaments;

    fn vertical() -> Filament {
        Filament {
            p0: [20.0, 2.0],
            p1: [20.0, 16.0],
            p2: [20.0, 30.0],
        }
    }

    #[test]
    fn vertical_filament_gets_row_cut() {
        let cuts = filament_cuts(&[vertical()], 0, 40, 32, 6);
        assert!(!cuts.is_empty());
        for cut in cuts {
            assert_eq!(cut.axis, Axis::Row);
            assert_eq!(cut.col, 20);
            assert_eq!((cut.start, cut.end), (14, 26));
        }
    }

    #[test]
    fn rendered_gaussian_width() {
        let img = render_filaments(40, 32, &[vertical()], 4.0, 1.0, 1.0).unwrap();
        let cuts = filament_cuts(&[vertical()], 0, 40, 32, 6);
        let w = filament_width_nm(&cuts, &img).unwrap();
        assert!((w - 4.0).abs() < 0.15, "{w}");
    }

    #[test]
    fn single_pixel_line_is_one_pixel_wide() {
        let img = Image2D::from_fn(40, 32, 1.0, SourceDepth::F32, |_, c| if c == 20 { 1.0 } else { 0.0 }).unwrap();
        let cuts = filament_cuts(&[vertical()], 0, 40, 32, 6);
        assert_eq!(filament_width_nm(&cuts, &img), Some(1.0));
    }

    #[test]
    fn off_centre_peak_is_rejected() {
        let img = Image2D::from_fn(40, 32, 1.0, SourceDepth::F32, |_, c| if c == 25 { 1.0 } else { 0.0 }).unwrap();
        let cuts = filament_cuts(&[vertical()], 0, 40, 32, 6);
        assert_eq!(filament_width_nm(&cuts, &img), None);
    }

    #[test]
    fn outside_filament_has_no_cut() {
        let f = Filament {
            p0: [-20.0, -5.0],
            p1: [-10.0, -5.0],
            p2: [-1.0, -5.0],
        };
        assert!(filament_cuts(&[f], 0, 32, 32, 6).is_empty());
    }

    #[test]
    fn crowded_samples_are_dropped_when_isolated_ones_exist() {
        let other = Filament {
            p0: [24.0, 2.0],
            p1: [24.0, 6.0],
            p2: [24.0, 10.0],
        };
        let cuts = filament_cuts(&[vertical(), other], 0, 40, 32, 6);
        assert!(!cuts.is_empty());
        assert!(cuts.iter().all(|c| other.distance_to([c.col as f64, c.row as f64]) >= ISOLATION_PX));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
