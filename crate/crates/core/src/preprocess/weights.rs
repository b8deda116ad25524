//! Boundary-emphasizing per-pixel loss weights.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::imgcore::{Image2D, Plane};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WeightParams {
    pub w0: f64,
    pub sigma_px: f64,
}

impl Default for WeightParams {
    fn default() -> Self {
        WeightParams { w0: 10.0, sigma_px: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub weights: Plane,
    /// One of the two classes was absent; its frequency was floored at one pixel.
    pub degenerate: bool,
}

/// 8-connected foreground components; returns per-pixel labels (0 = background) and the count.
pub fn connected_components(label: &Image2D) -> (Vec<usize>, usize) {
    let (w, h) = (label.width(), label.height());
    let mut ids = vec![0usize; w * h];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if label.values()[start] <= 0.5 || ids[start] != 0 {
            continue;
        }
        count += 1;
        ids[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if ids[q] == 0 && label.values()[q] > 0.5 {
                        ids[q] = count;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    (ids, count)
}

/// Exact 1D squared distance transform (lower envelope of parabolas).
/// Infinite entries are not sites and never enter the envelope.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let parabola = |q: usize| f[q] + (q * q) as f64;
    let mut k = 0usize;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = (parabola(q) - parabola(p)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site.
pub fn squared_distance_transform(sites: &[bool], width: usize, height: usize) -> Vec<f64> {
    let n = width.max(height);
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut grid: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        f[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// `w(x) = w_c(x) + w0 exp(-(d1 + d2)^2 / (2 sigma^2))`.
///
/// `w_c` is the inverse class frequency `N / (2 N_class)`; `d1`/`d2` are the
/// distances to the nearest and second-nearest foreground component
/// (`d2 = d1` with a single component, no boundary term with none).
pub fn compute_weight_map(label: &Image2D, params: &WeightParams) -> Result<WeightMap> {
    if !(params.w0 >= 0.0 && params.w0.is_finite()) {
        return Err(Error::Parameter(format!("weight w0 {} must be non-negative", params.w0)));
    }
    if !(params.sigma_px > 0.0 && params.sigma_px.is_finite()) {
        return Err(Error::Parameter(format!("weight sigma {} must be positive", params.sigma_px)));
    }
    if let Some(v) = label.values().iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Parameter(format!("label is not binary (found {v})")));
    }
    let (w, h) = (label.width(), label.height());
    let n = (w * h) as f64;
    let n_fg = label.values().iter().filter(|v| **v == 1.0).count();
    let n_bg = w * h - n_fg;
    let degenerate = n_fg == 0 || n_bg == 0;
    let w_fg = n / (2.0 * n_fg.max(1) as f64);
    let w_bg = n / (2.0 * n_bg.max(1) as f64);

    let (ids, count) = connected_components(label);
    let mut d1 = vec![f64::INFINITY; w * h];
    let mut d2 = vec![f64::INFINITY; w * h];
    let mut sites = vec![false; w * h];
    for comp in 1..=count {
        for (s, &id) in sites.iter_mut().zip(&ids) {
            *s = id == comp;
        }
        let dist = squared_distance_transform(&sites, w, h);
        for ((a, b), d) in d1.iter_mut().zip(d2.iter_mut()).zip(dist) {
            let d = d.sqrt();
            if d < *a {
                *b = *a;
                *a = d;
            } else if d < *b {
                *b = d;
            }
        }
    }
    if count == 1 {
        d2.copy_from_slice(&d1);
    }
    let two_s2 = 2.0 * params.sigma_px * params.sigma_px;
    let data = label
        .values()
        .iter()
        .zip(d1.iter().zip(&d2))
        .map(|(&l, (&a, &b))| {
            let wc = if l == 1.0 { w_fg } else { w_bg };
            let boundary = if count == 0 {
                0.0
            } else {
                params.w0 * (-(a + b).powi(2) / two_s2).exp()
            };
            wc + boundary
        })
        .collect();
    Ok(WeightMap {
        weights: Plane::from_vec(w, h, data)?,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgcore::SourceDepth;
    use proptest::prelude::*;

    fn brute_sq_dt(sites: &[bool], w: usize, h: usize) -> Vec<f64> {
        (0..w * h)
            .map(|p| {
                let (r, c) = ((p / w) as f64, (p % w) as f64);
                sites
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| **s)
                    .map(|(q, _)| {
                        let (qr, qc) = ((q / w) as f64, (q % w) as f64);
                        (r - qr).powi(2) + (c - qc).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn label_from(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> Image2D {
        Image2D::from_fn(w, h, 62.5, SourceDepth::U8, |r, c| if f(r, c) { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn balanced_label_has_unit_class_weights() {
        let label = label_from(8, 8, |r, _| r < 4);
        let wm = compute_weight_map(&label, &WeightParams { w0: 0.0, sigma_px: 5.0 }).unwrap();
        assert!(wm.weights.data.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        assert!(!wm.degenerate);
    }

    #[test]
    fn far_pixels_get_class_weight_only() {
        let label = label_from(80, 80, |r, c| r == 2 && c == 2);
        let wm = compute_weight_map(&label, &WeightParams::default()).unwrap();
        let wc_bg = 6400.0 / (2.0 * 6399.0);
        // (d1 + d2) = 2 * 100 px >> sigma
        assert!((wm.weights.get(72, 72) - wc_bg).abs() <= 1e-9);
    }

    #[test]
    fn gap_between_close_lines_is_emphasized() {
        // Two vertical 1-px lines four pixels apart.
        let label = label_from(64, 64, |_, c| c == 10 || c == 14);
        let wm = compute_weight_map(&label, &WeightParams::default()).unwrap();
        let gap = wm.weights.get(30, 12);
        let far = wm.weights.get(30, 34);
        assert!(gap > far, "{gap} vs {far}");
    }

    #[test]
    fn degenerate_labels_are_flagged() {
        let empty = label_from(8, 8, |_, _| false);
        let wm = compute_weight_map(&empty, &WeightParams::default()).unwrap();
        assert!(wm.degenerate);
        assert!(wm.weights.data.iter().all(|v| v.is_finite() && *v > 0.0));
        let full = label_from(8, 8, |_, _| true);
        assert!(compute_weight_map(&full, &WeightParams::default()).unwrap().degenerate);
    }

    #[test]
    fn rejects_non_binary_labels() {
        let img = Image2D::new(2, 1, vec![0.0, 0.5], 1.0, SourceDepth::F32).unwrap();
        assert!(compute_weight_map(&img, &WeightParams::default()).is_err());
    }

    #[test]
    fn translation_equivariance_in_interior() {
        let a = label_from(48, 48, |r, c| (r == 20 && (10..30).contains(&c)) || (c == 25 && (24..40).contains(&r)));
        let b = label_from(48, 48, |r, c| {
            let (r, c) = (r as isize - 3, c as isize - 2);
            (r == 20 && (10..30).contains(&c)) || (c == 25 && (24..40).contains(&r))
        });
        let wa = compute_weight_map(&a, &WeightParams::default()).unwrap();
        let wb = compute_weight_map(&b, &WeightParams::default()).unwrap();
        for r in 10..40 {
            for c in 10..40 {
                assert!((wa.weights.get(r, c) - wb.weights.get(r + 3, c + 2)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn distance_transform_matches_brute_force(
            w in 1usize..20, h in 1usize..20, bits in prop::collection::vec(prop::bool::weighted(0.1), 400),
        ) {
            let sites: Vec<bool> = bits[..w * h].to_vec();
            let fast = squared_distance_transform(&sites, w, h);
            let slow = brute_sq_dt(&sites, w, h);
            for (a, b) in fast.iter().zip(&slow) {
                prop_assert!(a == b || (a - b).abs() < 1e-9, "{} vs {}", a, b);
            }
        }
    }
}
