//! Tiled training pairs on disk.
//!
//! Layout of `<out_dir>/manifest.json`:
//!
//! ```json
//! {
//!   "tile_size": 64,
//!   "split": "train",
//!   "counts": { "images": 2, "pairs": 8, "background_only": 1, "degenerate_weights": 1 },
//!   "pairs": [
//!     { "original": "orig_0000.f32", "label": "label_0000.pgm", "weight": "weight_0000.f32" }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the manifest's directory. Originals and weights are
//! raw little-endian `f32` with a JSON sidecar; labels are 8-bit PGM.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::weights::{compute_weight_map, WeightParams};
use crate::error::{Error, Result};
use crate::imgcore::resolve;
use crate::imgcore::{load_image, normalize_unit, save_image, split_tiles, Image2D, Plane, SourceDepth};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub original: Image2D,
    pub label: Image2D,
    pub weight: Plane,
}

impl DatasetPair {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.original.width(), self.original.height());
        if self.label.width() != w || self.label.height() != h || self.weight.width != w || self.weight.height != h {
            return Err(Error::Pairing(format!(
                "original {}x{}, label {}x{}, weight {}x{}",
                w,
                h,
                self.label.width(),
                self.label.height(),
                self.weight.width,
                self.weight.height
            )));
        }
        if self.label.values().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Pairing("label tile is not binary".into()));
        }
        if self.weight.data.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Pairing("weight map has non-positive entries".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPaths {
    pub original: String,
    pub label: String,
    pub weight: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub images: usize,
    pub pairs: usize,
    /// Tiles whose label holds no foreground (kept in the set).
    pub background_only: usize,
    pub degenerate_weights: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tile_size: usize,
    pub split: Split,
    pub counts: DatasetCounts,
    pub pairs: Vec<PairPaths>,
    /// Directory the relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load_pair(&self, index: usize) -> Result<DatasetPair> {
        let paths = self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Index(format!("pair {index} of {}", self.pairs.len())))?;
        let original = load_image(&resolve(&self.base_dir, &paths.original), None)?;
        let label = load_image(&resolve(&self.base_dir, &paths.label), None)?;
        let weight = load_image(&resolve(&self.base_dir, &paths.weight), None)?.to_plane();
        let pair = DatasetPair {
            original,
            label,
            weight,
        };
        pair.validate()?;
        Ok(pair)
    }
}

/// Tiles every (original, label) pair, attaches weight maps and writes the set to `out_dir`.
///
/// Each original is scaled to `[0, 1]` by its own maximum before tiling.
pub fn build_dataset(
    originals: &[Image2D],
    labels: &[Image2D],
    tile_size: usize,
    params: &WeightParams,
    split: Split,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if originals.len() != labels.len() {
        return Err(Error::Pairing(format!(
            "{} originals but {} labels",
            originals.len(),
            labels.len()
        )));
    }
    for (i, (o, l)) in originals.iter().zip(labels).enumerate() {
        if !o.same_shape(l) {
            return Err(Error::Pairing(format!(
                "pair {i}: original {}x{} vs label {}x{}",
                o.width(),
                o.height(),
                l.width(),
                l.height()
            )));
        }
        if l.values().iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::Pairing(format!("pair {i}: label is not binary")));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut tiles = Vec::new();
    for (o, l) in originals.iter().zip(labels) {
        let (ot, _) = split_tiles(&normalize_unit(o).image, tile_size)?;
        let (lt, _) = split_tiles(l, tile_size)?;
        tiles.extend(ot.into_iter().zip(lt));
    }
    let written = tiles
        .par_iter()
        .enumerate()
        .map(|(i, (orig, label))| {
            let wm = compute_weight_map(label, params)?;
            let paths = PairPaths {
                original: format!("orig_{i:04}.f32"),
                label: format!("label_{i:04}.pgm"),
                weight: format!("weight_{i:04}.f32"),
            };
            save_image(orig, &out_dir.join(&paths.original), SourceDepth::F32)?;
            save_image(label, &out_dir.join(&paths.label), SourceDepth::U8)?;
            let weight = Image2D::new(
                label.width(),
                label.height(),
                wm.weights.data,
                label.pixel_pitch_nm(),
                SourceDepth::F32,
            )?;
            save_image(&weight, &out_dir.join(&paths.weight), SourceDepth::F32)?;
            let background_only = label.max() == 0.0;
            Ok((paths, background_only, wm.degenerate))
        })
        .collect::<Result<Vec<_>>>()?;

    let counts = DatasetCounts {
        images: originals.len(),
        pairs: written.len(),
        background_only: written.iter().filter(|w| w.1).count(),
        degenerate_weights: written.iter().filter(|w| w.2).count(),
    };
    let manifest = DatasetManifest {
        tile_size,
        split,
        counts,
        pairs: written.into_iter().map(|w| w.0).collect(),
        base_dir: out_dir.to_path_buf(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a manifest and checks that every referenced file exists.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    manifest.base_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    for p in &manifest.pairs {
        for f in [&p.original, &p.label, &p.weight] {
            let full = resolve(&manifest.base_dir, f);
            if !full.exists() {
                return Err(Error::Io {
                    path: full,
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "listed in dataset manifest"),
                });
            }
        }
    }
    Ok(manifest)
}

/// Loads and validates every pair of a manifest.
pub fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<DatasetPair>> {
    (0..manifest.len()).map(|i| manifest.load_pair(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stripes(w: usize, h: usize) -> (Image2D, Image2D) {
        let orig = Image2D::from_fn(w, h, 62.5, SourceDepth::U16, |r, c| ((r * 7 + c * 3) % 50) as f64 * 10.0).unwrap();
        let label = Image2D::from_fn(w, h, 62.5, SourceDepth::U8, |_, c| if c % 9 == 0 { 1.0 } else { 0.0 }).unwrap();
        (orig, label)
    }

    #[test]
    fn empty_input_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&[], &[], 64, &WeightParams::default(), Split::Train, dir.path()).unwrap();
        assert!(m.is_empty());
        let back = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (o, _) = stripes(32, 32);
        let (_, l) = stripes(32, 16);
        let err = build_dataset(&[o], &[l], 16, &WeightParams::default(), Split::Train, dir.path());
        assert!(matches!(err, Err(Error::Pairing(_))));
    }

    #[test]
    fn pair_roundtrip_and_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let (o, l) = stripes(48, 32);
        let m = build_dataset(&[o], &[l.clone()], 16, &WeightParams::default(), Split::Test, dir.path()).unwrap();
        assert_eq!(m.len(), 6);
        let back = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.split, Split::Test);
        let pairs = load_pairs(&back).unwrap();
        let max = pairs.iter().map(|p| p.original.max()).fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-7);
        assert_eq!(pairs[1].label.values(), split_tiles(&l, 16).unwrap().0[1].values());
    }
}
