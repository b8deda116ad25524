//! Binary PGM (P5) and raw little-endian `f32` + JSON sidecar formats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Image2D, ImageStack, SourceDepth, DEFAULT_PIXEL_PITCH_NM};
use crate::error::{Error, Result};

/// Sidecar metadata written next to every image (`<name>.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatSidecar {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch_nm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z_index: Option<usize>,
}

/// JSON stack manifest; slice paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackManifest {
    pub z_step_nm: f64,
    pub slices: Vec<String>,
}

fn is_float_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()),
        Some("f32") | Some("json")
    )
}

fn read_sidecar(path: &Path) -> Result<Option<FloatSidecar>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::json(path, e))
}

fn write_sidecar(path: &Path, meta: &FloatSidecar) -> Result<()> {
    let text = serde_json::to_string_pretty(meta).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Loads a P5 PGM (maxval 255 or 65535) or a `.f32` raw-float image.
///
/// Pixel pitch comes from `pitch_override`, else the `<name>.json` sidecar,
/// else [`DEFAULT_PIXEL_PITCH_NM`]. Integer samples are kept as raw counts.
pub fn load_image(path: &Path, pitch_override: Option<f64>) -> Result<Image2D> {
    let sidecar_path = path.with_extension("json");
    let sidecar = read_sidecar(&sidecar_path)?;
    let mut img = if is_float_path(path) {
        let meta = sidecar.clone().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing sidecar {}", sidecar_path.display()),
        })?;
        read_f32(&path.with_extension("f32"), &meta)?
    } else {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut img = parse_pgm(&bytes).map_err(|reason| match reason {
            PgmError::Depth(m) => Error::UnsupportedDepth(m),
            PgmError::Format(reason) => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
        })?;
        if let Some(meta) = &sidecar {
            if meta.width != img.width() || meta.height != img.height() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    reason: format!(
                        "sidecar says {}x{}, file is {}x{}",
                        meta.width,
                        meta.height,
                        img.width(),
                        img.height()
                    ),
                });
            }
            img.set_pixel_pitch_nm(meta.pixel_pitch_nm)?;
        }
        img
    };
    if let Some(p) = pitch_override {
        img.set_pixel_pitch_nm(p)?;
    }
    Ok(img)
}

fn read_f32(path: &Path, meta: &FloatSidecar) -> Result<Image2D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = meta.width * meta.height;
    if bytes.len() != 4 * n {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes for {}x{} floats", bytes.len(), meta.width, meta.height),
        });
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Image2D::new(meta.width, meta.height, values, meta.pixel_pitch_nm, SourceDepth::F32)
}

enum PgmError {
    Format(String),
    Depth(u32),
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<Image2D, PgmError> {
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        // Skip whitespace and comments between header tokens.
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(PgmError::Format("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(PgmError::Format(format!("magic {:?}, expected P5", tokens[0])));
    }
    let parse = |s: &str, what: &str| {
        s.parse::<u32>()
            .map_err(|_| PgmError::Format(format!("bad {what} {s:?}")))
    };
    let width = parse(&tokens[1], "width")? as usize;
    let height = parse(&tokens[2], "height")? as usize;
    let maxval = parse(&tokens[3], "maxval")?;
    let (depth, bytes_per) = match maxval {
        255 => (SourceDepth::U8, 1),
        65535 => (SourceDepth::U16, 2),
        other => return Err(PgmError::Depth(other)),
    };
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() {
        return Err(PgmError::Format("missing raster".into()));
    }
    pos += 1;
    let payload = &bytes[pos..];
    let n = width * height;
    if payload.len() != n * bytes_per {
        return Err(PgmError::Format(format!(
            "{} payload bytes, expected {}",
            payload.len(),
            n * bytes_per
        )));
    }
    let values = if bytes_per == 1 {
        payload.iter().map(|&b| f64::from(b)).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])))
            .collect()
    };
    Image2D::new(width, height, values, DEFAULT_PIXEL_PITCH_NM, depth)
        .map_err(|e| PgmError::Format(e.to_string()))
}

/// Writes `img` at the requested depth.
///
/// U8/U16 go to a P5 PGM at `path`; F32 goes to `<path>.f32`. Both write a
/// `<path>.json` sidecar carrying the calibration. Integer depths round
/// half away from zero and refuse values outside `[0, maxval]`.
pub fn save_image(img: &Image2D, path: &Path, depth: SourceDepth) -> Result<()> {
    save_image_indexed(img, path, depth, None)
}

pub(crate) fn save_image_indexed(
    img: &Image2D,
    path: &Path,
    depth: SourceDepth,
    z_index: Option<usize>,
) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let meta = FloatSidecar {
        width: img.width(),
        height: img.height(),
        pixel_pitch_nm: img.pixel_pitch_nm(),
        z_index,
    };
    match depth {
        SourceDepth::F32 => {
            let mut buf = Vec::with_capacity(4 * img.len());
            for &v in img.values() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let data_path = path.with_extension("f32");
            fs::write(&data_path, buf).map_err(|e| Error::io(&data_path, e))?;
        }
        SourceDepth::U8 | SourceDepth::U16 => {
            let maxval = depth.max_value().expect("integer depth");
            let mut buf = format!("P5\n{} {}\n{}\n", img.width(), img.height(), maxval as u32).into_bytes();
            for (index, &v) in img.values().iter().enumerate() {
                let r = v.round();
                if !(0.0..=maxval).contains(&r) {
                    return Err(Error::Range {
                        value: v,
                        index,
                        depth: depth.name(),
                    });
                }
                if depth == SourceDepth::U8 {
                    buf.push(r as u8);
                } else {
                    buf.extend_from_slice(&(r as u16).to_be_bytes());
                }
            }
            fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        }
    }
    write_sidecar(&path.with_extension("json"), &meta)
}

/// Writes each slice as a raw-float image plus a stack manifest at `manifest_path`.
pub fn save_stack_manifest(stack: &ImageStack, manifest_path: &Path) -> Result<StackManifest> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(stack.len());
    for (z, slice) in stack.slices().iter().enumerate() {
        let name = format!("slice_{z:04}.f32");
        save_image_indexed(slice, &dir.join(&name), SourceDepth::F32, Some(z))?;
        names.push(name);
    }
    let manifest = StackManifest {
        z_step_nm: stack.z_step_nm(),
        slices: names,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(manifest_path, e))?;
    fs::write(manifest_path, text + "\n").map_err(|e| Error::io(manifest_path, e))?;
    Ok(manifest)
}

pub fn load_stack_manifest(manifest_path: &Path) -> Result<ImageStack> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: StackManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(manifest_path, e))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let slices = manifest
        .slices
        .iter()
        .map(|p| load_image(&resolve(dir, p), None))
        .collect::<Result<Vec<_>>>()?;
    ImageStack::new(slices, manifest.z_step_nm)
}

pub(crate) fn resolve(dir: &Path, p: &str) -> PathBuf {
    let candidate = Path::new(p);
    if candidate.is_absolute() {
        candidate.to_path_buf()
    } else {
        dir.join(candidate)
    }
}
