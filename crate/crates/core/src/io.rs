//! File formats: the binary grid container, its text sidecar, 16-bit PGM
//! previews and atomic writes.
//!
//! Grid layout (little-endian):
//!
//! ```text
//! offset 0   8 bytes  magic "LACTGRID"
//! offset 8   u16      format version (1)
//! offset 10  u32      rows
//! offset 14  u32      cols
//! offset 18  f32[rows*cols], row-major
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Image, Sinogram};

pub const GRID_MAGIC: &[u8; 8] = b"LACTGRID";
pub const GRID_VERSION: u16 = 1;
const HEADER_LEN: usize = 18;

/// Display window in Hounsfield units for PGM previews.
pub const DISPLAY_WINDOW_HU: (f64, f64) = (-1000.0, 1000.0);

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn encode_grid(rows: usize, cols: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != rows * cols {
        return Err(Error::Shape(format!("{} values for a {rows}x{cols} grid", values.len())));
    }
    let r = u32::try_from(rows).map_err(|_| Error::Shape(format!("{rows} rows exceed u32")))?;
    let c = u32::try_from(cols).map_err(|_| Error::Shape(format!("{cols} cols exceed u32")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&GRID_VERSION.to_le_bytes());
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_grid(bytes: &[u8], context: &str) -> Result<(usize, usize, Vec<f64>)> {
    let parse = |message: String| Error::Parse {
        context: context.to_string(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != GRID_MAGIC {
        return Err(parse("missing LACTGRID magic".into()));
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != GRID_VERSION {
        return Err(parse(format!("unsupported grid version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * rows * cols {
        return Err(parse(format!(
            "expected {} payload bytes for {rows}x{cols}, found {}",
            4 * rows * cols,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((rows, cols, values))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    atomic_write(path, &encode_grid(image.height(), image.width(), image.as_slice())?)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let (rows, cols, values) = decode_grid(&read_bytes(path)?, &path.display().to_string())?;
    Image::from_vec(rows, cols, values)
}

pub fn write_sinogram(path: &Path, sinogram: &Sinogram) -> Result<()> {
    atomic_write(
        path,
        &encode_grid(sinogram.num_views(), sinogram.num_bins(), sinogram.as_slice())?,
    )
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let (rows, cols, values) = decode_grid(&read_bytes(path)?, &path.display().to_string())?;
    Sinogram::from_vec(rows, cols, values)
}

/// Path of the text header that accompanies a grid file (`x.grid` → `x.grid.hdr`).
pub fn sidecar_path(grid_path: &Path) -> PathBuf {
    let mut s = grid_path.as_os_str().to_owned();
    s.push(".hdr");
    PathBuf::from(s)
}

pub fn to_toml_string<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialise: {e}")))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    atomic_write(path, to_toml_string(value)?.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text, &path.display().to_string())
}

/// Parses TOML, reporting the line number (and offending key, when the error
/// points at an assignment) on failure.
pub fn parse_toml<T: DeserializeOwned>(text: &str, context: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let mut message = e.message().to_string();
        if let Some(span) = e.span() {
            let line_no = text[..span.start.min(text.len())].matches('\n').count() + 1;
            let line = text.lines().nth(line_no - 1).unwrap_or("");
            match line.split_once('=') {
                Some((key, _)) if !line.trim_start().starts_with('[') => {
                    message = format!("line {line_no}, field `{}`: {message}", key.trim());
                }
                _ => message = format!("line {line_no}: {message}"),
            }
        }
        Error::Parse {
            context: context.to_string(),
            message,
        }
    })
}

/// Maps normalised intensity to HU so that `[0, 1]` spans the display window.
pub fn normalized_to_hu(v: f64) -> f64 {
    DISPLAY_WINDOW_HU.0 + v * (DISPLAY_WINDOW_HU.1 - DISPLAY_WINDOW_HU.0)
}

/// Binary 16-bit PGM of `hu_image` windowed linearly to `window`.
pub fn encode_pgm16(hu_image: &Image, window: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::Config(format!("empty display window [{lo}, {hi}]")));
    }
    let mut out = format!("P5\n{} {}\n65535\n", hu_image.width(), hu_image.height()).into_bytes();
    for &v in hu_image.as_slice() {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let level = (t * 65535.0).round() as u16;
        out.extend_from_slice(&level.to_be_bytes());
    }
    Ok(out)
}

/// Writes a PGM preview of a normalised-intensity image.
pub fn write_preview(path: &Path, image: &Image) -> Result<()> {
    atomic_write(path, &encode_pgm16(&image.map(normalized_to_hu), DISPLAY_WINDOW_HU)?)
}
