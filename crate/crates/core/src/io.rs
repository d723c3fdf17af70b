//! On-disk formats.
//!
//! + raw: little-endian `f32` row-major blob with a JSON header stored next
//!   to it (`<stem>.json`)
//! + PNG16: 16-bit grayscale PNG with a JSON sidecar carrying the affine map
//!   back to physical units
//! + masks: run-length encoded JSON ([`RleMask`])

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, UnitTag};
use crate::mask::{BinaryMask, RleMask};
use crate::tomo::{apply_window, ProjectionGeometry, Sinogram, WindowSpec};

/// Header of a raw float32 file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub width: usize,
    pub height: usize,
    pub pixel_size_mm: f64,
    pub unit_tag: UnitTag,
    /// Present for sinograms (`width` = bins, `height` = views).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ProjectionGeometry>,
}

/// Sidecar of a 16-bit PNG: `value = stored * hu_slope + hu_intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PngSidecar {
    pub pixel_size_mm: f64,
    pub hu_slope: f64,
    pub hu_intercept: f64,
    pub unit_tag: UnitTag,
}

/// Path of the JSON header belonging to a data file.
pub fn header_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f32(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} value {i}", path.display())));
    }
    Ok(values)
}

pub fn write_raw_image(path: &Path, image: &ImageGrid) -> Result<()> {
    let header = RawHeader {
        width: image.width(),
        height: image.height(),
        pixel_size_mm: image.pixel_size(),
        unit_tag: image.unit(),
        geometry: None,
    };
    write_bytes(path, &encode_f32(image.values()))?;
    write_json(&header_path(path), &header)
}

/// Reads a raw image with an explicit header.
pub fn read_raw_image_with(path: &Path, header: &RawHeader) -> Result<ImageGrid> {
    if header.width != header.height {
        return Err(Error::InvalidImage(format!(
            "{}: header is {}x{}, images must be square",
            path.display(),
            header.width,
            header.height
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = decode_f32(path, &bytes, header.width * header.height)?;
    ImageGrid::new(
        header.width,
        header.height,
        header.pixel_size_mm,
        values,
        header.unit_tag,
    )
}

/// Reads a raw image using its sidecar header.
pub fn read_raw_image(path: &Path) -> Result<ImageGrid> {
    let header: RawHeader = read_json(&header_path(path))?;
    read_raw_image_with(path, &header)
}

pub fn write_raw_sinogram(path: &Path, sino: &Sinogram) -> Result<()> {
    let geom = sino.geometry();
    let header = RawHeader {
        width: geom.detector_bins(),
        height: geom.n_views(),
        pixel_size_mm: geom.detector_spacing(),
        unit_tag: UnitTag::Hu,
        geometry: Some(geom.clone()),
    };
    write_bytes(path, &encode_f32(sino.values()))?;
    write_json(&header_path(path), &header)
}

pub fn read_raw_sinogram(path: &Path) -> Result<Sinogram> {
    let header: RawHeader = read_json(&header_path(path))?;
    let geometry = header
        .geometry
        .ok_or_else(|| Error::format(path, "header has no geometry"))?;
    if geometry.detector_bins() != header.width || geometry.n_views() != header.height {
        return Err(Error::format(path, "header shape disagrees with geometry"));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = decode_f32(path, &bytes, header.width * header.height)?;
    Sinogram::new(geometry, values)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_json(path, &mask.to_rle())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let rle: RleMask = read_json(path)?;
    rle.decode().map_err(|e| Error::format(path, e.to_string()))
}

fn png_mapping(unit: UnitTag) -> (f64, f64) {
    match unit {
        // 0.1 HU resolution over [-3276.8, 3276.7]
        UnitTag::Hu => (0.1, -3276.8),
        UnitTag::Normalized => (1.0 / 65535.0, 0.0),
        UnitTag::Residual => (2.0 / 65535.0, -1.0),
    }
}

/// Writes a 16-bit grayscale PNG and its sidecar (`<stem>.json`).
pub fn write_png16(path: &Path, image: &ImageGrid) -> Result<()> {
    let (slope, intercept) = png_mapping(image.unit());
    let n = image.width() as u32;
    let data: Vec<u16> = image
        .values()
        .iter()
        .map(|&v| ((v as f64 - intercept) / slope).round().clamp(0.0, 65535.0) as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(n, n, data).expect("buffer sized from image");
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write_bytes(path, &bytes)?;
    write_json(
        &header_path(path),
        &PngSidecar {
            pixel_size_mm: image.pixel_size(),
            hu_slope: slope,
            hu_intercept: intercept,
            unit_tag: image.unit(),
        },
    )
}

pub fn read_png16(path: &Path) -> Result<ImageGrid> {
    let sidecar: PngSidecar = read_json(&header_path(path))?;
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    let values = img
        .into_raw()
        .into_iter()
        .map(|v| {
            let x = v as f64 * sidecar.hu_slope + sidecar.hu_intercept;
            match sidecar.unit_tag {
                UnitTag::Normalized => x.clamp(0.0, 1.0) as f32,
                UnitTag::Residual => x.clamp(-1.0, 1.0) as f32,
                UnitTag::Hu => x as f32,
            }
        })
        .collect();
    ImageGrid::new(
        w as usize,
        h as usize,
        sidecar.pixel_size_mm,
        values,
        sidecar.unit_tag,
    )
}

/// 8-bit grayscale PNG for display. HU images go through `window` first.
///
/// The encoded stream carries only IHDR, IDAT and IEND chunks.
pub fn render_png8(image: &ImageGrid, window: WindowSpec) -> Result<Vec<u8>> {
    let normalized = match image.unit() {
        UnitTag::Hu => apply_window(image, window)?,
        UnitTag::Normalized => image.clone(),
        UnitTag::Residual => image.map(|v| 0.5 * (v + 1.0))?.retag(UnitTag::Normalized)?,
    };
    let n = normalized.width() as u32;
    let data: Vec<u8> = normalized
        .values()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(n, n, data).expect("buffer sized from image");
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    Ok(bytes)
}

/// Chunk types of a PNG stream, in order.
pub fn png_chunk_types(bytes: &[u8]) -> Result<Vec<String>> {
    const SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if bytes.len() < 8 || bytes[..8] != SIGNATURE {
        return Err(Error::InvalidImage("not a PNG stream".into()));
    }
    let mut types = Vec::new();
    let mut pos = 8;
    while pos + 8 <= bytes.len() {
        let len = u32::from_be_bytes([bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]])
            as usize;
        types.push(String::from_utf8_lossy(&bytes[pos + 4..pos + 8]).into_owned());
        pos += 12 + len;
    }
    if pos != bytes.len() {
        return Err(Error::InvalidImage("truncated PNG chunk".into()));
    }
    Ok(types)
}
