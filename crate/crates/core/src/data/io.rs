//! Image and disparity file formats.
//!
//! * Images: 8-bit PNG or PPM, grayscale replicated to RGB.
//! * PFM: `Pf` (one channel) or `PF` (three channels, first kept), a width and
//!   height line, a scale line whose sign gives the byte order (negative is
//!   little-endian), then float32 rows stored bottom-up.
//! * Raw disparity: `DSP1`, `u32` rows, `u32` cols (little-endian), then
//!   little-endian float32 values in row-major order.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{ColorType, DynamicImage, ImageEncoder, ImageReader};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, ValueDomain};
use crate::imageops;

pub const RAW_MAGIC: &[u8; 4] = b"DSP1";

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::CorruptData {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let bytes = read(path)?;
    let reader = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    if reader.format().is_none() {
        return Err(corrupt(path, "unrecognized image header"));
    }
    reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            detail: u.to_string(),
        },
        other => corrupt(path, other.to_string()),
    })
}

/// Loads an 8-bit image into the signed domain with three channels.
pub fn load_image(path: &Path) -> Result<ImageTensor> {
    let img = decode(path)?;
    let rgb = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => img.to_rgb8(),
        other => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                detail: format!("{other:?}; only 8-bit images are accepted"),
            })
        }
    };
    let (cols, rows) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let mut planar = vec![0u8; raw.len()];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            planar[c * rows * cols + i] = px[c];
        }
    }
    imageops::normalize(&planar, 3, rows, cols)
}

/// Loads an 8-bit single-channel label raster; values are class ids.
pub fn load_labels(path: &Path) -> Result<ImageTensor> {
    let img = decode(path)?;
    if img.color() != ColorType::L8 {
        return Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
            detail: format!("{:?}; labels must be 8-bit grayscale", img.color()),
        });
    }
    let l = img.to_luma8();
    let (cols, rows) = (l.width() as usize, l.height() as usize);
    let data = l.into_raw().into_iter().map(f32::from).collect();
    ImageTensor::new(data, 1, rows, cols, ValueDomain::Free)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn interleave(planar: &[u8], channels: usize, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; planar.len()];
    for i in 0..n {
        for c in 0..channels {
            out[i * channels + c] = planar[c * n + i];
        }
    }
    out
}

/// Writes planar bytes as PNG (1 or 3 channels).
pub fn save_png_bytes(path: &Path, planar: &[u8], channels: usize, rows: usize, cols: usize) -> Result<()> {
    let color = match channels {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        n => return Err(Error::dim(format!("cannot write {n}-channel PNG"))),
    };
    let data = interleave(planar, channels, rows * cols);
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(&mut buf)
        .write_image(&data, cols as u32, rows as u32, color.into())
        .map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &buf)
}

/// Writes a signed image as 8-bit PNG via [`imageops::denormalize`].
pub fn save_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let bytes = match img.domain() {
        ValueDomain::Signed => imageops::denormalize(img),
        _ => imageops::unit_to_bytes(img),
    };
    save_png_bytes(path, &bytes, img.channels(), img.rows(), img.cols())
}

/// Binary PPM (P6) writer for three-channel signed images.
pub fn save_ppm(path: &Path, img: &ImageTensor) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::dim("PPM needs three channels"));
    }
    let mut buf = format!("P6\n{} {}\n255\n", img.cols(), img.rows()).into_bytes();
    buf.extend(interleave(&imageops::denormalize(img), 3, img.rows() * img.cols()));
    write_file(path, &buf)
}

fn sanitize(v: f32) -> f32 {
    if v.is_finite() && v >= 0.0 {
        v
    } else {
        f32::NAN
    }
}

/// Loads a disparity map from PFM or raw float32, choosing by content.
/// Negative and non-finite values become `NaN`.
pub fn load_disparity(path: &Path) -> Result<ImageTensor> {
    let bytes = read(path)?;
    if bytes.starts_with(RAW_MAGIC) {
        parse_raw(path, &bytes)
    } else if bytes.starts_with(b"Pf") || bytes.starts_with(b"PF") {
        parse_pfm(path, &bytes)
    } else {
        Err(Error::Format(format!(
            "{}: bad magic, expected PFM (Pf/PF) or raw (DSP1)",
            path.display()
        )))
    }
}

fn parse_raw(path: &Path, bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 12 {
        return Err(corrupt(path, "raw header truncated"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{}: dims {rows}x{cols} overflow", path.display())))?;
    // A 16-byte header variant carries one reserved word after cols.
    let header = if bytes.len() == 12 + payload {
        12
    } else if bytes.len() == 16 + payload {
        16
    } else {
        return Err(Error::Format(format!(
            "{}: {rows}x{cols} raw disparity needs {} payload bytes, file has {}",
            path.display(),
            payload,
            bytes.len().saturating_sub(12)
        )));
    };
    if rows == 0 || cols == 0 {
        return Err(Error::Format(format!("{}: empty raster", path.display())));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|b| sanitize(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
        .collect();
    ImageTensor::new(data, 1, rows, cols, ValueDomain::Free)
}

fn parse_pfm(path: &Path, bytes: &[u8]) -> Result<ImageTensor> {
    let channels = if bytes[1] == b'f' { 1 } else { 3 };
    // Three whitespace-separated tokens after the magic, then one whitespace byte.
    let mut pos = 2;
    let mut tokens = Vec::with_capacity(3);
    while tokens.len() < 3 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "PFM header truncated"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt(path, "PFM header is not text"))?);
    }
    pos += 1;
    let bad = |what: &str| Error::Format(format!("{}: invalid PFM {what}", path.display()));
    let cols: usize = tokens[0].parse().map_err(|_| bad("width"))?;
    let rows: usize = tokens[1].parse().map_err(|_| bad("height"))?;
    let scale: f32 = tokens[2].parse().map_err(|_| bad("scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad("scale"));
    }
    let little = scale < 0.0;
    let count = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format(format!("{}: dims {rows}x{cols} overflow", path.display())))?;
    let need = count
        .checked_mul(4)
        .ok_or_else(|| Error::Format(format!("{}: dims overflow", path.display())))?;
    if rows == 0 || cols == 0 {
        return Err(bad("dimensions"));
    }
    if bytes.len() < pos || bytes.len() - pos < need {
        return Err(corrupt(path, format!("PFM payload has {} of {need} bytes", bytes.len().saturating_sub(pos))));
    }
    let floats: Vec<f32> = bytes[pos..pos + need]
        .chunks_exact(4)
        .map(|b| {
            let a: [u8; 4] = b.try_into().expect("4 bytes");
            if little {
                f32::from_le_bytes(a)
            } else {
                f32::from_be_bytes(a)
            }
        })
        .collect();
    let mut data = vec![0.0f32; rows * cols];
    for v in 0..rows {
        let src_row = rows - 1 - v;
        for u in 0..cols {
            data[v * cols + u] = sanitize(floats[(src_row * cols + u) * channels]);
        }
    }
    ImageTensor::new(data, 1, rows, cols, ValueDomain::Free)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Writes a single-channel PFM with bottom-up rows.
pub fn save_pfm(path: &Path, disp: &ImageTensor, endian: Endian) -> Result<()> {
    if disp.channels() != 1 {
        return Err(Error::dim("PFM writer takes single-channel maps"));
    }
    let scale = match endian {
        Endian::Little => "-1.0",
        Endian::Big => "1.0",
    };
    let mut buf = format!("Pf\n{} {}\n{scale}\n", disp.cols(), disp.rows()).into_bytes();
    for v in (0..disp.rows()).rev() {
        for u in 0..disp.cols() {
            let x = disp.get(0, v, u);
            buf.extend_from_slice(&match endian {
                Endian::Little => x.to_le_bytes(),
                Endian::Big => x.to_be_bytes(),
            });
        }
    }
    write_file(path, &buf)
}

/// Writes the raw `DSP1` format.
pub fn save_raw_disparity(path: &Path, disp: &ImageTensor) -> Result<()> {
    if disp.channels() != 1 {
        return Err(Error::dim("raw disparity writer takes single-channel maps"));
    }
    let mut buf = Vec::with_capacity(12 + 4 * disp.data().len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(disp.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(disp.cols() as u32).to_le_bytes());
    for &x in disp.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &buf)
}

/// Saves a disparity map, picking the format from the extension
/// (`.pfm` or anything else for raw).
pub fn save_disparity(path: &Path, disp: &ImageTensor) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => save_pfm(path, disp, Endian::Little),
        _ => save_raw_disparity(path, disp),
    }
}
