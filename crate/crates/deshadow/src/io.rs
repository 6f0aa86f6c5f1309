//! Image file I/O: PFM (lossless 32-bit float interchange) and PNG (8-bit
//! sRGB at the pipeline edges). All in-memory math is linear radiance; sRGB
//! conversion happens only here.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;

/// Supported on-disk formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Portable float map, little-endian, scale -1.0. Lossless.
    Pfm,
    /// 8-bit sRGB PNG. Lossy (quantization), LDR only.
    Png,
}

/// sRGB EOTF: encoded [0,1] to linear.
pub fn srgb_to_linear(c: f32) -> f32 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// sRGB OETF: linear [0,1] to encoded.
pub fn linear_to_srgb(c: f32) -> f32 {
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

/// Encodes a linear value to an 8-bit sRGB byte (clamping to [0,1]).
pub fn srgb_encode(v: f32) -> u8 {
    (linear_to_srgb(v.clamp(0.0, 1.0)) * 255.0).round() as u8
}

/// Decodes an 8-bit sRGB byte to a linear value.
pub fn srgb_decode(b: u8) -> f32 {
    srgb_to_linear(b as f32 / 255.0)
}

/// Reads a PFM or PNG image, sniffing the format from the file's magic bytes.
/// PNG pixels are decoded to linear via the sRGB EOTF.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"PF") || bytes.starts_with(b"Pf") {
        read_pfm_bytes(path, &bytes)
    } else if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        read_png_bytes(path, &bytes)
    } else {
        Err(Error::UnsupportedFile {
            path: path.into(),
            format: "image",
            msg: "unrecognized magic bytes (expected PFM or PNG)".into(),
        })
    }
}

/// Writes an image in the requested format. PNG input must be LDR; values are
/// clamped to [0,1] and encoded with the sRGB OETF.
pub fn write_image(path: impl AsRef<Path>, img: &Image, format: ImageFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ImageFormat::Pfm => write_pfm(path, img),
        ImageFormat::Png => write_png(path, img),
    }
}

fn read_pfm_bytes(path: &Path, bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let malformed = |pos: usize, msg: String| Error::MalformedFile {
        path: path.into(),
        format: "PFM",
        offset: pos as u64,
        msg,
    };

    let magic = next_token(bytes, &mut pos)
        .ok_or_else(|| malformed(pos, "truncated header: missing magic field".into()))?;
    let channels = match magic {
        b"PF" => 3,
        b"Pf" => 1,
        other => {
            return Err(malformed(
                0,
                format!("bad magic {:?}", String::from_utf8_lossy(other)),
            ))
        }
    };
    let width = parse_usize_token(bytes, &mut pos, "width", &malformed)?;
    let height = parse_usize_token(bytes, &mut pos, "height", &malformed)?;
    let scale_tok = next_token(bytes, &mut pos)
        .ok_or_else(|| malformed(pos, "truncated header: missing scale field".into()))?;
    let scale: f32 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed(pos, "scale field is not a number".into()))?;
    if scale == 0.0 {
        return Err(malformed(pos, "scale must be non-zero".into()));
    }
    // Exactly one whitespace byte separates the header from the pixel data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed(pos, "missing whitespace before pixel data".into()));
    }
    pos += 1;

    let n = width * height * channels;
    let need = n * 4;
    if bytes.len() - pos < need {
        return Err(malformed(
            bytes.len(),
            format!(
                "truncated pixel data: need {need} bytes, have {}",
                bytes.len() - pos
            ),
        ));
    }
    let little_endian = scale < 0.0;
    let mut data = vec![0.0f32; n];
    // PFM rows are stored bottom-to-top; flip into top-down layout.
    for row in 0..height {
        let src_row = height - 1 - row;
        for i in 0..width * channels {
            let off = pos + (src_row * width * channels + i) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            let v = if little_endian {
                f32::from_le_bytes(raw)
            } else {
                f32::from_be_bytes(raw)
            };
            data[row * width * channels + i] = v;
        }
    }
    Image::new(width, height, channels, data)
}

fn parse_usize_token(
    bytes: &[u8],
    pos: &mut usize,
    field: &str,
    malformed: &impl Fn(usize, String) -> Error,
) -> Result<usize> {
    let tok = next_token(bytes, pos)
        .ok_or_else(|| malformed(*pos, format!("truncated header: missing {field} field")))?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| malformed(*pos, format!("{field} field is not a positive integer")))
}

/// Returns the next whitespace-delimited token, advancing `pos` past it.
fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(&bytes[start..*pos])
}

fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let header = format!(
        "{}\n{} {}\n-1.0\n",
        if img.channels() == 3 { "PF" } else { "Pf" },
        img.width(),
        img.height()
    );
    let mut out = Vec::with_capacity(header.len() + img.data().len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row_len = img.width() * img.channels();
    for row in (0..img.height()).rev() {
        for i in 0..row_len {
            out.extend_from_slice(&img.data()[row * row_len + i].to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_png_bytes(path: &Path, bytes: &[u8]) -> Result<Image> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(
        |e| Error::MalformedFile {
            path: path.into(),
            format: "PNG",
            offset: 0,
            msg: e.to_string(),
        },
    )?;
    use image::DynamicImage::*;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw): (usize, Vec<u8>) = match decoded {
        ImageLuma8(img) => (1, img.into_raw()),
        ImageRgb8(img) => (3, img.into_raw()),
        ImageRgba8(img) => {
            let rgba = img.into_raw();
            let rgb = rgba
                .chunks_exact(4)
                .flat_map(|px| [px[0], px[1], px[2]])
                .collect();
            (3, rgb)
        }
        ImageLumaA8(img) => {
            let la = img.into_raw();
            (1, la.chunks_exact(2).map(|px| px[0]).collect())
        }
        other => {
            return Err(Error::UnsupportedFile {
                path: path.into(),
                format: "PNG",
                msg: format!("unsupported bit depth or layout: {:?}", other.color()),
            })
        }
    };
    let data = raw.into_iter().map(srgb_decode).collect();
    Image::new(w, h, channels, data)
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes: Vec<u8> = img.data().iter().map(|&v| srgb_encode(v)).collect();
    let result = match img.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes)
            .expect("sized buffer")
            .save_with_format(path, image::ImageFormat::Png),
        _ => image::RgbImage::from_raw(w, h, bytes)
            .expect("sized buffer")
            .save_with_format(path, image::ImageFormat::Png),
    };
    result.map_err(|e| Error::InvalidImage(format!("PNG encode of {}: {e}", path.display())))
}
