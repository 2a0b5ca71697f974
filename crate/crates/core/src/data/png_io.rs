//! 8-bit PNG reading and writing: RGB images, indexed label maps and grayscale plots.

use crate::error::{Error, Result};
use crate::geometry::LabelMap;
use png::{BitDepth, ColorType, Transformations};
use std::io::Cursor;
use std::path::Path;

fn encode(width: usize, height: usize, color: ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let fail = |e: png::EncodingError| Error::InvalidArgument(format!("png encoding failed: {e}"));
        let mut w = enc.write_header().map_err(fail)?;
        w.write_image_data(data).map_err(fail)?;
    }
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

struct Decoded {
    width: usize,
    height: usize,
    color: ColorType,
    data: Vec<u8>,
}

fn decode(path: &Path, bytes: Vec<u8>, transform: Transformations) -> Result<Decoded> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut dec = png::Decoder::new(Cursor::new(bytes));
    dec.set_transformations(transform);
    let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| bad("image too large".into()))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(|e| bad(e.to_string()))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(bad(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data,
    })
}

pub fn encode_rgb_png(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    encode(width, height, ColorType::Rgb, None, rgb)
}

pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    write_file(path, &encode_rgb_png(width, height, rgb)?)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    write_file(path, &encode(width, height, ColorType::Grayscale, None, gray)?)
}

/// Reads any 8-bit PNG as RGB; gray is replicated, alpha dropped, palettes expanded.
pub fn read_rgb_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let d = decode(path, read_file(path)?, Transformations::EXPAND)?;
    let px = d.width * d.height;
    let rgb = match d.color {
        ColorType::Rgb => d.data,
        ColorType::Rgba => d.data.chunks(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
        ColorType::Grayscale => d.data.iter().flat_map(|&g| [g, g, g]).collect(),
        ColorType::GrayscaleAlpha => d.data.chunks(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
        ColorType::Indexed => {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "palette was not expanded".into(),
            })
        }
    };
    debug_assert_eq!(rgb.len(), 3 * px);
    Ok((d.width, d.height, rgb))
}

pub fn encode_label_png(labels: &LabelMap, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    let flat: Vec<u8> = palette.iter().flatten().copied().collect();
    encode(labels.width, labels.height, ColorType::Indexed, Some(flat), &labels.labels)
}

/// Writes class ids as palette indices.
pub fn write_label_png(path: &Path, labels: &LabelMap, palette: &[[u8; 3]]) -> Result<()> {
    write_file(path, &encode_label_png(labels, palette)?)
}

/// Reads an indexed or 8-bit grayscale PNG; pixel values are class ids.
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let d = decode(path, read_file(path)?, Transformations::IDENTITY)?;
    match d.color {
        ColorType::Indexed | ColorType::Grayscale => LabelMap::new(d.width, d.height, d.data),
        other => Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("label masks must be indexed or grayscale, found {other:?}"),
        }),
    }
}
