use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType};

use super::{DataError, Image, LabelMask, Result};

/// Display colors for background, blade and veins; other labels cycle.
const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [46, 160, 67],
    [250, 220, 40],
    [220, 60, 60],
    [60, 110, 230],
    [200, 90, 220],
    [60, 210, 210],
    [240, 140, 40],
];

struct Raw {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn read_png(path: &Path) -> Result<Raw> {
    let file = File::open(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    let png_err = |e: png::DecodingError| match e {
        png::DecodingError::IoError(source) => DataError::Io { path: path.to_path_buf(), source },
        other => DataError::Png { path: path.to_path_buf(), message: other.to_string() },
    };
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(png_err)?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    if depth != BitDepth::Eight {
        return Err(DataError::Unsupported { path: path.to_path_buf(), what: format!("{depth:?}-bit samples") });
    }
    let channels = match color {
        ColorType::Grayscale => 1,
        ColorType::Rgb => 3,
        other => {
            return Err(DataError::Unsupported { path: path.to_path_buf(), what: format!("color type {other:?}") });
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| DataError::Png { path: path.to_path_buf(), message: "image too large".into() })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    let (width, height) = (frame.width as usize, frame.height as usize);
    let row = width * channels;
    let mut bytes = Vec::with_capacity(row * height);
    for y in 0..height {
        bytes.extend_from_slice(&buf[y * frame.line_size..y * frame.line_size + row]);
    }
    Ok(Raw { width, height, channels, bytes })
}

fn write_png(path: &Path, width: usize, height: usize, color: ColorType, bytes: &[u8]) -> Result<()> {
    let io_err = |source| DataError::Io { path: path.to_path_buf(), source };
    let enc_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(source) => DataError::Io { path: path.to_path_buf(), source },
        other => DataError::Png { path: path.to_path_buf(), message: other.to_string() },
    };
    let file = File::create(path).map_err(io_err)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(enc_err)?;
    writer.write_image_data(bytes).map_err(enc_err)?;
    writer.finish().map_err(enc_err)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let raw = read_png(path.as_ref())?;
    let plane = raw.width * raw.height;
    let mut pixels = vec![0.0f32; plane * raw.channels];
    for (i, &b) in raw.bytes.iter().enumerate() {
        let (p, c) = (i / raw.channels, i % raw.channels);
        pixels[c * plane + p] = b as f32 / 255.0;
    }
    Image::new(raw.height, raw.width, raw.channels, pixels)
}

/// Quantizes to 8 bits by rounding `v * 255`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let plane = img.height() * img.width();
    let c = img.channels();
    let mut bytes = vec![0u8; plane * c];
    for (i, b) in bytes.iter_mut().enumerate() {
        let v = img.pixels()[(i % c) * plane + i / c];
        *b = (v * 255.0).round().clamp(0.0, 255.0) as u8;
    }
    let color = if c == 1 { ColorType::Grayscale } else { ColorType::Rgb };
    write_png(path.as_ref(), img.width(), img.height(), color, &bytes)
}

/// Loads raw labels from an 8-bit grayscale PNG, accepting only 0, 1 and 2.
pub fn load_trimap(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let raw = read_png(path)?;
    if raw.channels != 1 {
        return Err(DataError::Unsupported { path: path.to_path_buf(), what: "trimaps must be grayscale".into() });
    }
    if let Some(i) = raw.bytes.iter().position(|&v| v > 2) {
        return Err(DataError::TrimapValue {
            path: path.to_path_buf(),
            value: raw.bytes[i],
            x: i % raw.width,
            y: i / raw.width,
        });
    }
    LabelMask::new(raw.height, raw.width, raw.bytes)
}

pub fn save_trimap(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    if let Some(i) = mask.labels().iter().position(|&v| v > 2) {
        return Err(DataError::Invalid(format!(
            "trimap label {} at (x={}, y={}) is not one of 0, 1, 2",
            mask.labels()[i],
            i % mask.width(),
            i / mask.width()
        )));
    }
    save_labels(mask, path)
}

/// Writes arbitrary labels as raw 8-bit grayscale.
pub fn save_labels(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    write_png(path.as_ref(), mask.width(), mask.height(), ColorType::Grayscale, mask.labels())
}

/// Writes a human-viewable RGB rendering of a label mask.
pub fn save_colorized(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.labels().iter().flat_map(|&l| PALETTE[l as usize % PALETTE.len()]).collect();
    write_png(path.as_ref(), mask.width(), mask.height(), ColorType::Rgb, &bytes)
}
