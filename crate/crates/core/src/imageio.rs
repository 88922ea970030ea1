//! Grayscale PNG reading (8/16-bit) and writing (8-bit, fixed encoder settings).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Grayscale image, row-major, values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

fn img_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), detail: detail.into() }
}

pub fn read_gray_png(path: &Path) -> Result<GrayImage> {
    let file = File::open(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // keep 16-bit samples, but expand palettes and sub-byte depths
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| img_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| img_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let samples = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(img_err(path, format!("expected grayscale PNG, got {other:?}"))),
    };
    let bytes = &buf[..info.buffer_size()];
    let pixels: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2 * samples)
            .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) / 65535.0)
            .collect(),
        png::BitDepth::Eight => bytes.chunks_exact(samples).map(|c| f64::from(c[0]) / 255.0).collect(),
        other => return Err(img_err(path, format!("unsupported bit depth {other:?}"))),
    };
    if pixels.len() != w * h {
        return Err(img_err(path, "decoded size does not match header"));
    }
    Ok(GrayImage { width: w, height: h, pixels })
}

/// Encode as 8-bit grayscale. Values are clamped to [0, 1] and rounded.
pub fn encode_gray_png(width: usize, height: usize, pixels: &[f64]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(Error::Shape(format!("{} pixels for a {width}x{height} image", pixels.len())));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::NoFilter);
        let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
        let data: Vec<u8> = pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&data).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    Ok(out)
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    let bytes = encode_gray_png(width, height, pixels)?;
    let mut f = BufWriter::new(File::create(path)?);
    std::io::Write::write_all(&mut f, &bytes)?;
    Ok(())
}

/// Write a 16-bit grayscale PNG; used for ingesting high bit-depth data.
pub fn write_gray_png16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::Shape(format!("{} values for a {width}x{height} image", values.len())));
    }
    let f = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(f, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| Error::Io(std::io::Error::other(e)))?;
    let data: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&data).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Tile equally sized square images into a grid, `cols` per row.
pub fn grid(images: &[&[f64]], size: usize, cols: usize) -> GrayImage {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (w, h) = (cols * size, rows * size);
    let mut pixels = vec![0.0; w * h];
    for (k, img) in images.iter().enumerate() {
        let (gy, gx) = (k / cols, k % cols);
        for y in 0..size {
            let dst = (gy * size + y) * w + gx * size;
            pixels[dst..dst + size].copy_from_slice(&img[y * size..(y + 1) * size]);
        }
    }
    GrayImage { width: w, height: h, pixels }
}
