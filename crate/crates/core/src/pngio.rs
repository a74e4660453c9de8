//! 8-bit PNG files: RGB for images, grayscale class ids for masks.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::raster::{LabelMask, RasterImage};
use crate::{CoreError, Result};

fn png_err(path: &Path, reason: impl ToString) -> CoreError {
    CoreError::Png {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn read(path: &Path, want: ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| png_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(png_err(
            path,
            format!("expected 8-bit samples, found {:?}", info.bit_depth),
        ));
    }
    if info.color_type != want {
        return Err(png_err(path, format!("expected {want:?}, found {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let row = w * want.samples();
    let data = buf
        .chunks(info.line_size)
        .take(h)
        .flat_map(|line| &line[..row])
        .copied()
        .collect();
    Ok((h, w, data))
}

fn write(path: &Path, height: usize, width: usize, color: ColorType, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).map_err(|e| png_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(color);
    encoder.set_depth(BitDepth::Eight);
    let mut writer = encoder.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(data).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

pub fn load_image(path: &Path) -> Result<RasterImage> {
    let (h, w, data) = read(path, ColorType::Rgb)?;
    RasterImage::new(h, w, data)
}

pub fn save_image(path: &Path, image: &RasterImage) -> Result<()> {
    write(path, image.height(), image.width(), ColorType::Rgb, image.data())
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let (h, w, data) = read(path, ColorType::Grayscale)?;
    LabelMask::new(h, w, data).map_err(|e| png_err(path, e))
}

pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    write(path, mask.height(), mask.width(), ColorType::Grayscale, mask.ids())
}

/// Writes the legend-colored rendering of a mask.
pub fn save_mask_colorized(path: &Path, mask: &LabelMask) -> Result<()> {
    save_image(path, &mask.colorize())
}
