//! 8-bit PNG input/output. Gray and alpha inputs are widened to RGB;
//! 16-bit files are rejected.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use super::ImageTensor;
use crate::error::{Error, Result};

/// Decode a PNG byte stream into an RGB image in [0, 1].
pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let decoder = png::Decoder::new(bytes);
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png(format!(
            "only 8-bit PNG supported, got {:?}",
            info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    if w == 0 || h == 0 {
        return Err(Error::Png("zero-sized image".into()));
    }
    let px = &buf[..info.buffer_size()];
    let mut data = vec![0.0f32; h * w * 3];
    let to_f = |b: u8| b as f32 / 255.0;
    match info.color_type {
        png::ColorType::Rgb => {
            for i in 0..h * w {
                for c in 0..3 {
                    data[i * 3 + c] = to_f(px[i * 3 + c]);
                }
            }
        }
        png::ColorType::Rgba => {
            for i in 0..h * w {
                for c in 0..3 {
                    data[i * 3 + c] = to_f(px[i * 4 + c]);
                }
            }
        }
        png::ColorType::Grayscale => {
            for i in 0..h * w {
                let v = to_f(px[i]);
                data[i * 3..i * 3 + 3].fill(v);
            }
        }
        png::ColorType::GrayscaleAlpha => {
            for i in 0..h * w {
                let v = to_f(px[i * 2]);
                data[i * 3..i * 3 + 3].fill(v);
            }
        }
        other => {
            return Err(Error::Png(format!("unsupported color type {other:?}")));
        }
    }
    ImageTensor::new(h, w, data)
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path)?;
    decode_png(&bytes).map_err(|e| match e {
        Error::Png(msg) => Error::Png(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_png(path: &Path, img: &ImageTensor) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        img.width as u32,
        img.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Png(e.to_string()))?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}
