use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageReader};

use super::ImageBuf;
use crate::error::{Error, Result};

const TENSOR_MAGIC: &[u8; 4] = b"IMGT";

/// Reads an 8- or 16-bit PNG. Gray stays 1 channel, gray+alpha becomes RGBA.
pub fn read_png(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let codec = |e: image::ImageError| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(codec)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageLuma16(b) => {
            (1, b.into_raw().iter().map(|&v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageRgb8(b) => (3, b.into_raw().iter().map(|&v| v as f32 / 255.0).collect()),
        DynamicImage::ImageRgb16(_) => {
            let b = img.to_rgb32f();
            (3, b.into_raw())
        }
        other => (4, other.to_rgba32f().into_raw()),
    };
    ImageBuf::new(h, w, channels, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit PNG.
pub fn write_png(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.dims();
    let raw: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => image::ExtendedColorType::Rgba8,
    };
    image::save_buffer_with_format(path, &raw, w as u32, h as u32, color, image::ImageFormat::Png)
        .map_err(|e| Error::Codec {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Writes a binary single-channel mask as a 1-bit grayscale PNG.
pub fn write_mask_png(mask: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if mask.channels() != 1 {
        return Err(Error::invalid("mask must be single-channel"));
    }
    let (h, w, _) = mask.dims();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x, 0) >= 0.5 {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let codec = |e: png::EncodingError| Error::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(codec)?;
    writer.write_image_data(&packed).map_err(codec)?;
    writer.finish().map_err(codec)
}

/// Raw dump: `"IMGT"`, then little-endian `u32` height, width, channels,
/// then `h*w*c` little-endian `f32` samples.
pub fn write_tensor(img: &ImageBuf, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let (h, wd, c) = img.dims();
    let mut buf = Vec::with_capacity(16 + img.data().len() * 4);
    buf.extend_from_slice(TENSOR_MAGIC);
    for d in [h, wd, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ImageBuf> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::invalid(format!("{} is not an IMGT tensor", path.display())));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let body = &bytes[16..];
    if body.len() != h * w * c * 4 {
        return Err(Error::invalid(format!(
            "{}: payload of {} bytes does not match {h}x{w}x{c}",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ImageBuf::new(h, w, c, data)
}
