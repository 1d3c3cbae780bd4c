//! Shared raster primitives.
//!
//! Pixel coordinates follow one convention throughout the crate: the center of
//! pixel `(row, col)` sits at continuous coordinate `(x = col, y = row)`.
//! Resizing maps pixel centers with the half-pixel rule
//! `src = (dst + 0.5) * in / out - 0.5`.

mod geometry;
mod io;

pub use geometry::{warp_perspective, BorderMode, Homography};
pub use io::{read_png, read_tensor, write_mask_png, write_png, write_tensor};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height × width × channels` raster of samples in `[0, 1]`, row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if !matches!(channels, 1 | 3 | 4) {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("sample {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(matches!(channels, 1 | 3 | 4), "unsupported channel count {channels}");
        Self {
            height,
            width,
            channels,
            data: vec![value.clamp(0.0, 1.0); height * width * channels],
        }
    }

    /// Builds an image from a per-sample closure `(row, col, channel) -> value`.
    /// Values are clamped into `[0, 1]`; non-finite values become 0.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(matches!(channels, 1 | 3 | 4), "unsupported channel count {channels}");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(sanitize(f(y, x, c)));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0 || self.width == 0
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.data[i] = sanitize(v);
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.dims() == other.dims()
    }

    /// Applies `f` to every sample, clamping the result.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuf {
        ImageBuf {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| sanitize(f(v))).collect(),
        }
    }

    /// Channel-average grayscale. Single-channel images are returned as-is.
    pub fn to_gray(&self) -> ImageBuf {
        if self.channels == 1 {
            return self.clone();
        }
        // alpha does not carry intensity
        let color = self.channels.min(3);
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px[..color].iter().sum::<f32>() / color as f32)
            .collect();
        ImageBuf {
            height: self.height,
            width: self.width,
            channels: 1,
            data,
        }
    }

    /// Replicates gray to three channels or drops alpha.
    pub fn to_rgb(&self) -> ImageBuf {
        match self.channels {
            3 => self.clone(),
            1 => ImageBuf {
                height: self.height,
                width: self.width,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            },
            _ => ImageBuf {
                height: self.height,
                width: self.width,
                channels: 3,
                data: self
                    .data
                    .chunks_exact(self.channels)
                    .flat_map(|px| [px[0], px[1], px[2]])
                    .collect(),
            },
        }
    }

    pub fn flip_horizontal(&self) -> ImageBuf {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.index(y, self.width - 1 - x, 0);
                let dst = self.index(y, x, 0);
                out.data[dst..dst + self.channels]
                    .copy_from_slice(&self.data[src..src + self.channels]);
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> ImageBuf {
        let row = self.width * self.channels;
        let mut data = Vec::with_capacity(self.data.len());
        for y in (0..self.height).rev() {
            data.extend_from_slice(&self.data[y * row..(y + 1) * row]);
        }
        ImageBuf {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
        }
    }

    /// Rotates by 90 degrees counter-clockwise (exact index permutation).
    pub fn rotate90(&self) -> ImageBuf {
        let (h, w, c) = self.dims();
        let mut out = ImageBuf::filled(w, h, c, 0.0);
        for y in 0..h {
            for x in 0..w {
                for k in 0..c {
                    out.data[((w - 1 - x) * h + y) * c + k] = self.get(y, x, k);
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageBuf> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let start = self.index(y, left, 0);
            data.extend_from_slice(&self.data[start..start + width * self.channels]);
        }
        Ok(ImageBuf {
            height,
            width,
            channels: self.channels,
            data,
        })
    }

    /// True when a single-channel image holds only exact 0 and 1 samples.
    pub fn is_binary_mask(&self) -> bool {
        self.channels == 1 && self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
fn sanitize(v: f32) -> f32 {
    if v.is_finite() {
        v.clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Offsets recorded by [`pad_to_square`] so the padding can be undone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Padding {
    pub fn crop(&self, padded: &ImageBuf) -> Result<ImageBuf> {
        padded.crop(self.top, self.left, self.height, self.width)
    }
}

/// Pads to a centered `max(h, w)` square. Odd leftovers go to the bottom/right.
pub fn pad_to_square(img: &ImageBuf, fill: f32) -> Result<(ImageBuf, Padding)> {
    if img.is_empty() {
        return Err(Error::invalid("cannot pad a zero-dimension image"));
    }
    let (h, w, c) = img.dims();
    let side = h.max(w);
    let top = (side - h) / 2;
    let left = (side - w) / 2;
    let record = Padding {
        top,
        left,
        height: h,
        width: w,
    };
    if side == h && side == w {
        return Ok((img.clone(), record));
    }
    let mut out = ImageBuf::filled(side, side, c, fill);
    for y in 0..h {
        let src = img.index(y, 0, 0);
        let dst = out.index(y + top, left, 0);
        out.data[dst..dst + w * c].copy_from_slice(&img.data[src..src + w * c]);
    }
    Ok((out, record))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageBuf, new_h: usize, new_w: usize) -> Result<ImageBuf> {
    if new_h == 0 || new_w == 0 || img.is_empty() {
        return Err(Error::invalid(format!(
            "cannot resize {}x{} to {new_h}x{new_w}",
            img.height, img.width
        )));
    }
    let (h, w, c) = img.dims();
    if (h, w) == (new_h, new_w) {
        return Ok(img.clone());
    }
    let axis = |out: usize, len: usize| -> Vec<(usize, usize, f32)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = axis(new_h, h);
    let xs = axis(new_w, w);
    let mut data = Vec::with_capacity(new_h * new_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                // a + (b - a) * f is exact when a == b
                let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
                let top = lerp(img.get(y0, x0, k), img.get(y0, x1, k), fx);
                let bottom = lerp(img.get(y1, x0, k), img.get(y1, x1, k), fx);
                data.push(sanitize(lerp(top, bottom, fy)));
            }
        }
    }
    Ok(ImageBuf {
        height: new_h,
        width: new_w,
        channels: c,
        data,
    })
}

/// Nearest-neighbour resize under the same half-pixel convention. Keeps masks binary.
pub fn resize_nearest(img: &ImageBuf, new_h: usize, new_w: usize) -> Result<ImageBuf> {
    if new_h == 0 || new_w == 0 || img.is_empty() {
        return Err(Error::invalid(format!(
            "cannot resize {}x{} to {new_h}x{new_w}",
            img.height, img.width
        )));
    }
    let (h, w, c) = img.dims();
    let pick = |i: usize, out: usize, len: usize| ((i * len * 2 + len) / (2 * out)).min(len - 1);
    let mut data = Vec::with_capacity(new_h * new_w * c);
    for y in 0..new_h {
        let sy = pick(y, new_h, h);
        for x in 0..new_w {
            let sx = pick(x, new_w, w);
            data.extend_from_slice(img.pixel(sy, sx));
        }
    }
    Ok(ImageBuf {
        height: new_h,
        width: new_w,
        channels: c,
        data,
    })
}

/// Pads to a square and resizes to `side × side`, the canonical ingestion path.
pub fn to_canonical(img: &ImageBuf, side: usize) -> Result<ImageBuf> {
    let (square, _) = pad_to_square(img, 0.0)?;
    resize_bilinear(&square, side, side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageBuf {
        ImageBuf::from_fn(h, w, c, |y, x, k| {
            ((y * w + x) * c + k) as f32 / (h * w * c) as f32
        })
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(ImageBuf::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuf::new(1, 1, 2, vec![0.0; 2]).is_err());
        assert!(ImageBuf::new(1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBuf::new(1, 1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn square_input_is_unchanged() {
        let img = ramp(512, 512, 1);
        let (out, pad) = pad_to_square(&img, 0.0).unwrap();
        assert_eq!(out, img);
        assert_eq!((pad.top, pad.left), (0, 0));
    }

    #[test]
    fn tall_input_pads_columns() {
        let img = ImageBuf::filled(4, 2, 1, 1.0);
        let (out, pad) = pad_to_square(&img, 0.0).unwrap();
        assert_eq!(out.dims(), (4, 4, 1));
        assert_eq!((pad.top, pad.left), (0, 1));
        for y in 0..4 {
            let row: Vec<f32> = (0..4).map(|x| out.get(y, x, 0)).collect();
            assert_eq!(row, vec![0.0, 1.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn zero_dimension_pad_is_rejected() {
        let img = ImageBuf::new(0, 3, 1, vec![]).unwrap();
        assert!(matches!(pad_to_square(&img, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pad_then_resize_keeps_aspect() {
        // 6x4 content padded to 6x6 (one column each side), then 8x8.
        let img = ImageBuf::filled(6, 4, 1, 1.0);
        let (sq, pad) = pad_to_square(&img, 0.0).unwrap();
        assert_eq!(pad.left, 1);
        let out = resize_bilinear(&sq, 8, 8).unwrap();
        // Manual half-pixel arithmetic: out col x samples src (x + 0.5) * 0.75 - 0.5.
        // Content occupies src columns 1..=4, so a column is pure content when
        // both bilinear taps land in 1..=4, pure fill when both land in {0, 5}.
        for x in 0..8 {
            let src = ((x as f64 + 0.5) * 0.75 - 0.5).clamp(0.0, 5.0);
            let x0 = src.floor() as usize;
            let x1 = (x0 + 1).min(5);
            let f = src - x0 as f64;
            let val = |i: usize| if (1..=4).contains(&i) { 1.0 } else { 0.0 };
            let expect = val(x0) * (1.0 - f) + val(x1) * f;
            for y in 0..8 {
                assert!((out.get(y, x, 0) as f64 - expect).abs() < 1e-6, "col {x}");
            }
        }
        // left/right symmetric
        for x in 0..4 {
            assert!((out.get(3, x, 0) - out.get(3, 7 - x, 0)).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_identity_is_bit_exact() {
        let img = ramp(5, 7, 3);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap(), img);
    }

    #[test]
    fn resize_half_pixel_example() {
        let img = ImageBuf::new(1, 2, 1, vec![0.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 1, 4).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn resize_rejects_zero_dims() {
        assert!(resize_bilinear(&ramp(2, 2, 1), 0, 3).is_err());
    }

    #[test]
    fn nearest_resize_keeps_binary() {
        let m = ImageBuf::from_fn(32, 32, 1, |y, x, _| ((y / 8 + x / 8) % 2) as f32);
        let small = resize_nearest(&m, 4, 4).unwrap();
        assert!(small.is_binary_mask());
        assert_eq!(small.get(0, 1, 0), 1.0);
        assert_eq!(small.get(1, 1, 0), 0.0);
    }

    #[test]
    fn rotate90_four_times_is_identity() {
        let img = ramp(3, 5, 3);
        let r = img.rotate90().rotate90().rotate90().rotate90();
        assert_eq!(r, img);
        assert_eq!(img.rotate90().dims(), (5, 3, 3));
    }

    proptest! {
        #[test]
        fn constant_resize_is_exact(h in 1usize..12, w in 1usize..12, nh in 1usize..20, nw in 1usize..20, v in 0.0f32..=1.0) {
            let img = ImageBuf::filled(h, w, 3, v);
            let out = resize_bilinear(&img, nh, nw).unwrap();
            prop_assert!(out.data().iter().all(|&s| s == v));
        }

        #[test]
        fn pad_crop_round_trip(h in 1usize..10, w in 1usize..10, fill in 0.0f32..=1.0) {
            let img = ramp(h, w, 3);
            let (sq, pad) = pad_to_square(&img, fill).unwrap();
            prop_assert_eq!(sq.height(), h.max(w));
            prop_assert_eq!(sq.width(), h.max(w));
            prop_assert_eq!(pad.crop(&sq).unwrap(), img);
        }
    }
}
