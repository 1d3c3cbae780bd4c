//! Fixed orthonormal patch codec standing in for a pretrained autoencoder.
//!
//! Each 8×8×3 patch of the centered image is projected onto four orthonormal
//! vectors: luma mean, two opponent-chroma means, and one horizontal luma
//! cosine. Decoding is the transpose, so `encode(decode(z)) == z` and
//! `decode(encode(x))` is the orthogonal projection of `x`.

use candle_core::{DType, Device, Tensor};

use mimicforge_core::ImageBuf;

use crate::error::{Error, Result};

pub const PATCH: usize = 8;
pub const LATENT_CHANNELS: usize = 4;
/// Keeps latent magnitudes near unit scale for inputs in `[0, 1]`.
pub const LATENT_SCALE: f64 = 0.25;
const CENTER: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    h: usize,
    w: usize,
    /// Channel-major `4 × h × w`.
    data: Vec<f32>,
}

impl Latent {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != LATENT_CHANNELS * h * w {
            return Err(Error::invalid(format!(
                "latent data length {} does not match 4x{h}x{w}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("latent contains non-finite values"));
        }
        Ok(Self { h, w, data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            data: vec![0.0; LATENT_CHANNELS * h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    /// `(1, 4, h, w)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), (1, LATENT_CHANNELS, self.h, self.w), device)?.to_dtype(dtype)?)
    }

    /// Reads one batch entry of a `(B, 4, h, w)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::invalid(format!("expected 4 latent channels, got {c}")));
        }
        let data = t.get(index)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Latent::new(h, w, data)
    }
}

/// Basis vector `k` evaluated at patch offset `(py, px)` and color channel `ch`.
fn basis(k: usize, _py: usize, px: usize, ch: usize) -> f64 {
    const LUMA: [f64; 3] = [1.0, 1.0, 1.0];
    const RG: [f64; 3] = [1.0, -1.0, 0.0];
    const YB: [f64; 3] = [1.0, 1.0, -2.0];
    let n = PATCH as f64;
    match k {
        0 => LUMA[ch] / (3.0 * n * n).sqrt(),
        1 => RG[ch] / 2f64.sqrt() / n,
        2 => YB[ch] / 6f64.sqrt() / n,
        3 => {
            let cos = (std::f64::consts::PI * (px as f64 + 0.5) / n).cos();
            LUMA[ch] / 3f64.sqrt() * cos / (n * n / 2.0).sqrt()
        }
        _ => unreachable!("codec has four basis vectors"),
    }
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % PATCH != 0 || w % PATCH != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not a positive multiple of {PATCH}"
        )));
    }
    Ok(())
}

/// Encodes a 3-channel (or gray, replicated) image whose sides are multiples of 8.
pub fn encode(img: &ImageBuf) -> Result<Latent> {
    let (h, w, c) = img.dims();
    check_dims(h, w)?;
    let rgb;
    let img = if c == 3 {
        img
    } else {
        rgb = img.to_rgb();
        &rgb
    };
    let (lh, lw) = (h / PATCH, w / PATCH);
    let mut data = vec![0.0f32; LATENT_CHANNELS * lh * lw];
    for ly in 0..lh {
        for lx in 0..lw {
            let mut acc = [0.0f64; LATENT_CHANNELS];
            for py in 0..PATCH {
                for px in 0..PATCH {
                    let pix = img.pixel(ly * PATCH + py, lx * PATCH + px);
                    for (ch, &v) in pix.iter().enumerate() {
                        let centered = v as f64 - CENTER;
                        for (k, a) in acc.iter_mut().enumerate() {
                            *a += centered * basis(k, py, px, ch);
                        }
                    }
                }
            }
            for (k, a) in acc.iter().enumerate() {
                data[(k * lh + ly) * lw + lx] = (a * LATENT_SCALE) as f32;
            }
        }
    }
    Latent::new(lh, lw, data)
}

/// Unclamped decode to interleaved RGB rows (`h·8 × w·8 × 3`).
pub fn decode_raw(lat: &Latent) -> Vec<f32> {
    let (h, w) = (lat.h * PATCH, lat.w * PATCH);
    let mut out = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let (ly, lx, py, px) = (y / PATCH, x / PATCH, y % PATCH, x % PATCH);
            for ch in 0..3 {
                let mut v = 0.0f64;
                for k in 0..LATENT_CHANNELS {
                    v += lat.get(k, ly, lx) as f64 / LATENT_SCALE * basis(k, py, px, ch);
                }
                out[(y * w + x) * 3 + ch] = (CENTER + v) as f32;
            }
        }
    }
    out
}

/// Encodes an unclamped interleaved RGB buffer; the inverse of [`decode_raw`].
pub fn encode_raw(h: usize, w: usize, rgb: &[f32]) -> Result<Latent> {
    check_dims(h, w)?;
    if rgb.len() != h * w * 3 {
        return Err(Error::invalid("raw buffer length does not match dims"));
    }
    let (lh, lw) = (h / PATCH, w / PATCH);
    let mut acc = vec![0.0f64; LATENT_CHANNELS * lh * lw];
    for y in 0..h {
        for x in 0..w {
            let (ly, lx, py, px) = (y / PATCH, x / PATCH, y % PATCH, x % PATCH);
            for ch in 0..3 {
                let centered = rgb[(y * w + x) * 3 + ch] as f64 - CENTER;
                for k in 0..LATENT_CHANNELS {
                    acc[(k * lh + ly) * lw + lx] += centered * basis(k, py, px, ch);
                }
            }
        }
    }
    Latent::new(lh, lw, acc.iter().map(|a| (a * LATENT_SCALE) as f32).collect())
}

/// Decodes to an image, clamping into `[0, 1]`.
pub fn decode(lat: &Latent) -> ImageBuf {
    let raw = decode_raw(lat);
    let w = lat.w * PATCH;
    ImageBuf::from_fn(lat.h * PATCH, w, 3, |y, x, c| raw[(y * w + x) * 3 + c])
}

/// Nearest latent of a displayable image: decode, clamp to `[0, 1]`, re-encode.
/// Latents of in-range images are fixed points (up to rounding).
pub fn project_valid(lat: &Latent) -> Result<Latent> {
    let raw: Vec<f32> = decode_raw(lat).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    encode_raw(lat.h * PATCH, lat.w * PATCH, &raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mimicforge_core::seed;
    use mimicforge_core::synthetic::noise_image;
    use rand::Rng;

    #[test]
    fn basis_is_orthonormal() {
        for a in 0..4 {
            for b in 0..4 {
                let mut dot = 0.0;
                for py in 0..PATCH {
                    for px in 0..PATCH {
                        for ch in 0..3 {
                            dot += basis(a, py, px, ch) * basis(b, py, px, ch);
                        }
                    }
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12, "<{a},{b}> = {dot}");
            }
        }
    }

    #[test]
    fn constant_gray_is_dc_only() {
        let img = ImageBuf::filled(16, 24, 3, 0.5);
        let z = encode(&img).unwrap();
        assert_eq!((z.height(), z.width()), (2, 3));
        let c0 = z.channel(0);
        assert!(c0.iter().all(|&v| v == c0[0]));
        for k in 1..4 {
            assert!(z.channel(k).iter().all(|&v| v == 0.0));
        }
        assert_eq!(decode(&z), img);

        let bright = encode(&ImageBuf::filled(8, 8, 3, 0.9)).unwrap();
        let expected = 0.4 * (192f64).sqrt() * LATENT_SCALE;
        assert!((bright.get(0, 0, 0) as f64 - expected).abs() < 1e-5);
    }

    #[test]
    fn encode_decode_latent_identity() {
        let mut rng = seed::rng(4);
        for _ in 0..20 {
            let data: Vec<f32> = (0..4 * 3 * 2).map(|_| rng.random_range(-3.0..3.0)).collect();
            let z = Latent::new(3, 2, data).unwrap();
            let back = encode_raw(24, 16, &decode_raw(&z)).unwrap();
            for (a, b) in z.data().iter().zip(back.data()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn projection_loses_noise_energy() {
        let img = noise_image(32, 32, 3, 8);
        let recon = decode_raw(&encode(&img).unwrap());
        let energy = |v: &mut dyn Iterator<Item = f32>| v.map(|x| (x as f64).powi(2)).sum::<f64>();
        let e_in = energy(&mut img.data().iter().copied());
        let e_out = energy(&mut recon.iter().copied());
        assert!(e_out < e_in);
    }

    #[test]
    fn projection_fixes_valid_latents_and_bounds_wild_ones() {
        let img = noise_image(16, 24, 3, 2);
        let z = encode(&img).unwrap();
        let p = project_valid(&z).unwrap();
        for (a, b) in z.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        let wild = Latent::new(2, 3, (0..24).map(|i| (i as f32 - 12.0) * 3.0).collect()).unwrap();
        let p = project_valid(&wild).unwrap();
        // largest |coefficient| any image in [0, 1] can produce, per channel
        for k in 0..LATENT_CHANNELS {
            let mut l1 = 0.0;
            for py in 0..PATCH {
                for px in 0..PATCH {
                    for ch in 0..3 {
                        l1 += basis(k, py, px, ch).abs();
                    }
                }
            }
            let bound = (0.5 * l1 * LATENT_SCALE) as f32 + 1e-5;
            assert!(p.channel(k).iter().all(|v| v.abs() <= bound), "channel {k} exceeds {bound}");
        }
    }

    #[test]
    fn indivisible_dims_rejected() {
        assert!(encode(&ImageBuf::filled(12, 16, 3, 0.1)).is_err());
        assert!(Latent::new(2, 2, vec![0.0; 15]).is_err());
    }

    #[test]
    fn tensor_round_trip() {
        let z = encode(&noise_image(16, 16, 3, 1)).unwrap();
        let t = z.to_tensor(DType::F64, &Device::Cpu).unwrap();
        assert_eq!(Latent::from_tensor(&t, 0).unwrap(), z);
    }
}
