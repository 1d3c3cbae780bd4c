//! Image-similarity metrics for pair selection and benchmark scoring.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::{resize_bilinear, ImageBuf};

/// Side of the gray thumbnail used when scoring candidate frame pairs.
pub const SELECTION_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::invalid(format!("ssim window {} must be odd and >= 3", self.window)));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 || self.sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::invalid("ssim constants must be positive"));
        }
        Ok(())
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let r = (window / 2) as f64;
    let k: Vec<f64> = (0..window)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over Gaussian-weighted windows that lie fully inside the image.
/// Color inputs are averaged to gray. The window shrinks to the largest odd
/// size that fits when the image is smaller than `p.window`.
pub fn ssim(a: &ImageBuf, b: &ImageBuf, p: &SsimParams) -> Result<f64> {
    p.validate()?;
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::invalid(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("ssim of an empty image"));
    }
    let (h, w) = (a.height(), a.width());
    let fit = h.min(w);
    let window = if p.window <= fit { p.window } else if fit % 2 == 1 { fit } else { fit - 1 };
    let kernel = gaussian_kernel(window, p.sigma);
    let ga: Vec<f64> = a.to_gray().data().iter().map(|&v| v as f64).collect();
    let gb: Vec<f64> = b.to_gray().data().iter().map(|&v| v as f64).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let (mu_a, oh, ow) = filter_valid(&ga, h, w, &kernel);
    let (mu_b, ..) = filter_valid(&gb, h, w, &kernel);
    let (aa, ..) = filter_valid(&prod(&ga, &ga), h, w, &kernel);
    let (bb, ..) = filter_valid(&prod(&gb, &gb), h, w, &kernel);
    let (ab, ..) = filter_valid(&prod(&ga, &gb), h, w, &kernel);
    let c1 = (p.k1 * p.dynamic_range).powi(2);
    let c2 = (p.k2 * p.dynamic_range).powi(2);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = (aa[i] - ma * ma).max(0.0);
        let vb = (bb[i] - mb * mb).max(0.0);
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok((total / (oh * ow) as f64).clamp(-1.0, 1.0))
}

/// SSIM on `SELECTION_SIDE`-square gray thumbnails; the cheap rank-stable
/// indicator used for frame-pair selection.
pub fn selection_ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    let thumb = |img: &ImageBuf| resize_bilinear(&img.to_gray(), SELECTION_SIDE, SELECTION_SIDE);
    ssim(&thumb(a)?, &thumb(b)?, &SsimParams::default())
}

/// Peak signal-to-noise ratio for range 1.0; `f64::INFINITY` for identical inputs.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (1.0 / mse).log10()
}

pub fn mse(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.data().is_empty() {
        return Err(Error::invalid("mse of an empty image"));
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Tight bounding box of the mask's positive pixels, cropped from `img`, with
/// out-of-mask pixels inside the box zeroed.
pub fn masked_crop(img: &ImageBuf, mask: &ImageBuf) -> Result<ImageBuf> {
    if !mask.is_binary_mask() {
        return Err(Error::invalid("mask must be single-channel with values in {0, 1}"));
    }
    if (img.height(), img.width()) != (mask.height(), mask.width()) {
        return Err(Error::invalid("mask and image sizes differ"));
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x, 0) == 1.0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(Error::invalid("mask has no positive pixels"));
    }
    let mut out = img.crop(y0, x0, y1 - y0 + 1, x1 - x0 + 1)?;
    for y in y0..=y1 {
        for x in x0..=x1 {
            if mask.get(y, x, 0) == 0.0 {
                for c in 0..img.channels() {
                    out.set(y - y0, x - x0, c, 0.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.is_empty() || u.len() != v.len() {
        return Err(Error::invalid(format!(
            "embedding lengths must match and be nonzero ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 || !nu.is_finite() || !nv.is_finite() {
        return Err(Error::invalid("zero-norm embedding"));
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Metric names exchanged through score files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Ssim,
    Psnr,
    Lpips,
    DinoI,
    ClipI,
    ClipT,
}

impl MetricName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricName::Ssim => "ssim",
            MetricName::Psnr => "psnr",
            MetricName::Lpips => "lpips",
            MetricName::DinoI => "dino_i",
            MetricName::ClipI => "clip_i",
            MetricName::ClipT => "clip_t",
        }
    }

    /// Column heading used in rendered tables.
    pub fn heading(&self) -> &'static str {
        match self {
            MetricName::Ssim => "SSIM",
            MetricName::Psnr => "PSNR",
            MetricName::Lpips => "LPIPS",
            MetricName::DinoI => "DINO-I",
            MetricName::ClipI => "CLIP-I",
            MetricName::ClipT => "CLIP-T",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ssim" => MetricName::Ssim,
            "psnr" => MetricName::Psnr,
            "lpips" => MetricName::Lpips,
            "dino_i" => MetricName::DinoI,
            "clip_i" => MetricName::ClipI,
            "clip_t" => MetricName::ClipT,
            _ => return None,
        })
    }

    /// Whether `v` is admissible for this metric.
    pub fn in_range(&self, v: f64) -> bool {
        match self {
            MetricName::Ssim | MetricName::DinoI | MetricName::ClipI | MetricName::ClipT => {
                (-1.0..=1.0).contains(&v)
            }
            MetricName::Psnr => !v.is_nan(),
            MetricName::Lpips => v.is_finite() && v >= 0.0,
        }
    }
}

/// Per-image scores. Absent entries were not computed, never zero-filled.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    #[serde(default, with = "db_opt", skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default)]
    pub embed_scores: BTreeMap<MetricName, f64>,
}

/// Serializes decibel values, writing `+infinity` as the string `"inf"`.
pub mod db_opt {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => "inf".serialize(s),
            Some(x) => x.serialize(s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad decibel value {t:?}"))),
        }
    }
}

/// One line of a score file: `{"id": ..., "metric": ..., "value": ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub id: String,
    pub metric: String,
    pub value: f64,
}

/// Result of parsing a score file; malformed lines are itemized, not fatal.
#[derive(Debug, Default)]
pub struct ScoreFile {
    pub lines: Vec<ScoreLine>,
    pub errors: Vec<(usize, String)>,
}

pub fn read_score_file(path: impl AsRef<Path>) -> Result<ScoreFile> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = ScoreFile::default();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ScoreLine>(&line) {
            Ok(s) if s.value.is_finite() => out.lines.push(s),
            Ok(s) => out.errors.push((i + 1, format!("non-finite value for {}", s.id))),
            Err(e) => out.errors.push((i + 1, e.to_string())),
        }
    }
    Ok(out)
}

pub fn write_score_file(path: impl AsRef<Path>, lines: &[ScoreLine]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in lines {
        writeln!(f, "{}", serde_json::to_string(l)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn textured(h: usize, w: usize, s: u64) -> ImageBuf {
        let mut r = seed::rng(s);
        ImageBuf::from_fn(h, w, 1, |_, _, _| r.random::<f32>())
    }

    #[test]
    fn self_similarity_is_one() {
        let x = textured(32, 32, 1);
        assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn constant_images_match_closed_form() {
        let a = ImageBuf::filled(16, 16, 1, 0.5);
        let b = ImageBuf::filled(16, 16, 1, 0.6);
        // zero variance: only the luminance term survives
        let (ma, mb) = (0.5f32 as f64, 0.6f32 as f64);
        let c1 = 1e-4;
        let expect = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let got = ssim(&a, &b, &SsimParams::default()).unwrap();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        assert!((got - 0.9836).abs() < 1e-4);
    }

    #[test]
    fn anti_correlated_binary_is_negative() {
        let x = ImageBuf::from_fn(24, 24, 1, |y, x, _| ((x + y) % 2) as f32);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &inv, &SsimParams::default()).unwrap() < 0.0);
    }

    #[test]
    fn ssim_shape_mismatch() {
        let a = ImageBuf::filled(8, 8, 1, 0.0);
        let b = ImageBuf::filled(8, 9, 1, 0.0);
        assert!(matches!(ssim(&a, &b, &SsimParams::default()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ssim_params_validated() {
        let p = SsimParams { window: 4, ..Default::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn psnr_examples() {
        let z = ImageBuf::filled(4, 4, 1, 0.0);
        let o = ImageBuf::filled(4, 4, 1, 1.0);
        assert_eq!(psnr(&z, &z).unwrap(), f64::INFINITY);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        // uniform 0.1 offset, up to f32 rounding of the samples
        let a = ImageBuf::filled(4, 4, 1, 0.25);
        let b = ImageBuf::new(4, 4, 1, vec![0.25 + 0.1; 16]).unwrap();
        let m = mse(&a, &b).unwrap();
        let expect = 10.0 * (1.0 / m).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = textured(32, 32, 3).map(|v| 0.25 + 0.5 * v);
        let mut last = f64::INFINITY;
        for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
            let mut r = seed::rng(9);
            let noisy = ImageBuf::from_fn(32, 32, 1, |y, x, _| {
                base.get(y, x, 0) + amp * (r.random::<f32>() * 2.0 - 1.0)
            });
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last, "{p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn masked_crop_examples() {
        let img = ImageBuf::from_fn(6, 6, 1, |y, x, _| (y * 6 + x + 1) as f32 / 40.0);
        let full = ImageBuf::filled(6, 6, 1, 1.0);
        assert_eq!(masked_crop(&img, &full).unwrap(), img);

        let mut one = ImageBuf::filled(6, 6, 1, 0.0);
        one.set(3, 5, 0, 1.0);
        let c = masked_crop(&img, &one).unwrap();
        assert_eq!(c.dims(), (1, 1, 1));
        assert_eq!(c.get(0, 0, 0), img.get(3, 5, 0));

        // L shape: rows 1..=4 at col 1, plus row 4 cols 1..=3
        let mut l = ImageBuf::filled(6, 6, 1, 0.0);
        for y in 1..=4 {
            l.set(y, 1, 0, 1.0);
        }
        for x in 1..=3 {
            l.set(4, x, 0, 1.0);
        }
        let c = masked_crop(&img, &l).unwrap();
        assert_eq!(c.dims(), (4, 3, 1));
        for y in 0..4 {
            for x in 0..3 {
                let inside = x == 0 || y == 3;
                let expect = if inside { img.get(y + 1, x + 1, 0) } else { 0.0 };
                assert_eq!(c.get(y, x, 0), expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn masked_crop_rejects_empty_mask() {
        let img = ImageBuf::filled(4, 4, 3, 0.5);
        let m = ImageBuf::filled(4, 4, 1, 0.0);
        assert!(masked_crop(&img, &m).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn report_serializes_infinite_psnr() {
        let r = MetricReport {
            ssim: Some(1.0),
            psnr: Some(f64::INFINITY),
            embed_scores: BTreeMap::new(),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn score_file_itemizes_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(
            &p,
            "{\"id\":\"a\",\"metric\":\"clip_i\",\"value\":0.5}\nnot json\n\n{\"id\":\"b\",\"metric\":\"lpips\",\"value\":0.1}\n",
        )
        .unwrap();
        let f = read_score_file(&p).unwrap();
        assert_eq!(f.lines.len(), 2);
        assert_eq!(f.errors.len(), 1);
        assert_eq!(f.errors[0].0, 2);
    }

    proptest! {
        #[test]
        fn ssim_is_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let a = textured(20, 20, s1);
            let b = textured(20, 20, s2);
            let p = SsimParams::default();
            prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn cosine_scale_invariant(u in proptest::collection::vec(-5.0f64..5.0, 4), v in proptest::collection::vec(-5.0f64..5.0, 4), k in 0.01f64..100.0) {
            prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
            let base = cosine_similarity(&u, &v).unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| x * k).collect();
            prop_assert!((cosine_similarity(&scaled, &v).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn masked_crop_preserves_positive_pixels(bits in proptest::collection::vec(any::<bool>(), 49)) {
            prop_assume!(bits.iter().any(|&b| b));
            let img = ImageBuf::from_fn(7, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f32 / 147.0);
            let mask = ImageBuf::from_fn(7, 7, 1, |y, x, _| bits[y * 7 + x] as u8 as f32);
            let crop = masked_crop(&img, &mask).unwrap();
            let ys: Vec<usize> = (0..49).filter(|&i| bits[i]).map(|i| i / 7).collect();
            let xs: Vec<usize> = (0..49).filter(|&i| bits[i]).map(|i| i % 7).collect();
            let (y0, x0) = (*ys.iter().min().unwrap(), *xs.iter().min().unwrap());
            let bh = ys.iter().max().unwrap() - y0 + 1;
            let bw = xs.iter().max().unwrap() - x0 + 1;
            prop_assert_eq!((crop.height(), crop.width()), (bh, bw));
            for i in (0..49).filter(|&i| bits[i]) {
                let (y, x) = (i / 7, i % 7);
                prop_assert_eq!(crop.pixel(y - y0, x - x0), img.pixel(y, x));
            }
        }
    }
}
