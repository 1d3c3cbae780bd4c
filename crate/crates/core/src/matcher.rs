//! Simplified SIFT: difference-of-Gaussians detection over a fixed pyramid,
//! single dominant orientation, 4×4×8 gradient-histogram descriptors, and
//! brute-force ratio-test matching.
//!
//! Matches only bias mask placement downstream, so the detector favours
//! recall and determinism over sub-pixel pose accuracy.

use std::f32::consts::PI;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::ImageBuf;

pub const DESCRIPTOR_LEN: usize = 128;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const DESC_MAG_CLAMP: f32 = 0.2;
const ORI_BINS: usize = 36;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const ORI_RADIUS_FACTOR: f32 = 3.0 * ORI_SIGMA_FACTOR;
const DESC_SCALE_FACTOR: f32 = 3.0;
const MAX_INTERP_STEPS: usize = 5;
const BORDER: usize = 2;
pub const MIN_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiftParams {
    pub octaves: usize,
    pub scales_per_octave: usize,
    pub sigma: f32,
    /// Assumed blur of the input image.
    pub input_sigma: f32,
    pub contrast_threshold: f32,
    pub edge_ratio: f32,
    /// Double the image before building the pyramid.
    pub upsample: bool,
}

impl Default for SiftParams {
    fn default() -> Self {
        Self {
            octaves: 3,
            scales_per_octave: 3,
            sigma: 1.6,
            input_sigma: 0.5,
            contrast_threshold: 0.03,
            edge_ratio: 10.0,
            upsample: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    /// Blur scale in input-image pixels.
    pub scale: f32,
    /// Dominant gradient direction in `[0, 2π)`, image axes (y down).
    pub orientation: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor(pub [f32; DESCRIPTOR_LEN]);

impl Descriptor {
    pub fn distance(&self, other: &Descriptor) -> f32 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt()
    }

    pub fn norm(&self) -> f32 {
        self.0.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

pub type Feature = (Keypoint, Descriptor);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub source: Keypoint,
    pub reference: Keypoint,
    pub distance: f32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeypointMatchSet {
    pub matches: Vec<Match>,
}

impl KeypointMatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn sorted_by_distance(&self) -> Vec<Match> {
        let mut m = self.matches.clone();
        m.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        m
    }

    pub fn source_points(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        self.matches.iter().map(|m| (m.source.x, m.source.y))
    }

    /// One JSON object per match: `{"sx","sy","rx","ry","dist"}`.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Line {
            sx: f32,
            sy: f32,
            rx: f32,
            ry: f32,
            dist: f32,
        }
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for m in &self.matches {
            let line = Line {
                sx: m.source.x,
                sy: m.source.y,
                rx: m.reference.x,
                ry: m.reference.y,
                dist: m.distance,
            };
            writeln!(f, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Single-channel f32 plane.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f32>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f32 {
        self.v[y * self.w + x]
    }

    fn from_image(img: &ImageBuf) -> Self {
        let g = img.to_gray();
        Plane {
            h: g.height(),
            w: g.width(),
            v: g.into_data(),
        }
    }

    fn upsample2(&self) -> Plane {
        let (h, w) = (self.h * 2, self.w * 2);
        let mut v = Vec::with_capacity(h * w);
        let map = |i: usize, len: usize| {
            let s = ((i as f32 + 0.5) * 0.5 - 0.5).clamp(0.0, (len - 1) as f32);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(len - 1), s - i0 as f32)
        };
        for y in 0..h {
            let (y0, y1, fy) = map(y, self.h);
            for x in 0..w {
                let (x0, x1, fx) = map(x, self.w);
                let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
                let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
                v.push(top * (1.0 - fy) + bot * fy);
            }
        }
        Plane { h, w, v }
    }

    fn decimate(&self) -> Plane {
        let (h, w) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                v.push(self.at(2 * y, 2 * x));
            }
        }
        Plane { h, w, v }
    }

    fn blur(&self, sigma: f32) -> Plane {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (4.0 * sigma).ceil() as isize;
        let k: Vec<f32> = (-r..=r)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f32 = k.iter().sum();
        let k: Vec<f32> = k.into_iter().map(|v| v / s).collect();
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i.rem_euclid(period);
            (if m >= n { period - m } else { m }) as usize
        };
        let mut tmp = vec![0.0f32; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * self.at(y, reflect(x as isize + j as isize - r, self.w));
                }
                tmp[y * self.w + x] = acc;
            }
        }
        let mut v = vec![0.0f32; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    acc += kv * tmp[reflect(y as isize + j as isize - r, self.h) * self.w + x];
                }
                v[y * self.w + x] = acc;
            }
        }
        Plane {
            h: self.h,
            w: self.w,
            v,
        }
    }

    fn sub(&self, other: &Plane) -> Plane {
        Plane {
            h: self.h,
            w: self.w,
            v: self.v.iter().zip(&other.v).map(|(a, b)| a - b).collect(),
        }
    }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn build_pyramid(base: &Plane, p: &SiftParams) -> Vec<Octave> {
    let s = p.scales_per_octave;
    let k = 2f32.powf(1.0 / s as f32);
    let mut sigmas = vec![p.sigma];
    for i in 1..s + 3 {
        let prev = p.sigma * k.powi(i as i32 - 1);
        let total = prev * k;
        sigmas.push((total * total - prev * prev).sqrt());
    }
    let mut octaves: Vec<Octave> = Vec::with_capacity(p.octaves);
    for o in 0..p.octaves {
        let first = if o == 0 {
            base.clone()
        } else {
            let prev = &octaves[o - 1].gauss;
            prev[s].decimate()
        };
        if first.h < 2 * BORDER + 3 || first.w < 2 * BORDER + 3 {
            break;
        }
        let mut gauss = vec![first];
        for sig in sigmas.iter().skip(1) {
            let next = gauss.last().unwrap().blur(*sig);
            gauss.push(next);
        }
        let dog = gauss.windows(2).map(|w| w[1].sub(&w[0])).collect();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

struct Candidate {
    octave: usize,
    layer: usize,
    row: usize,
    col: usize,
    /// Refined coordinates in octave pixels and fractional layer.
    x: f32,
    y: f32,
    layer_f: f32,
}

fn is_extremum(dog: &[Plane], l: usize, r: usize, c: usize, threshold: f32) -> bool {
    let v = dog[l].at(r, c);
    if v.abs() <= threshold {
        return false;
    }
    for plane in &dog[l - 1..=l + 1] {
        for y in r - 1..=r + 1 {
            for x in c - 1..=c + 1 {
                let n = plane.at(y, x);
                if (v > 0.0 && n > v) || (v < 0.0 && n < v) {
                    return false;
                }
            }
        }
    }
    true
}

fn refine(oct: &Octave, o: usize, l: usize, r: usize, c: usize, p: &SiftParams) -> Option<Candidate> {
    let s = p.scales_per_octave;
    let dog = &oct.dog;
    let (h, w) = (dog[0].h, dog[0].w);
    let (mut l, mut r, mut c) = (l, r, c);
    for _ in 0..MAX_INTERP_STEPS {
        let d = |dl: isize, dr: isize, dc: isize| -> f32 {
            dog[(l as isize + dl) as usize].at((r as isize + dr) as usize, (c as isize + dc) as usize)
        };
        let g = [
            (d(0, 0, 1) - d(0, 0, -1)) * 0.5,
            (d(0, 1, 0) - d(0, -1, 0)) * 0.5,
            (d(1, 0, 0) - d(-1, 0, 0)) * 0.5,
        ];
        let v2 = 2.0 * d(0, 0, 0);
        let dxx = d(0, 0, 1) + d(0, 0, -1) - v2;
        let dyy = d(0, 1, 0) + d(0, -1, 0) - v2;
        let dss = d(1, 0, 0) + d(-1, 0, 0) - v2;
        let dxy = (d(0, 1, 1) - d(0, 1, -1) - d(0, -1, 1) + d(0, -1, -1)) * 0.25;
        let dxs = (d(1, 0, 1) - d(1, 0, -1) - d(-1, 0, 1) + d(-1, 0, -1)) * 0.25;
        let dys = (d(1, 1, 0) - d(1, -1, 0) - d(-1, 1, 0) + d(-1, -1, 0)) * 0.25;
        let hess = nalgebra::Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let grad = nalgebra::Vector3::new(g[0], g[1], g[2]);
        let off = -(hess.try_inverse()? * grad);
        if off.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if off.iter().all(|v| v.abs() < 0.5) {
            let contrast = d(0, 0, 0) + 0.5 * grad.dot(&off);
            if contrast.abs() * (s as f32) < p.contrast_threshold {
                return None;
            }
            let tr = dxx + dyy;
            let det = dxx * dyy - dxy * dxy;
            let er = p.edge_ratio;
            if det <= 0.0 || tr * tr * er >= (er + 1.0) * (er + 1.0) * det {
                return None;
            }
            return Some(Candidate {
                octave: o,
                layer: l,
                row: r,
                col: c,
                x: c as f32 + off[0],
                y: r as f32 + off[1],
                layer_f: l as f32 + off[2],
            });
        }
        let step = |v: f32| v.round() as isize;
        let nc = c as isize + step(off[0]);
        let nr = r as isize + step(off[1]);
        let nl = l as isize + step(off[2]);
        if nl < 1
            || nl > s as isize
            || nc < BORDER as isize
            || nr < BORDER as isize
            || nc >= (w - BORDER) as isize
            || nr >= (h - BORDER) as isize
        {
            return None;
        }
        (l, r, c) = (nl as usize, nr as usize, nc as usize);
    }
    None
}

fn gradient(img: &Plane, y: usize, x: usize) -> (f32, f32) {
    let dx = img.at(y, x + 1) - img.at(y, x - 1);
    let dy = img.at(y + 1, x) - img.at(y - 1, x);
    (dx, dy)
}

fn wrap_angle(a: f32) -> f32 {
    let t = a.rem_euclid(2.0 * PI);
    if t >= 2.0 * PI {
        0.0
    } else {
        t
    }
}

fn dominant_orientation(img: &Plane, cy: usize, cx: usize, sigma: f32) -> f32 {
    let radius = (ORI_RADIUS_FACTOR * sigma).round() as isize;
    let weight_sigma = ORI_SIGMA_FACTOR * sigma;
    let denom = -1.0 / (2.0 * weight_sigma * weight_sigma);
    let mut hist = [0.0f32; ORI_BINS];
    for dy in -radius..=radius {
        let y = cy as isize + dy;
        if y <= 0 || y >= img.h as isize - 1 {
            continue;
        }
        for dx in -radius..=radius {
            let x = cx as isize + dx;
            if x <= 0 || x >= img.w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, y as usize, x as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            let ang = wrap_angle(gy.atan2(gx));
            let bin = ((ang * ORI_BINS as f32 / (2.0 * PI)).round() as usize) % ORI_BINS;
            hist[bin] += (((dx * dx + dy * dy) as f32) * denom).exp() * mag;
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f32> = (0..n)
        .map(|i| {
            (hist[(i + n - 2) % n] + hist[(i + 2) % n]) * (1.0 / 16.0)
                + (hist[(i + n - 1) % n] + hist[(i + 1) % n]) * (4.0 / 16.0)
                + hist[i] * (6.0 / 16.0)
        })
        .collect();
    // first maximum wins ties, keeping the choice deterministic
    let (best, _) = smooth
        .iter()
        .enumerate()
        .fold((0, f32::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let left = smooth[(best + n - 1) % n];
    let right = smooth[(best + 1) % n];
    let peak = smooth[best];
    let denom = left - 2.0 * peak + right;
    let shift = if denom.abs() > 1e-12 { 0.5 * (left - right) / denom } else { 0.0 };
    wrap_angle((best as f32 + shift) * 2.0 * PI / n as f32)
}

fn describe(img: &Plane, yf: f32, xf: f32, ori: f32, sigma: f32) -> Option<Descriptor> {
    let d = DESC_WIDTH as f32;
    let n = DESC_BINS as f32;
    let hist_width = DESC_SCALE_FACTOR * sigma;
    let radius = ((hist_width * std::f32::consts::SQRT_2 * (d + 1.0) * 0.5).round() as isize)
        .min(((img.h * img.h + img.w * img.w) as f32).sqrt() as isize);
    let (sin_t, cos_t) = ori.sin_cos();
    let cx = xf.round() as isize;
    let cy = yf.round() as isize;
    let weight_denom = -1.0 / (2.0 * (0.5 * d) * (0.5 * d));
    let mut hist = vec![0.0f32; (DESC_WIDTH + 2) * (DESC_WIDTH + 2) * DESC_BINS];
    let idx = |r: usize, c: usize, o: usize| (r * (DESC_WIDTH + 2) + c) * DESC_BINS + o;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let x_rot = (cos_t * dx as f32 + sin_t * dy as f32) / hist_width;
            let y_rot = (-sin_t * dx as f32 + cos_t * dy as f32) / hist_width;
            let rbin = y_rot + d / 2.0 - 0.5;
            let cbin = x_rot + d / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let y = cy + dy;
            let x = cx + dx;
            if y <= 0 || x <= 0 || y >= img.h as isize - 1 || x >= img.w as isize - 1 {
                continue;
            }
            let (gx, gy) = gradient(img, y as usize, x as usize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let rel = wrap_angle(gy.atan2(gx) - ori);
            let obin = rel * n / (2.0 * PI);
            let w = ((x_rot * x_rot + y_rot * y_rot) * weight_denom).exp() * mag;

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            // shift by one so that bin -1 lands in the guard row/column
            let (r0, c0, o0) = ((r0 as isize + 1) as usize, (c0 as isize + 1) as usize, o0 as usize);
            for (ri, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (ci, wc) in [(0, 1.0 - fc), (1, fc)] {
                    for (oi, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let o = (o0 + oi) % DESC_BINS;
                        hist[idx(r0 + ri, c0 + ci, o)] += w * wr * wc * wo;
                    }
                }
            }
        }
    }
    let mut v = [0.0f32; DESCRIPTOR_LEN];
    for r in 0..DESC_WIDTH {
        for c in 0..DESC_WIDTH {
            for o in 0..DESC_BINS {
                v[(r * DESC_WIDTH + c) * DESC_BINS + o] = hist[idx(r + 1, c + 1, o)];
            }
        }
    }
    let norm = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    for a in v.iter_mut() {
        *a = (*a / norm).min(DESC_MAG_CLAMP);
    }
    let norm = v.iter().map(|a| a * a).sum::<f32>().sqrt();
    if !(norm > 1e-12) {
        return None;
    }
    for a in v.iter_mut() {
        *a /= norm;
    }
    Some(Descriptor(v))
}

/// Detects DoG keypoints and computes descriptors, sorted by `(y, x, scale)`.
pub fn detect_and_describe(img: &ImageBuf, p: &SiftParams) -> Result<Vec<Feature>> {
    if img.height().min(img.width()) < MIN_SIDE {
        return Err(Error::invalid(format!(
            "image {}x{} is smaller than the {MIN_SIDE}px minimum",
            img.height(),
            img.width()
        )));
    }
    if p.octaves == 0 || p.scales_per_octave == 0 || p.sigma <= 0.0 {
        return Err(Error::invalid("sift pyramid parameters must be positive"));
    }
    let mut base = Plane::from_image(img);
    let (orig_h, orig_w) = (base.h, base.w);
    let input_sigma = if p.upsample {
        base = base.upsample2();
        2.0 * p.input_sigma
    } else {
        p.input_sigma
    };
    let first = ((p.sigma * p.sigma - input_sigma * input_sigma).max(0.01)).sqrt();
    let base = base.blur(first);
    let octaves = build_pyramid(&base, p);
    let s = p.scales_per_octave;
    let threshold = 0.5 * p.contrast_threshold / s as f32;

    let candidates: Vec<Candidate> = octaves
        .par_iter()
        .enumerate()
        .flat_map_iter(|(o, oct)| {
            let (h, w) = (oct.dog[0].h, oct.dog[0].w);
            let mut found = Vec::new();
            for l in 1..=s {
                for r in BORDER..h - BORDER {
                    for c in BORDER..w - BORDER {
                        if is_extremum(&oct.dog, l, r, c, threshold) {
                            if let Some(cand) = refine(oct, o, l, r, c, p) {
                                found.push(cand);
                            }
                        }
                    }
                }
            }
            found
        })
        .collect();

    let to_input = |v: f32, octave: usize| -> f32 {
        let base = v * (1 << octave) as f32;
        if p.upsample {
            (base + 0.5) * 0.5 - 0.5
        } else {
            base
        }
    };
    let mut features: Vec<Feature> = candidates
        .par_iter()
        .filter_map(|cand| {
            let oct = &octaves[cand.octave];
            let sigma_oct = p.sigma * 2f32.powf(cand.layer_f / s as f32);
            let gimg = &oct.gauss[cand.layer];
            let ori = dominant_orientation(gimg, cand.row, cand.col, sigma_oct);
            let desc = describe(gimg, cand.y, cand.x, ori, sigma_oct)?;
            let x = to_input(cand.x, cand.octave);
            let y = to_input(cand.y, cand.octave);
            let mut scale = sigma_oct * (1 << cand.octave) as f32;
            if p.upsample {
                scale *= 0.5;
            }
            let inside = x >= 0.0 && y >= 0.0 && x <= (orig_w - 1) as f32 && y <= (orig_h - 1) as f32;
            inside.then_some((
                Keypoint {
                    x,
                    y,
                    scale,
                    orientation: ori,
                },
                desc,
            ))
        })
        .collect();
    features.sort_by(|a, b| {
        a.0.y
            .total_cmp(&b.0.y)
            .then(a.0.x.total_cmp(&b.0.x))
            .then(a.0.scale.total_cmp(&b.0.scale))
            .then(a.0.orientation.total_cmp(&b.0.orientation))
    });
    features.dedup_by(|a, b| a.0 == b.0);
    Ok(features)
}

/// Lowe ratio test: keep a source feature when its nearest reference
/// descriptor is closer than `ratio` times the second nearest.
pub fn match_ratio_test(src: &[Feature], reference: &[Feature], ratio: f32) -> Result<KeypointMatchSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("ratio {ratio} outside (0, 1)")));
    }
    if reference.len() < 2 {
        return Ok(KeypointMatchSet::default());
    }
    let matches = src
        .par_iter()
        .filter_map(|(kp, desc)| {
            let (mut best, mut second) = ((f32::INFINITY, usize::MAX), f32::INFINITY);
            for (j, (_, rd)) in reference.iter().enumerate() {
                let d = desc.distance(rd);
                if d < best.0 {
                    second = best.0;
                    best = (d, j);
                } else if d < second {
                    second = d;
                }
            }
            (best.0 < ratio * second).then(|| Match {
                source: *kp,
                reference: reference[best.1].0,
                distance: best.0,
            })
        })
        .collect();
    Ok(KeypointMatchSet { matches })
}

/// Convenience: detect on both images and match with the ratio test.
pub fn match_images(a: &ImageBuf, b: &ImageBuf, p: &SiftParams, ratio: f32) -> Result<KeypointMatchSet> {
    let fa = detect_and_describe(a, p)?;
    let fb = detect_and_describe(b, p)?;
    match_ratio_test(&fa, &fb, ratio)
}
