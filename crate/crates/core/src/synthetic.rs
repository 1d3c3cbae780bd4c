//! Procedural test data: textured "natural" images, short videos of colored
//! shapes moving over a panning textured background, and segmented stills.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imgcore::ImageBuf;
use crate::seed;

/// Hash-lattice value noise with smoothstep interpolation; defined on the
/// whole plane so a camera can pan over it.
#[derive(Debug, Clone, Copy)]
pub struct ValueNoise {
    seed: u64,
    period: f32,
}

impl ValueNoise {
    pub fn new(seed: u64, period: f32) -> Self {
        Self { seed, period }
    }

    fn lattice(&self, ix: i64, iy: i64) -> f32 {
        let h = seed::mix(seed::mix(self.seed ^ ix as u64) ^ (iy as u64).wrapping_mul(0x85EB_CA6B));
        (h >> 40) as f32 / (1u64 << 24) as f32
    }

    pub fn sample(&self, x: f32, y: f32) -> f32 {
        let (u, v) = (x / self.period, y / self.period);
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        let s = |t: f32| t * t * (3.0 - 2.0 * t);
        let (sx, sy) = (s(fx), s(fy));
        let (ix, iy) = (x0 as i64, y0 as i64);
        let a = self.lattice(ix, iy);
        let b = self.lattice(ix + 1, iy);
        let c = self.lattice(ix, iy + 1);
        let d = self.lattice(ix + 1, iy + 1);
        let top = a + (b - a) * sx;
        let bot = c + (d - c) * sx;
        top + (bot - top) * sy
    }
}

/// Multi-octave colored texture.
#[derive(Debug, Clone)]
pub struct Texture {
    layers: Vec<(ValueNoise, f32)>,
    base: [f32; 3],
    tint: [[f32; 3]; 2],
}

impl Texture {
    pub fn random(seed_value: u64, scale: f32) -> Self {
        let mut rng = seed::rng(seed_value);
        // octaves down to a ~2px period
        let octaves = ((scale / 2.0).log2().floor() as i32 + 1).clamp(2, 7);
        let layers = (0..octaves)
            .map(|i| {
                let period = scale / 2f32.powi(i);
                (ValueNoise::new(rng.random(), period.max(1.5)), 0.6f32.powi(i))
            })
            .collect();
        let base = std::array::from_fn(|_| rng.random_range(0.2..0.8));
        let tint = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-0.35..0.35)));
        Self { layers, base, tint }
    }

    pub fn sample(&self, x: f32, y: f32) -> [f32; 3] {
        let total: f32 = self.layers.iter().map(|l| l.1).sum();
        let n1 = self.layers.iter().map(|(n, w)| n.sample(x, y) * w).sum::<f32>() / total - 0.5;
        let n2 = self.layers[0].0.sample(y + 101.0, x - 37.0) - 0.5;
        std::array::from_fn(|c| self.base[c] + 1.6 * self.tint[0][c] * n1 * 2.0 + self.tint[1][c] * n2 * 2.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
    pub angle: f32,
    pub color: [f32; 3],
}

impl Shape {
    pub fn random(rng: &mut impl Rng, h: usize, w: usize) -> Self {
        let side = h.min(w) as f32;
        let kind = match rng.random_range(0..3) {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        let radius = rng.random_range(0.16 * side..0.28 * side);
        Self {
            kind,
            cx: rng.random_range(radius..w as f32 - radius),
            cy: rng.random_range(radius..h as f32 - radius),
            radius,
            angle: rng.random_range(0.0..std::f32::consts::TAU),
            color: saturated_color(rng),
        }
    }

    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Disk => u * u + v * v <= self.radius * self.radius,
            ShapeKind::Square => {
                let r = self.radius * 0.85;
                u.abs() <= r && v.abs() <= r
            }
            ShapeKind::Triangle => {
                let r = self.radius;
                // equilateral, pointing along +u
                let a = (r, 0.0);
                let b = (-0.5 * r, 0.866 * r);
                let cc = (-0.5 * r, -0.866 * r);
                let side = |p: (f32, f32), q: (f32, f32)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
                side(a, b) >= 0.0 && side(b, cc) >= 0.0 && side(cc, a) >= 0.0
            }
        }
    }
}

fn saturated_color(rng: &mut impl Rng) -> [f32; 3] {
    let hue = rng.random_range(0.0..6.0f32);
    let sector = hue.floor() as i32;
    let f = hue - sector as f32;
    let (hi, lo) = (rng.random_range(0.75..0.98), rng.random_range(0.02..0.2));
    let mid_up = lo + (hi - lo) * f;
    let mid_down = hi - (hi - lo) * f;
    match sector {
        0 => [hi, mid_up, lo],
        1 => [mid_down, hi, lo],
        2 => [lo, hi, mid_up],
        3 => [lo, mid_down, hi],
        4 => [mid_up, lo, hi],
        _ => [hi, lo, mid_down],
    }
}

/// Dense, edge-rich test picture: layered texture plus a handful of shapes.
pub fn natural_image(h: usize, w: usize, seed_value: u64) -> ImageBuf {
    let tex = Texture::random(seed::derive(seed_value, 1), (h.max(w) as f32 / 3.0).max(4.0));
    let mut rng = seed::rng(seed::derive(seed_value, 2));
    let n_shapes = 3 + (h * w / 1024).min(60);
    let shapes: Vec<Shape> = (0..n_shapes)
        .map(|_| {
            let mut s = Shape::random(&mut rng, h, w);
            s.radius *= rng.random_range(0.12..0.6);
            s
        })
        .collect();
    let mut px = vec![[0.0f32; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32, y as f32);
            let mut c = tex.sample(fx, fy);
            for s in &shapes {
                if s.contains(fx, fy) {
                    let shade = 0.85 + 0.15 * tex.sample(fy * 1.7, fx * 1.3)[0];
                    c = std::array::from_fn(|k| s.color[k] * shade);
                }
            }
            px[y * w + x] = c;
        }
    }
    ImageBuf::from_fn(h, w, 3, |y, x, c| px[y * w + x][c])
}

/// Parameters of one synthetic clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub size: usize,
    pub frames: usize,
    /// Maximum camera pan per frame, in pixels.
    pub pan_speed: f32,
    /// Maximum shape speed per frame, in pixels.
    pub shape_speed: f32,
    pub max_spin: f32,
}

impl Default for VideoSpec {
    fn default() -> Self {
        Self {
            size: 32,
            frames: 12,
            pan_speed: 0.8,
            shape_speed: 1.2,
            max_spin: 0.12,
        }
    }
}

/// One clip: RGB frames plus a synthetic 1-channel depth map per frame
/// (shapes near, background far).
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub frames: Vec<ImageBuf>,
    pub depth: Vec<ImageBuf>,
}

pub fn moving_shapes_video(spec: &VideoSpec, seed_value: u64) -> SyntheticVideo {
    let n = spec.size;
    let mut rng = seed::rng(seed_value);
    let tex = Texture::random(rng.random(), n as f32 / 2.5);
    let n_shapes = rng.random_range(1..=2);
    let mut shapes: Vec<(Shape, f32, f32, f32)> = (0..n_shapes)
        .map(|_| {
            let s = Shape::random(&mut rng, n, n);
            let vx = rng.random_range(-spec.shape_speed..=spec.shape_speed);
            let vy = rng.random_range(-spec.shape_speed..=spec.shape_speed);
            let spin = rng.random_range(-spec.max_spin..=spec.max_spin);
            (s, vx, vy, spin)
        })
        .collect();
    let pan = (
        rng.random_range(-spec.pan_speed..=spec.pan_speed),
        rng.random_range(-spec.pan_speed..=spec.pan_speed),
    );
    let mut frames = Vec::with_capacity(spec.frames);
    let mut depth = Vec::with_capacity(spec.frames);
    for f in 0..spec.frames {
        let (ox, oy) = (pan.0 * f as f32, pan.1 * f as f32);
        let mut px = vec![[0.0f32; 3]; n * n];
        let mut dp = vec![0.0f32; n * n];
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f32, y as f32);
                px[y * n + x] = tex.sample(fx + ox, fy + oy);
                dp[y * n + x] = 0.2 + 0.2 * fy / n as f32;
                for (i, (s, ..)) in shapes.iter().enumerate() {
                    if s.contains(fx, fy) {
                        px[y * n + x] = s.color;
                        dp[y * n + x] = 0.8 + 0.1 * i as f32;
                    }
                }
            }
        }
        frames.push(ImageBuf::from_fn(n, n, 3, |y, x, c| px[y * n + x][c]));
        depth.push(ImageBuf::from_fn(n, n, 1, |y, x, _| dp[y * n + x]));
        for (s, vx, vy, spin) in shapes.iter_mut() {
            s.cx += *vx;
            s.cy += *vy;
            s.angle += *spin;
            // bounce off the frame edges
            if s.cx < s.radius * 0.5 || s.cx > n as f32 - s.radius * 0.5 {
                *vx = -*vx;
            }
            if s.cy < s.radius * 0.5 || s.cy > n as f32 - s.radius * 0.5 {
                *vy = -*vy;
            }
        }
    }
    SyntheticVideo { frames, depth }
}

/// A still image with per-object binary masks.
pub fn segmented_still(size: usize, seed_value: u64) -> (ImageBuf, Vec<ImageBuf>) {
    let mut rng = seed::rng(seed_value);
    let tex = Texture::random(rng.random(), size as f32 / 2.5);
    let count = rng.random_range(1..=3);
    let shapes: Vec<Shape> = (0..count).map(|_| Shape::random(&mut rng, size, size)).collect();
    let mut owner = vec![usize::MAX; size * size];
    for y in 0..size {
        for x in 0..size {
            for (i, s) in shapes.iter().enumerate() {
                if s.contains(x as f32, y as f32) {
                    owner[y * size + x] = i;
                }
            }
        }
    }
    let image = ImageBuf::from_fn(size, size, 3, |y, x, c| match owner[y * size + x] {
        usize::MAX => tex.sample(x as f32, y as f32)[c],
        i => shapes[i].color[c],
    });
    let masks = (0..count)
        .map(|i| ImageBuf::from_fn(size, size, 1, |y, x, _| (owner[y * size + x] == i) as u8 as f32))
        .filter(|m| m.count_positive() > 0)
        .collect();
    (image, masks)
}

/// Uniform i.i.d. noise image.
pub fn noise_image(h: usize, w: usize, channels: usize, seed_value: u64) -> ImageBuf {
    let mut rng = seed::rng(seed_value);
    ImageBuf::from_fn(h, w, channels, |_, _, _| rng.random())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(natural_image(32, 40, 3), natural_image(32, 40, 3));
        let a = moving_shapes_video(&VideoSpec::default(), 9);
        let b = moving_shapes_video(&VideoSpec::default(), 9);
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frames.len(), 12);
        assert_eq!(a.depth[0].channels(), 1);
    }

    #[test]
    fn video_frames_change_over_time() {
        let v = moving_shapes_video(&VideoSpec::default(), 4);
        assert_ne!(v.frames[0], v.frames[5]);
    }

    #[test]
    fn stills_have_nonempty_masks() {
        for s in 0..20 {
            let (img, masks) = segmented_still(32, s);
            assert!(!masks.is_empty());
            for m in &masks {
                assert!(m.is_binary_mask());
                assert_eq!((m.height(), m.width()), (img.height(), img.width()));
            }
        }
    }
}
