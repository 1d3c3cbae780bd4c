use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use super::ImageBuf;
use crate::error::{Error, Result};

const MIN_ABS_DET: f64 = 1e-9;

/// Planar projective transform acting on pixel-center coordinates `(x, y)`,
/// stored with `m[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation by `angle` radians and isotropic `scale` about `(cx, cy)`.
    pub fn similarity_about(cx: f64, cy: f64, angle: f64, scale: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let a = scale * c;
        let b = scale * s;
        Self {
            m: [
                [a, -b, cx - a * cx + b * cy],
                [b, a, cy - b * cx - a * cy],
                [0.0, 0.0, 1.0],
            ],
        }
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        Self::from_nalgebra(Matrix3::from_fn(|r, c| m[r][c]))
    }

    fn from_nalgebra(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography has non-finite entries"));
        }
        let corner = m[(2, 2)];
        if corner.abs() < 1e-12 {
            return Err(Error::invalid("homography cannot be normalized: m[2][2] = 0"));
        }
        let m = m / corner;
        if m.determinant().abs() <= MIN_ABS_DET {
            return Err(Error::invalid("homography is singular"));
        }
        Ok(Self {
            m: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        })
    }

    fn to_nalgebra(self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn determinant(&self) -> f64 {
        self.to_nalgebra().determinant()
    }

    pub fn invert(&self) -> Result<Self> {
        let inv = self
            .to_nalgebra()
            .try_inverse()
            .ok_or_else(|| Error::invalid("homography is singular"))?;
        Self::from_nalgebra(inv)
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_nalgebra(self.to_nalgebra() * other.to_nalgebra())
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let v = self.to_nalgebra() * Vector3::new(x, y, 1.0);
        if v.z.abs() < 1e-12 {
            return None;
        }
        Some((v.x / v.z, v.y / v.z))
    }

    /// Exact four-point direct linear transform with `h33` fixed to 1:
    /// the 8×8 system `A h = b` built from `dst ~ H src`.
    pub fn from_four_points(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Result<Self> {
        let mut a = SMatrix::<f64, 8, 8>::zeros();
        let mut b = SVector::<f64, 8>::zeros();
        for (i, (&(x, y), &(u, v))) in src.iter().zip(dst.iter()).enumerate() {
            let r = 2 * i;
            a.row_mut(r)
                .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
            a.row_mut(r + 1)
                .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
            b[r] = u;
            b[r + 1] = v;
        }
        let lu = a.lu();
        let h = lu
            .solve(&b)
            .filter(|h| h.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::invalid("degenerate point configuration"))?;
        Self::from_matrix([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]])
    }
}

/// Fill rule for samples that fall outside the input raster.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BorderMode {
    /// Constant fill (0 matches masked-region semantics downstream).
    Constant(f32),
    #[default]
    Zero,
    Replicate,
}

/// Inverse-mapping warp: output pixel `p` samples the input at `h⁻¹(p)` with
/// bilinear interpolation; taps outside the input take the border value.
pub fn warp_perspective(
    img: &ImageBuf,
    h: &Homography,
    out_h: usize,
    out_w: usize,
    border: BorderMode,
) -> Result<ImageBuf> {
    if out_h == 0 || out_w == 0 || img.is_empty() {
        return Err(Error::invalid("warp needs non-empty input and output"));
    }
    if h.determinant().abs() <= MIN_ABS_DET {
        return Err(Error::invalid("homography is singular"));
    }
    let inv = h.invert()?;
    let (ih, iw, c) = img.dims();
    let fill = match border {
        BorderMode::Constant(v) => v,
        _ => 0.0,
    };
    let tap = |y: i64, x: i64, k: usize| -> f32 {
        if border == BorderMode::Replicate {
            let y = y.clamp(0, ih as i64 - 1) as usize;
            let x = x.clamp(0, iw as i64 - 1) as usize;
            return img.get(y, x, k);
        }
        if y < 0 || x < 0 || y >= ih as i64 || x >= iw as i64 {
            fill
        } else {
            img.get(y as usize, x as usize, k)
        }
    };
    let mut out = ImageBuf::filled(out_h, out_w, c, 0.0);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let Some((sx, sy)) = inv.apply(ox as f64, oy as f64) else {
                for k in 0..c {
                    out.set(oy, ox, k, fill);
                }
                continue;
            };
            // far outside: skip the taps entirely
            if !(sx > -2.0 && sy > -2.0 && sx < iw as f64 + 1.0 && sy < ih as f64 + 1.0)
                && border != BorderMode::Replicate
            {
                for k in 0..c {
                    out.set(oy, ox, k, fill);
                }
                continue;
            }
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let (x0, y0) = (x0 as i64, y0 as i64);
            for k in 0..c {
                let mut v = tap(y0, x0, k) * (1.0 - fx) * (1.0 - fy);
                if fx != 0.0 {
                    v += tap(y0, x0 + 1, k) * fx * (1.0 - fy);
                }
                if fy != 0.0 {
                    v += tap(y0 + 1, x0, k) * (1.0 - fx) * fy;
                    if fx != 0.0 {
                        v += tap(y0 + 1, x0 + 1, k) * fx * fy;
                    }
                }
                out.set(oy, ox, k, v);
            }
        }
    }
    Ok(out)
}
