//! Source-image masking: N×N grid masks whose cells are dropped more often
//! where SIFT matches land, and dilated object masks for pseudo pairs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgcore::ImageBuf;
use crate::matcher::KeypointMatchSet;
use crate::seed;

const MAX_RESAMPLES: usize = 20;
pub const MIN_GRID_SIDE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskPolicy {
    /// Probability of masking a cell holding at least one matched keypoint.
    pub p_matched: f64,
    /// Probability of masking any other cell.
    pub p_other: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self {
            p_matched: 0.75,
            p_other: 0.5,
            n_min: 3,
            n_max: 10,
        }
    }
}

impl MaskPolicy {
    pub fn with_fixed_grid(mut self, n: usize) -> Self {
        self.n_min = n;
        self.n_max = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_matched", self.p_matched), ("p_other", self.p_other)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if self.n_min < 2 || self.n_min > self.n_max {
            return Err(Error::invalid(format!(
                "grid range {}..={} invalid",
                self.n_min, self.n_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridMask {
    pub n: usize,
    /// Row-major `n × n`, `true` = masked.
    pub cell_flags: Vec<bool>,
    pub rendered: ImageBuf,
    /// Draw rounds used before acceptance (a forced fix counts as one extra).
    pub attempts: usize,
}

/// JSON sidecar written next to a rendered grid mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub n: usize,
    pub cell_flags: Vec<Vec<bool>>,
}

impl GridMask {
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.cell_flags[row * self.n + col]
    }

    pub fn sidecar(&self) -> GridSidecar {
        GridSidecar {
            n: self.n,
            cell_flags: self.cell_flags.chunks(self.n).map(|r| r.to_vec()).collect(),
        }
    }
}

/// Cell span along one axis; the last cell absorbs the remainder.
pub fn cell_span(len: usize, n: usize, i: usize) -> (usize, usize) {
    let size = len / n;
    let start = i * size;
    let end = if i + 1 == n { len } else { start + size };
    (start, end)
}

/// Cell index along one axis for pixel coordinate `p`.
pub fn cell_of(len: usize, n: usize, p: usize) -> usize {
    (p / (len / n)).min(n - 1)
}

/// Cells containing at least one source-side keypoint of `matches`.
pub fn matched_cells(h: usize, w: usize, n: usize, matches: &KeypointMatchSet) -> Vec<bool> {
    let mut hit = vec![false; n * n];
    for (x, y) in matches.source_points() {
        if !x.is_finite() || !y.is_finite() {
            continue;
        }
        let px = (x.round().max(0.0) as usize).min(w - 1);
        let py = (y.round().max(0.0) as usize).min(h - 1);
        hit[cell_of(h, n, py) * n + cell_of(w, n, px)] = true;
    }
    hit
}

/// Per-cell threshold comparison: cell `i` is masked iff `u[i] < p(i)`.
/// Raising a threshold can only add masked cells for the same draws.
pub fn threshold_flags(uniforms: &[f64], matched: &[bool], policy: &MaskPolicy) -> Vec<bool> {
    uniforms
        .iter()
        .zip(matched)
        .map(|(&u, &m)| u < if m { policy.p_matched } else { policy.p_other })
        .collect()
}

pub fn render_grid(h: usize, w: usize, n: usize, flags: &[bool]) -> ImageBuf {
    let mut out = ImageBuf::filled(h, w, 1, 0.0);
    for r in 0..n {
        let (y0, y1) = cell_span(h, n, r);
        for c in 0..n {
            if !flags[r * n + c] {
                continue;
            }
            let (x0, x1) = cell_span(w, n, c);
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set(y, x, 0, 1.0);
                }
            }
        }
    }
    out
}

/// Draws an N×N grid mask. Degenerate (all/none masked) draws are redrawn up
/// to 20 times, then fixed by flipping one uniformly chosen cell.
pub fn grid_mask(
    h: usize,
    w: usize,
    matches: &KeypointMatchSet,
    policy: &MaskPolicy,
    rng_seed: u64,
) -> Result<GridMask> {
    policy.validate()?;
    if h < MIN_GRID_SIDE || w < MIN_GRID_SIDE {
        return Err(Error::invalid(format!(
            "grid masking needs at least {MIN_GRID_SIDE}x{MIN_GRID_SIDE}, got {h}x{w}"
        )));
    }
    let mut rng = seed::rng(rng_seed);
    let n = rng.random_range(policy.n_min..=policy.n_max).min(h).min(w);
    let matched = matched_cells(h, w, n, matches);
    let cells = n * n;
    let mut flags = Vec::new();
    let mut attempts = 0;
    for _ in 0..MAX_RESAMPLES {
        attempts += 1;
        let u: Vec<f64> = (0..cells).map(|_| rng.random()).collect();
        flags = threshold_flags(&u, &matched, policy);
        let masked = flags.iter().filter(|&&f| f).count();
        if masked > 0 && masked < cells {
            return Ok(GridMask {
                n,
                rendered: render_grid(h, w, n, &flags),
                cell_flags: flags,
                attempts,
            });
        }
    }
    let flip = rng.random_range(0..cells);
    flags[flip] = !flags[flip];
    Ok(GridMask {
        n,
        rendered: render_grid(h, w, n, &flags),
        cell_flags: flags,
        attempts: attempts + 1,
    })
}

/// Dilation by `radius` in the 4-connected (L1) metric.
pub fn dilate(mask: &ImageBuf, radius: usize) -> ImageBuf {
    let (h, w, _) = mask.dims();
    let mut cur = mask.clone();
    for _ in 0..radius {
        let prev = cur.clone();
        for y in 0..h {
            for x in 0..w {
                if prev.get(y, x, 0) == 1.0 {
                    continue;
                }
                let on = (y > 0 && prev.get(y - 1, x, 0) == 1.0)
                    || (y + 1 < h && prev.get(y + 1, x, 0) == 1.0)
                    || (x > 0 && prev.get(y, x - 1, 0) == 1.0)
                    || (x + 1 < w && prev.get(y, x + 1, 0) == 1.0);
                if on {
                    cur.set(y, x, 0, 1.0);
                }
            }
        }
        if cur == prev {
            break;
        }
    }
    cur
}

fn check_mask(mask: &ImageBuf) -> Result<()> {
    if !mask.is_binary_mask() {
        return Err(Error::invalid("mask must be single-channel with values in {0, 1}"));
    }
    Ok(())
}

/// Object mask with a seeded dilation radius drawn uniformly from `0..=max_dilate`.
pub fn segmentation_mask(still_mask: &ImageBuf, max_dilate: usize, rng_seed: u64) -> Result<ImageBuf> {
    check_mask(still_mask)?;
    if still_mask.count_positive() == 0 {
        return Err(Error::invalid("segmentation mask is empty"));
    }
    let radius = seed::rng(rng_seed).random_range(0..=max_dilate);
    Ok(dilate(still_mask, radius))
}

/// Zeroes every channel where the mask is 1.
pub fn apply_mask(img: &ImageBuf, mask: &ImageBuf) -> Result<ImageBuf> {
    check_mask(mask)?;
    if (img.height(), img.width()) != (mask.height(), mask.width()) {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if mask.get(y, x, 0) == 1.0 {
                for c in 0..img.channels() {
                    out.set(y, x, c, 0.0);
                }
            }
        }
    }
    Ok(out)
}
