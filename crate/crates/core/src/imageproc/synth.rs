//! Seeded synthetic data: irregular hole masks, smooth textures standing in
//! for healthy tissue, and bright blobs with labels standing in for tumors.
//!
//! Item `i` of every generator draws from its own stream derived from
//! `(seed, i)`, so items can be produced in parallel and any prefix of a
//! list equals the shorter list.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::{BinaryMask, GrayImage, ImageError, LabelMap, Result};
use crate::par;

const MASK_STREAM: u64 = 1;
const TEXTURE_STREAM: u64 = 2;
const BLOB_STREAM: u64 = 3;
const MAX_ATTEMPTS: usize = 200;

fn item_rng(seed: u64, stream: u64, index: usize) -> Xoshiro256PlusPlus {
    let mixed = seed
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03);
    Xoshiro256PlusPlus::seed_from_u64(mixed)
}

/// Closed interval of allowed hole fractions, inside `(0, 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverageRange {
    pub min: f64,
    pub max: f64,
}

impl Default for CoverageRange {
    fn default() -> Self {
        CoverageRange {
            min: 0.05,
            max: 0.25,
        }
    }
}

impl CoverageRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        let r = CoverageRange { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.min <= self.max && self.max < 0.5) {
            return Err(ImageError::Generation(format!(
                "coverage range [{}, {}] must satisfy 0 < min <= max < 0.5",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn contains(&self, f: f64) -> bool {
        (self.min..=self.max).contains(&f)
    }
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut Xoshiro256PlusPlus, cx: f64, cy: f64, r: f64) -> Self {
        let t = rng.random_range(0.0..PI);
        Ellipse {
            cx,
            cy,
            rx: (r * rng.random_range(0.7..1.4)).max(1.5),
            ry: (r * rng.random_range(0.7..1.4)).max(1.5),
            cos: t.cos(),
            sin: t.sin(),
        }
    }

    /// Quadratic form: < 1 inside, 1 on the boundary.
    fn q(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }

    fn scaled(&self, k: f64) -> Self {
        Ellipse {
            rx: (self.rx * k).max(1.0),
            ry: (self.ry * k).max(1.0),
            ..*self
        }
    }
}

/// 4-connectivity of the `true` pixels.
fn is_connected(region: &[bool], w: usize, h: usize) -> bool {
    let Some(start) = region.iter().position(|&r| r) else {
        return false;
    };
    let mut seen = vec![false; region.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(i) = stack.pop() {
        count += 1;
        let (x, y) = (i % w, i / w);
        let mut push = |j: usize| {
            if region[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
    count == region.iter().filter(|&&r| r).count()
}

/// One attempt at a hole: ellipses placed along a random walk whose every
/// step stays inside the previous ellipse, clipped to a 1-pixel margin.
fn try_mask(
    rng: &mut Xoshiro256PlusPlus,
    w: usize,
    h: usize,
    coverage: &CoverageRange,
) -> Option<Vec<bool>> {
    let area = (w * h) as f64;
    let target = rng.random_range(coverage.min..=coverage.max);
    let (lo, hi) = ((coverage.min * area).ceil(), (coverage.max * area).floor());
    let r0 = (target * area / (4.0 * PI)).sqrt();
    let mut hole = vec![false; w * h];
    let mut count = 0usize;
    let mut cx = rng.random_range(1..w - 1) as f64;
    let mut cy = rng.random_range(1..h - 1) as f64;
    for _ in 0..64 {
        let mut e = Ellipse::random(rng, cx, cy, r0);
        let mut added = None;
        for _ in 0..6 {
            let mut next = hole.clone();
            let mut n = count;
            for y in 1..h - 1 {
                for x in 1..w - 1 {
                    let i = y * w + x;
                    if !next[i] && e.q(x as f64, y as f64) <= 1.0 {
                        next[i] = true;
                        n += 1;
                    }
                }
            }
            if n as f64 <= hi {
                added = Some((next, n));
                break;
            }
            e = e.scaled(0.6);
        }
        let (next, n) = added?;
        hole = next;
        count = n;
        if count as f64 >= (target * area).max(lo) {
            break;
        }
        for _ in 0..16 {
            let a = rng.random_range(0.0..2.0 * PI);
            let d = rng.random_range(0.4..0.95) * e.rx.min(e.ry);
            let nx = (cx + d * a.cos()).round();
            let ny = (cy + d * a.sin()).round();
            if nx >= 1.0
                && ny >= 1.0
                && nx <= (w - 2) as f64
                && ny <= (h - 2) as f64
                && e.q(nx, ny) < 1.0
            {
                cx = nx;
                cy = ny;
                break;
            }
        }
    }
    let ok = (count as f64) >= lo && (count as f64) <= hi && is_connected(&hole, w, h);
    ok.then_some(hole)
}

/// `count` masks whose single connected hole covers a fraction of the
/// image inside `coverage` and never touches the border.
pub fn synthesize_masks(
    seed: u64,
    width: usize,
    height: usize,
    count: usize,
    coverage: CoverageRange,
) -> Result<Vec<BinaryMask>> {
    coverage.validate()?;
    if width < 3 || height < 3 {
        return Err(ImageError::Generation(format!(
            "{width}x{height} leaves no interior for a hole"
        )));
    }
    par::map_range(count, |i| {
        let mut rng = item_rng(seed, MASK_STREAM, i);
        for _ in 0..MAX_ATTEMPTS {
            if let Some(hole) = try_mask(&mut rng, width, height, &coverage) {
                return BinaryMask::from_holes(width, height, &hole);
            }
        }
        Err(ImageError::Generation(format!(
            "no {width}x{height} mask with hole fraction in [{}, {}] after {MAX_ATTEMPTS} attempts",
            coverage.min, coverage.max
        )))
    })
    .into_iter()
    .collect()
}

/// Sum of randomly oriented plane waves with 1/f amplitudes and at most
/// `max_cycles` cycles across the image, rescaled to `[0, 1]`.
fn texture_field(rng: &mut Xoshiro256PlusPlus, w: usize, h: usize, max_cycles: f64) -> Vec<f64> {
    const WAVES: usize = 12;
    let size = w.max(h) as f64;
    let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
        .map(|_| {
            let f = rng.random_range(1.0..=max_cycles);
            let t = rng.random_range(0.0..2.0 * PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let k = 2.0 * PI * f / size;
            (k * t.cos(), k * t.sin(), phase, 1.0 / f)
        })
        .collect();
    let mut v: Vec<f64> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            waves
                .iter()
                .map(|(kx, ky, p, a)| a * (kx * x + ky * y + p).cos())
                .sum()
        })
        .collect();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for x in &mut v {
            *x = (*x - lo) / (hi - lo);
        }
    } else {
        v.fill(0.5);
    }
    v
}

/// Band-limited random textures with values in `[0, 1]`.
pub fn synthesize_textures(seed: u64, size: usize, count: usize) -> Vec<GrayImage> {
    par::map_range(count, |i| {
        let mut rng = item_rng(seed, TEXTURE_STREAM, i);
        let v = texture_field(&mut rng, size, size, 5.0);
        GrayImage::from_clamped(size, size, v.into_iter().map(|x| x as f32).collect())
            .expect("extents match")
    })
}

/// Smooth bright shapes on a faint texture, with their foreground labels
/// (label 1) covering between 2% and 30% of the image.
pub fn synthesize_blobs(seed: u64, size: usize, count: usize) -> Result<Vec<(GrayImage, LabelMap)>> {
    if size < 8 {
        return Err(ImageError::Generation(format!(
            "blob images need at least 8x8 pixels, got {size}"
        )));
    }
    par::map_range(count, |i| {
        let mut rng = item_rng(seed, BLOB_STREAM, i);
        let s = size as f64;
        for _ in 0..MAX_ATTEMPTS {
            let parts = rng.random_range(1..=3);
            let r = s * rng.random_range(0.08..0.2);
            let mut cx = rng.random_range(0.25 * s..0.75 * s);
            let mut cy = rng.random_range(0.25 * s..0.75 * s);
            let mut shapes = Vec::with_capacity(parts);
            for _ in 0..parts {
                let e = Ellipse::random(&mut rng, cx, cy, r);
                let a = rng.random_range(0.0..2.0 * PI);
                cx += 0.6 * e.rx.min(e.ry) * a.cos();
                cy += 0.6 * e.rx.min(e.ry) * a.sin();
                shapes.push(e);
            }
            let tex = texture_field(&mut rng, size, size, 4.0);
            let mut values = Vec::with_capacity(size * size);
            let mut fg = Vec::with_capacity(size * size);
            for y in 0..size {
                for x in 0..size {
                    let q = shapes
                        .iter()
                        .map(|e| e.q(x as f64, y as f64))
                        .fold(f64::INFINITY, f64::min);
                    // soft edge: 1 well inside, 0 well outside, 0.5 on the boundary
                    let soft = 1.0 / (1.0 + ((q - 1.0) * 6.0).exp());
                    values.push((0.2 + 0.25 * tex[y * size + x] + 0.45 * soft) as f32);
                    fg.push(q <= 1.0);
                }
            }
            let frac = fg.iter().filter(|&&f| f).count() as f64 / (size * size) as f64;
            if (0.02..=0.3).contains(&frac) {
                let img = GrayImage::from_clamped(size, size, values)?;
                return Ok((img, LabelMap::from_foreground(size, size, &fg)?));
            }
        }
        Err(ImageError::Generation(format!(
            "no {size}x{size} blob with label fraction in [0.02, 0.3] after {MAX_ATTEMPTS} attempts"
        )))
    })
    .into_iter()
    .collect()
}
