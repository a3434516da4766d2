//! Recovery quality (PSNR, SSIM) and label agreement (Dice), optionally
//! restricted to a pixel region, plus the tab-separated report format.
//!
//! A region is a row-major pixel indicator; `None` means the whole image.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::imageproc::{BinaryMask, GrayImage, LabelMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("extent mismatch: {0}x{1} vs {2}x{3}")]
    Extent(usize, usize, usize, usize),
    #[error("region selects no pixels")]
    EmptyRegion,
    #[error("image {width}x{height} is smaller than the {window}x{window} SSIM window")]
    TooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("region has {found} entries for {expected} pixels")]
    RegionLength { expected: usize, found: usize },
    #[error("peak must be positive and finite, got {0}")]
    Peak(f64),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn same_extent(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::Extent(a.0, a.1, b.0, b.1))
    }
}

fn check_region(region: Option<&[bool]>, n: usize) -> Result<()> {
    match region {
        Some(r) if r.len() != n => Err(MetricError::RegionLength {
            expected: n,
            found: r.len(),
        }),
        _ => Ok(()),
    }
}

/// `10 log10(peak^2 / MSE)` over the selected pixels; `+inf` when the
/// images agree there.
pub fn psnr(a: &GrayImage, b: &GrayImage, peak: f64, region: Option<&[bool]>) -> Result<f64> {
    same_extent((a.width(), a.height()), (b.width(), b.height()))?;
    psnr_values(a.values(), b.values(), peak, region)
}

pub fn psnr_values(a: &[f32], b: &[f32], peak: f64, region: Option<&[bool]>) -> Result<f64> {
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(MetricError::Peak(peak));
    }
    check_region(region, a.len())?;
    let mut se = 0.0;
    let mut n = 0usize;
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if region.is_none_or(|r| r[i]) {
            let d = *x as f64 - *y as f64;
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::EmptyRegion);
    }
    let mse = se / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Window and stabilizing constants of SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the intensities.
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: 1.0,
        }
    }
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(size * size);
    for gy in &g {
        for gx in &g {
            w.push(gy * gx / (s * s));
        }
    }
    w
}

/// Mean local SSIM over every Gaussian window that lies inside the image
/// (and fully inside `region` when given).
pub fn ssim(a: &GrayImage, b: &GrayImage, params: &SsimParams, region: Option<&[bool]>) -> Result<f64> {
    same_extent((a.width(), a.height()), (b.width(), b.height()))?;
    ssim_values(a.values(), b.values(), a.width(), a.height(), params, region)
}

pub fn ssim_values(
    a: &[f32],
    b: &[f32],
    width: usize,
    height: usize,
    params: &SsimParams,
    region: Option<&[bool]>,
) -> Result<f64> {
    if !(params.peak > 0.0 && params.peak.is_finite()) {
        return Err(MetricError::Peak(params.peak));
    }
    let win = params.window;
    if width < win || height < win {
        return Err(MetricError::TooSmall {
            width,
            height,
            window: win,
        });
    }
    check_region(region, width * height)?;
    let weights = gaussian_window(win, params.sigma);
    let c1 = (params.k1 * params.peak).powi(2);
    let c2 = (params.k2 * params.peak).powi(2);
    // windows touching a pixel outside the region are skipped
    let outside: Option<Vec<bool>> = region.map(|r| {
        let holes: Vec<bool> = r.iter().map(|v| !v).collect();
        crate::imageproc::morphology::dilate_raw(&holes, width, height, win / 2)
    });
    let rows = crate::par::map_range(height - win + 1, |y0| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for x0 in 0..=width - win {
            if let Some(o) = &outside {
                if o[(y0 + win / 2) * width + x0 + win / 2] {
                    continue;
                }
            }
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                let row = (y0 + dy) * width + x0;
                for dx in 0..win {
                    let w = weights[dy * win + dx];
                    let (va, vb) = (a[row + dx] as f64, b[row + dx] as f64);
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * (va * vb);
                }
            }
            let va = (saa - ma * ma).max(0.0);
            let vb = (sbb - mb * mb).max(0.0);
            let cov = sab - ma * mb;
            sum += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
        (sum, count)
    });
    let (sum, count) = rows
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (rs, rc)| (s + rs, c + rc));
    if count == 0 {
        return Err(MetricError::EmptyRegion);
    }
    Ok(sum / count as f64)
}

/// `2 |A ∩ B| / (|A| + |B|)` for `label`, ignoring excluded pixels. Two
/// empty sets agree perfectly (1).
pub fn dice(a: &LabelMap, b: &LabelMap, label: u8, exclusion: Option<&[bool]>) -> Result<f64> {
    same_extent((a.width(), a.height()), (b.width(), b.height()))?;
    check_region(exclusion, a.labels().len())?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (i, (x, y)) in a.labels().iter().zip(b.labels()).enumerate() {
        if exclusion.is_some_and(|e| e[i]) {
            continue;
        }
        let (ia, ib) = (*x == label, *y == label);
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Psnr,
    Ssim,
    Dice,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Psnr => "psnr",
            Metric::Ssim => "ssim",
            Metric::Dice => "dice",
        })
    }
}

impl FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            "dice" => Ok(Metric::Dice),
            _ => Err(format!("unknown metric {s:?} (expected psnr, ssim or dice)")),
        }
    }
}

/// Pixels a metric is computed over, relative to a validity mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricRegion {
    Whole,
    Hole,
    Valid,
}

impl MetricRegion {
    /// Pixel indicator for this region; `None` for the whole image.
    pub fn select(&self, mask: Option<&BinaryMask>) -> Option<Vec<bool>> {
        match (self, mask) {
            (MetricRegion::Whole, _) | (_, None) => None,
            (MetricRegion::Hole, Some(m)) => Some(m.holes()),
            (MetricRegion::Valid, Some(m)) => Some(m.valid().to_vec()),
        }
    }
}

impl fmt::Display for MetricRegion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricRegion::Whole => "whole",
            MetricRegion::Hole => "hole",
            MetricRegion::Valid => "valid",
        })
    }
}

impl FromStr for MetricRegion {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "whole" => Ok(MetricRegion::Whole),
            "hole" => Ok(MetricRegion::Hole),
            "valid" => Ok(MetricRegion::Valid),
            _ => Err(format!("unknown region {s:?} (expected whole, hole or valid)")),
        }
    }
}

/// One evaluated (sample, metric, region) triple. `value` is `None` when the
/// sample could not be evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub sample: String,
    pub metric: Metric,
    pub region: MetricRegion,
    pub value: Option<f64>,
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = match self.value {
            Some(v) => format_g6(v),
            None => "error".to_string(),
        };
        write!(f, "{}\t{}\t{}\t{}", self.sample, self.metric, self.region, v)
    }
}

/// `%g`-style rendering with 6 significant digits; infinities as `inf`.
pub fn format_g6(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.5e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: String| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if !(-4..6).contains(&exp) {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{}{:02}", trim(mant.to_string()), sign, exp.abs())
    } else {
        trim(format!("{:.*}", (5 - exp) as usize, v))
    }
}

/// Mean and population standard deviation of the successful values of one
/// (metric, region) group.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSummary {
    pub metric: Metric,
    pub region: MetricRegion,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl fmt::Display for MetricSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "#summary\t{}\t{}\t{}\t{}\t{}",
            self.metric,
            self.region,
            format_g6(self.mean),
            format_g6(self.std),
            self.count
        )
    }
}

/// Groups in first-appearance order. Infinite values make the mean `inf`
/// and the spread undefined (`nan`).
pub fn summarize(reports: &[MetricReport]) -> Vec<MetricSummary> {
    let mut keys: Vec<(Metric, MetricRegion)> = Vec::new();
    for r in reports {
        if !keys.contains(&(r.metric, r.region)) {
            keys.push((r.metric, r.region));
        }
    }
    keys.into_iter()
        .map(|(metric, region)| {
            let vals: Vec<f64> = reports
                .iter()
                .filter(|r| r.metric == metric && r.region == region)
                .filter_map(|r| r.value)
                .collect();
            let n = vals.len();
            let (mean, std) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else if vals.iter().any(|v| !v.is_finite()) {
                (vals.iter().sum::<f64>() / n as f64, f64::NAN)
            } else {
                let m = vals.iter().sum::<f64>() / n as f64;
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                (m, var.sqrt())
            };
            MetricSummary {
                metric,
                region,
                count: n,
                mean,
                std,
            }
        })
        .collect()
}
