//! Intensity standardization: histogram matching to a reference image and
//! z-score normalization.

use super::{check_extent, BinaryMask, GrayImage, ImageError, Result};
use crate::tensor::{Scalar, Tensor};

/// Bins of the empirical CDFs used by [`histogram_match`].
pub const HIST_BINS: usize = 256;

/// Piecewise-linear CDF sampled at the `HIST_BINS + 1` bin edges.
fn edge_cdf(values: &[f32]) -> Vec<f64> {
    let mut hist = vec![0usize; HIST_BINS];
    for &v in values {
        let b = ((v as f64) * HIST_BINS as f64).floor() as usize;
        hist[b.min(HIST_BINS - 1)] += 1;
    }
    let n = values.len() as f64;
    let mut cdf = Vec::with_capacity(HIST_BINS + 1);
    let mut acc = 0usize;
    cdf.push(0.0);
    for h in hist {
        acc += h;
        cdf.push(acc as f64 / n);
    }
    cdf
}

fn cdf_at(cdf: &[f64], v: f64) -> f64 {
    let pos = (v * HIST_BINS as f64).clamp(0.0, HIST_BINS as f64);
    let k = (pos.floor() as usize).min(HIST_BINS - 1);
    let frac = pos - k as f64;
    cdf[k] + frac * (cdf[k + 1] - cdf[k])
}

/// Smallest intensity whose CDF reaches `p`.
fn cdf_inverse(cdf: &[f64], p: f64) -> f64 {
    // first edge with cdf >= p
    let k = cdf.partition_point(|&c| c < p);
    if k == 0 {
        return 0.0;
    }
    if k > HIST_BINS {
        return 1.0;
    }
    let (lo, hi) = (cdf[k - 1], cdf[k]);
    let frac = if hi > lo { (p - lo) / (hi - lo) } else { 0.0 };
    ((k - 1) as f64 + frac) / HIST_BINS as f64
}

/// Maps `src` through `F_ref^-1(F_src(v))` using 256-bin CDFs with linear
/// interpolation inside each bin. The output keeps the source extents and
/// bit depth.
pub fn histogram_match(src: &GrayImage, reference: &GrayImage) -> Result<GrayImage> {
    if src.is_empty() || reference.is_empty() {
        return Err(ImageError::Degenerate("histogram match of an empty image".into()));
    }
    let first = reference.values()[0];
    if reference.values().iter().all(|&v| v == first) {
        return Err(ImageError::Degenerate(
            "histogram reference is constant".into(),
        ));
    }
    let cs = edge_cdf(src.values());
    let cr = edge_cdf(reference.values());
    let values = src
        .values()
        .iter()
        .map(|&v| cdf_inverse(&cr, cdf_at(&cs, v as f64)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(GrayImage::new(src.width(), src.height(), values)?.with_maxval(src.maxval()))
}

/// Affine parameters of a z-score: `z = (v - mean) / std`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl ZScore {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Z-scores every value, with statistics taken over the `considered`
/// entries only (all when `None`).
pub fn zscore_values(values: &[f64], considered: Option<&[bool]>) -> Result<(Vec<f64>, ZScore)> {
    if let Some(c) = considered {
        if c.len() != values.len() {
            return Err(ImageError::Degenerate(format!(
                "{} mask entries for {} values",
                c.len(),
                values.len()
            )));
        }
    }
    let picked: Vec<f64> = match considered {
        Some(c) => values
            .iter()
            .zip(c)
            .filter(|(_, k)| **k)
            .map(|(v, _)| *v)
            .collect(),
        None => values.to_vec(),
    };
    if picked.len() < 2 {
        return Err(ImageError::Degenerate(format!(
            "z-score needs at least 2 pixels, got {}",
            picked.len()
        )));
    }
    if picked.iter().all(|&v| v == picked[0]) {
        return Err(ImageError::Degenerate("zero variance".into()));
    }
    let n = picked.len() as f64;
    let mean = picked.iter().sum::<f64>() / n;
    let var = picked.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let params = ZScore {
        mean,
        std: var.sqrt(),
    };
    Ok((values.iter().map(|&v| params.apply(v)).collect(), params))
}

/// Z-scores an image, optionally using only valid pixels for the statistics.
pub fn zscore_normalize(
    img: &GrayImage,
    mask: Option<&BinaryMask>,
) -> Result<(Vec<f64>, ZScore)> {
    if let Some(m) = mask {
        check_extent(img.width(), img.height(), m.width(), m.height())?;
    }
    let values: Vec<f64> = img.values().iter().map(|&v| v as f64).collect();
    zscore_values(&values, mask.map(|m| m.valid()))
}

/// Tensor form: statistics over the whole tensor, or over entries where the
/// same-extent `mask` is 1.
pub fn zscore_tensor<T: Scalar>(
    t: &Tensor<T>,
    mask: Option<&Tensor<T>>,
) -> Result<(Tensor<T>, ZScore)> {
    let considered: Option<Vec<bool>> = match mask {
        Some(m) => {
            if m.dims() != t.dims() || !m.is_binary() {
                return Err(ImageError::Degenerate(
                    "z-score mask must be binary with the tensor's extents".into(),
                ));
            }
            Some(m.data().iter().map(|v| *v == T::one()).collect())
        }
        None => None,
    };
    let values: Vec<f64> = t.data().iter().map(|v| v.to_acc()).collect();
    let (z, params) = zscore_values(&values, considered.as_deref())?;
    let data = z.into_iter().map(T::from_acc).collect();
    let out = Tensor::from_vec(t.dims(), data)
        .map_err(|e| ImageError::Degenerate(e.to_string()))?;
    Ok((out, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random_image(seed: u64, w: usize, h: usize, f: impl Fn(f32) -> f32) -> GrayImage {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let v = (0..w * h).map(|_| f(rng.random::<f32>())).collect();
        GrayImage::new(w, h, v).unwrap()
    }

    #[test]
    fn self_match_is_identity_up_to_a_bin() {
        let img = random_image(3, 32, 32, |v| v);
        let out = histogram_match(&img, &img).unwrap();
        let worst = img
            .values()
            .iter()
            .zip(out.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1.0 / 256.0, "{worst}");
    }

    #[test]
    fn bright_reference_raises_mean_and_keeps_order() {
        let src = random_image(5, 32, 32, |v| v);
        let reference = random_image(6, 32, 32, |v| 0.85 + 0.15 * v);
        let out = histogram_match(&src, &reference).unwrap();
        let mean = |g: &GrayImage| g.values().iter().sum::<f32>() / g.len() as f32;
        assert!(mean(&out) > mean(&src));
        let mut pairs: Vec<(f32, f32)> = src
            .values()
            .iter()
            .copied()
            .zip(out.values().iter().copied())
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert!(pairs.windows(2).all(|p| p[0].1 <= p[1].1));
    }

    #[test]
    fn constant_reference_is_degenerate() {
        let src = random_image(1, 4, 4, |v| v);
        let flat = GrayImage::new(4, 4, vec![0.3; 16]).unwrap();
        assert!(matches!(
            histogram_match(&src, &flat),
            Err(ImageError::Degenerate(_))
        ));
    }

    #[test]
    fn two_point_zscore() {
        let (z, p) = zscore_values(&[1.0, 3.0], None).unwrap();
        assert_eq!(z, vec![-1.0, 1.0]);
        assert_eq!((p.mean, p.std), (2.0, 1.0));
        assert!(zscore_values(&[2.0, 2.0, 2.0], None).is_err());
        assert!(zscore_values(&[2.0], None).is_err());
    }

    #[test]
    fn masked_zscore_uses_valid_pixels() {
        let img = random_image(9, 8, 8, |v| v);
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(10);
        let valid: Vec<bool> = (0..64).map(|_| rng.random_bool(0.7)).collect();
        let mask = BinaryMask::new(8, 8, valid.clone()).unwrap();
        let (z, p) = zscore_normalize(&img, Some(&mask)).unwrap();

        let mut sum = 0.0;
        let mut n = 0.0;
        for (v, k) in img.values().iter().zip(&valid) {
            if *k {
                sum += *v as f64;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let mut ss = 0.0;
        for (v, k) in img.values().iter().zip(&valid) {
            if *k {
                ss += (*v as f64 - mean).powi(2);
            }
        }
        assert!((p.mean - mean).abs() < 1e-12);
        assert!((p.std - (ss / n).sqrt()).abs() < 1e-12);

        let picked: Vec<f64> = z.iter().zip(&valid).filter(|(_, k)| **k).map(|(v, _)| *v).collect();
        let zm = picked.iter().sum::<f64>() / n;
        let zs = (picked.iter().map(|v| (v - zm).powi(2)).sum::<f64>() / n).sqrt();
        assert!(zm.abs() < 1e-6 && (zs - 1.0).abs() < 1e-6);
        for (zv, v) in z.iter().zip(img.values()) {
            assert!((p.invert(*zv) - *v as f64).abs() < 1e-6);
        }
    }
}
