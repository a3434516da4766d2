//! Image-domain types, PGM I/O, preprocessing, mask morphology and the
//! synthetic data generators.
//!
//! Masks use 1 = valid pixel, 0 = hole. On disk a mask is a PGM with
//! 0 for hole and maxval for valid.

pub mod dataset;
pub mod morphology;
pub mod pgm;
pub mod preprocess;
pub mod synth;

use thiserror::Error;

use crate::tensor::{check_axis, Axis, Scalar, Tensor, TensorError};

pub use dataset::{
    load_inpaint_pairs, load_label_pairs, parse_manifest, read_manifest, write_manifest, ManifestEntry,
};
pub use morphology::{dilate, Region, DEFAULT_DILATE_RADIUS};
pub use pgm::{
    decode_pgm, encode_pgm, read_gray, read_labels, read_mask, read_pgm, write_gray, write_labels,
    write_mask, write_pgm, PgmImage,
};
pub use preprocess::{
    histogram_match, zscore_normalize, zscore_tensor, zscore_values, ZScore, HIST_BINS,
};
pub use synth::{synthesize_blobs, synthesize_masks, synthesize_textures, CoverageRange};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("not a PGM file (bad magic)")]
    BadMagic,
    #[error("unsupported image format {0}; only binary P5 graymaps are read")]
    Unsupported(String),
    #[error("PGM payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("PGM maxval must be positive")]
    ZeroMaxval,
    #[error("malformed PGM header: {0}")]
    Header(String),
    #[error("extent mismatch: expected {expected_w}x{expected_h}, found {found_w}x{found_h}")]
    Extent {
        expected_w: usize,
        expected_h: usize,
        found_w: usize,
        found_h: usize,
    },
    #[error("mask is not binary: value {value} at pixel {index}")]
    NotBinary { index: usize, value: u32 },
    #[error("label {label} outside the declared alphabet 0..={max}")]
    Label { label: u8, max: u8 },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

fn check_extent(w: usize, h: usize, ow: usize, oh: usize) -> Result<()> {
    if (w, h) == (ow, oh) {
        Ok(())
    } else {
        Err(ImageError::Extent {
            expected_w: w,
            expected_h: h,
            found_w: ow,
            found_h: oh,
        })
    }
}

/// Grayscale image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    maxval: u16,
    values: Vec<f32>,
}

impl GrayImage {
    /// Values outside `[0, 1]` or non-finite are rejected.
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(ImageError::Degenerate(format!(
                "{} values for a {width}x{height} image",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(ImageError::Degenerate(format!(
                "intensity {} at pixel {i} outside [0, 1]",
                values[i]
            )));
        }
        Ok(GrayImage {
            width,
            height,
            maxval: 255,
            values,
        })
    }

    /// Clamps into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn values(&self) -> &[f32] {
        &self.values
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bit depth the image was read with, used again on write.
    pub fn maxval(&self) -> u16 {
        self.maxval
    }

    pub fn with_maxval(mut self, maxval: u16) -> Self {
        self.maxval = maxval.max(1);
        self
    }

    /// Largest absolute intensity difference; extents must match.
    pub fn max_abs_diff(&self, other: &GrayImage) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 1, self.height, self.width], |_, _, y, x| {
            T::from_acc(self.get(x, y) as f64)
        })
    }

    /// Reads batch item `n` of a 1-channel tensor, clamping into `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self, TensorError> {
        check_axis(Axis::Channel, 1, t.channels())?;
        let plane = t.plane_len();
        let start = n * plane;
        if n >= t.batch() {
            return Err(TensorError::Dimension {
                axis: Axis::Batch,
                expected: n + 1,
                found: t.batch(),
            });
        }
        let values = t.data()[start..start + plane]
            .iter()
            .map(|v| v.to_acc() as f32)
            .collect();
        Self::from_clamped(t.width(), t.height(), values)
            .map_err(|e| TensorError::Contract(e.to_string()))
    }
}

/// Binary validity mask: `true` = valid, `false` = hole.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    valid: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, valid: Vec<bool>) -> Result<Self> {
        if valid.len() != width * height {
            return Err(ImageError::Degenerate(format!(
                "{} values for a {width}x{height} mask",
                valid.len()
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            valid,
        })
    }

    pub fn all_valid(width: usize, height: usize) -> Self {
        BinaryMask {
            width,
            height,
            valid: vec![true; width * height],
        }
    }

    /// Mask from a hole indicator (`true` = hole).
    pub fn from_holes(width: usize, height: usize, hole: &[bool]) -> Result<Self> {
        Self::new(width, height, hole.iter().map(|h| !h).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }
    pub fn holes(&self) -> Vec<bool> {
        self.valid.iter().map(|v| !v).collect()
    }
    pub fn hole_count(&self) -> usize {
        self.valid.iter().filter(|v| !**v).count()
    }
    pub fn hole_fraction(&self) -> f64 {
        self.hole_count() as f64 / self.valid.len().max(1) as f64
    }

    /// `(1, 1, H, W)` tensor of 0/1.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 1, self.height, self.width], |_, _, y, x| {
            if self.is_valid(x, y) {
                T::one()
            } else {
                T::zero()
            }
        })
    }

    /// Batch item `n` of a `(N, 1, H, W)` binary tensor.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<Self, TensorError> {
        check_axis(Axis::Channel, 1, t.channels())?;
        if n >= t.batch() || !t.is_binary() {
            return Err(TensorError::Contract(format!(
                "expected a binary mask with at least {} items",
                n + 1
            )));
        }
        let plane = t.plane_len();
        let valid = t.data()[n * plane..(n + 1) * plane]
            .iter()
            .map(|v| *v == T::one())
            .collect();
        Ok(BinaryMask {
            width: t.width(),
            height: t.height(),
            valid,
        })
    }
}

/// Integer label image with labels in `0..=max_label`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    max_label: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, max_label: u8, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(ImageError::Degenerate(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|l| **l > max_label) {
            return Err(ImageError::Label {
                label: l,
                max: max_label,
            });
        }
        Ok(LabelMap {
            width,
            height,
            max_label,
            labels,
        })
    }

    /// Two-label map from a foreground indicator.
    pub fn from_foreground(width: usize, height: usize, fg: &[bool]) -> Result<Self> {
        Self::new(width, height, 1, fg.iter().map(|&f| f as u8).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn max_label(&self) -> u8 {
        self.max_label
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn region(&self, label: u8) -> Vec<bool> {
        self.labels.iter().map(|l| *l == label).collect()
    }

    /// `(1, 1, H, W)` indicator tensor of `label`.
    pub fn to_tensor<T: Scalar>(&self, label: u8) -> Tensor<T> {
        Tensor::from_fn([1, 1, self.height, self.width], |_, _, y, x| {
            if self.labels[y * self.width + x] == label {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

impl From<&BinaryMask> for LabelMap {
    /// Holes become label 1.
    fn from(m: &BinaryMask) -> Self {
        LabelMap {
            width: m.width,
            height: m.height,
            max_label: 1,
            labels: m.valid.iter().map(|v| (!v) as u8).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_image_rejects_out_of_range() {
        assert!(GrayImage::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(GrayImage::new(2, 1, vec![0.0]).is_err());
        let g = GrayImage::from_clamped(2, 1, vec![-1.0, 2.0]).unwrap();
        assert_eq!(g.values(), &[0.0, 1.0]);
    }

    #[test]
    fn tensor_round_trips() {
        let g = GrayImage::new(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap();
        let t = g.to_tensor::<f32>();
        assert_eq!(t.dims(), [1, 1, 2, 3]);
        assert_eq!(GrayImage::from_tensor(&t, 0).unwrap(), g);

        let m = BinaryMask::new(2, 2, vec![true, false, false, true]).unwrap();
        let mt = m.to_tensor::<f64>();
        assert_eq!(mt.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(BinaryMask::from_tensor(&mt, 0).unwrap(), m);
        assert_eq!(m.hole_fraction(), 0.5);
    }

    #[test]
    fn label_alphabet_is_enforced() {
        assert!(matches!(
            LabelMap::new(2, 1, 3, vec![0, 4]),
            Err(ImageError::Label { label: 4, max: 3 })
        ));
        let l = LabelMap::new(2, 2, 3, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(l.region(2), vec![false, false, true, false]);
    }
}
