//! Frozen convolutional feature pyramid used by the perceptual and style
//! terms, plus its `PCFX` weight file.
//!
//! File layout (little-endian): magic `PCFX`, version `u32`, then until end
//! of file one record per tensor: rank `u32`, `rank` extents `u32`, and the
//! `f32` values. Tensors alternate weight, bias for each level.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use thiserror::Error;

use crate::binio::{put_f32s, put_u32, ByteReader};
use crate::tensor::{conv2d, Activation, Axis, Scalar, Tape, Tensor, TensorError, Var};

const MAGIC: &[u8; 4] = b"PCFX";
const VERSION: u32 = 1;

/// Seed of the checked-in extractor weights.
pub const EXTRACTOR_SEED: u64 = 0x5043_4658;

/// Channels of the three pyramid levels.
pub const LEVEL_CHANNELS: [usize; 3] = [8, 16, 32];

static BUNDLED: &[u8] = include_bytes!("../../data/extractor.pcfx");

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("not a feature-extractor file (bad magic)")]
    BadMagic,
    #[error("unsupported feature-extractor version {0}")]
    Version(u32),
    #[error("feature-extractor file truncated")]
    Truncated,
    #[error("malformed feature-extractor file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Activation maps of one image batch, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T: Scalar = f32> {
    pub levels: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Level {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

/// Three stride-2 3x3 convolutions with ReLU, never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    levels: Vec<Level>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::from_bytes(BUNDLED).expect("bundled extractor weights are valid")
    }
}

impl FeatureExtractor {
    /// Builds the weights from `seed`: Gaussian draws whose per-filter rows are
    /// Gram-Schmidt orthonormalized and scaled by `sqrt(2)`, zero bias.
    pub fn generate(seed: u64) -> Self {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let mut cin = 1;
        let mut levels = Vec::new();
        for &cout in &LEVEL_CHANNELS {
            let fan_in = cin * 9;
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cout);
            while rows.len() < cout {
                let mut r: Vec<f64> = (0..fan_in)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                for prev in &rows {
                    let d: f64 = r.iter().zip(prev).map(|(a, b)| a * b).sum();
                    for (a, b) in r.iter_mut().zip(prev) {
                        *a -= d * b;
                    }
                }
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-6 {
                    rows.push(r.into_iter().map(|v| v / norm).collect());
                }
            }
            let data = rows
                .iter()
                .flatten()
                .map(|v| (v * std::f64::consts::SQRT_2) as f32)
                .collect();
            levels.push(Level {
                weight: Tensor::from_vec([cout, cin, 3, 3], data).expect("finite weights"),
                bias: Tensor::zeros([1, cout, 1, 1]),
            });
            cin = cout;
        }
        FeatureExtractor { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Plain forward pass.
    pub fn extract<T: Scalar>(&self, image: &Tensor<T>) -> Result<FeaturePyramid<T>, TensorError> {
        self.check_input(image)?;
        let mut levels = Vec::with_capacity(self.levels.len());
        let mut cur = image.clone();
        for level in &self.levels {
            let y = conv2d(&cur, &level.weight.cast(), &level.bias.cast(), 2, 1)?;
            cur = crate::tensor::activation(&y, Activation::Relu)?;
            levels.push(cur.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Records the forward pass on `tape`; weights enter as constant leaves.
    pub fn extract_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        image: Var,
    ) -> Result<Vec<Var>, TensorError> {
        self.check_input(tape.value(image))?;
        let mut out = Vec::with_capacity(self.levels.len());
        let mut cur = image;
        for level in &self.levels {
            let w = tape.leaf(level.weight.cast());
            let b = tape.leaf(level.bias.cast());
            let y = tape.conv2d(cur, w, b, 2, 1)?;
            cur = tape.activation(y, Activation::Relu)?;
            out.push(cur);
        }
        Ok(out)
    }

    fn check_input<T: Scalar>(&self, image: &Tensor<T>) -> Result<(), TensorError> {
        let div = 1usize << self.levels.len();
        let [_, c, h, w] = image.dims();
        let cin = self.levels[0].weight.dims()[1];
        if c != cin {
            return Err(TensorError::Dimension {
                axis: Axis::Channel,
                expected: cin,
                found: c,
            });
        }
        for (axis, v) in [(Axis::Height, h), (Axis::Width, w)] {
            if v == 0 || v % div != 0 {
                return Err(TensorError::Dimension {
                    axis,
                    expected: v.div_ceil(div).max(1) * div,
                    found: v,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        for level in &self.levels {
            for t in [&level.weight, &level.bias] {
                put_u32(&mut out, 4);
                for d in t.dims() {
                    put_u32(&mut out, d as u32);
                }
                put_f32s(&mut out, t.data());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureFileError> {
        let mut r = ByteReader::new(bytes);
        let short = |_| FeatureFileError::Truncated;
        if r.bytes(4).map_err(short)? != MAGIC {
            return Err(FeatureFileError::BadMagic);
        }
        let version = r.u32().map_err(short)?;
        if version != VERSION {
            return Err(FeatureFileError::Version(version));
        }
        let mut tensors = Vec::new();
        while !r.is_empty() {
            let rank = r.u32().map_err(short)? as usize;
            if rank == 0 || rank > 4 {
                return Err(FeatureFileError::Malformed(format!("rank {rank}")));
            }
            let mut dims = [1usize; 4];
            for d in dims.iter_mut().skip(4 - rank) {
                *d = r.u32().map_err(short)? as usize;
            }
            let data = r.f32s(dims.iter().product()).map_err(short)?;
            tensors.push(
                Tensor::from_vec(dims, data)
                    .map_err(|e| FeatureFileError::Malformed(e.to_string()))?,
            );
        }
        if tensors.is_empty() || tensors.len() % 2 != 0 {
            return Err(FeatureFileError::Malformed(format!(
                "expected weight/bias pairs, found {} tensors",
                tensors.len()
            )));
        }
        let mut levels = Vec::new();
        let mut cin = None;
        for pair in tensors.chunks(2) {
            let (w, b) = (&pair[0], &pair[1]);
            let [cout, c, kh, kw] = w.dims();
            if kh != 3 || kw != 3 || cin.is_some_and(|ci| ci != c) || b.len() != cout {
                return Err(FeatureFileError::Malformed(format!(
                    "inconsistent level extents {:?}",
                    w.dims()
                )));
            }
            cin = Some(cout);
            levels.push(Level {
                weight: w.clone(),
                bias: b.clone().reshape([1, cout, 1, 1]).expect("same length"),
            });
        }
        Ok(FeatureExtractor { levels })
    }
}
