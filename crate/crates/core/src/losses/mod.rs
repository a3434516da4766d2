//! Inpainting loss terms and their weighted total, plus binary
//! cross-entropy for the segmentation network.
//!
//! Masks follow the image convention: 1 = valid pixel, 0 = hole. A mask may
//! be `(N, 1, H, W)` and is then shared by every image channel. Every
//! normalization by "number of elements" uses the full `N * C * H * W`
//! count. The style term additionally averages over the batch.
//!
//! Each term is built on a [`Tape`] so training can differentiate it; the
//! plain functions evaluate the same graph once and return the value.

mod features;

pub use features::{
    FeatureExtractor, FeatureFileError, FeaturePyramid, EXTRACTOR_SEED, LEVEL_CHANNELS,
};

use serde::{Deserialize, Serialize};

use crate::imageproc::morphology::dilate_raw;
use crate::tensor::{check_axis, gram_matrix, Axis, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Coefficients of the weighted total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub masked: f64,
    pub valid: f64,
    pub perceptual: f64,
    pub style: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            masked: 6.0,
            valid: 1.0,
            perceptual: 0.05,
            style: 120.0,
            tv: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("masked", self.masked),
            ("valid", self.valid),
            ("perceptual", self.perceptual),
            ("style", self.style),
            ("tv", self.tv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TensorError::Contract(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Weighted sum of the six term values; the style weight applies to both
    /// style terms.
    pub fn combine(
        &self,
        masked: f64,
        valid: f64,
        perceptual: f64,
        style_out: f64,
        style_comp: f64,
        tv: f64,
    ) -> f64 {
        self.masked * masked
            + self.valid * valid
            + self.perceptual * perceptual
            + self.style * (style_out + style_comp)
            + self.tv * tv
    }
}

/// Values of every term and of the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub masked: f64,
    pub valid: f64,
    pub perceptual: f64,
    pub style_out: f64,
    pub style_comp: f64,
    pub tv: f64,
}

impl LossBreakdown {
    /// The total recomputed from the term values.
    pub fn recompose(&self, weights: &LossWeights) -> f64 {
        weights.combine(
            self.masked,
            self.valid,
            self.perceptual,
            self.style_out,
            self.style_comp,
            self.tv,
        )
    }
}

/// Graph handles of every term of the inpainting loss.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub masked: Var,
    pub valid: Var,
    pub perceptual: Var,
    pub style_out: Var,
    pub style_comp: Var,
    pub tv: Var,
}

impl LossGraph {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> LossBreakdown {
        let v = |var: Var| tape.value(var).data()[0].to_acc();
        LossBreakdown {
            total: v(self.total),
            masked: v(self.masked),
            valid: v(self.valid),
            perceptual: v(self.perceptual),
            style_out: v(self.style_out),
            style_comp: v(self.style_comp),
            tv: v(self.tv),
        }
    }
}

fn check_same_dims(axis_dims: [usize; 4], other: [usize; 4]) -> Result<()> {
    for (i, axis) in [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width]
        .into_iter()
        .enumerate()
    {
        check_axis(axis, axis_dims[i], other[i])?;
    }
    Ok(())
}

/// Expands a `(N, 1, H, W)` or `(N, C, H, W)` binary mask to `dims`.
fn broadcast_mask<T: Scalar>(mask: &Tensor<T>, dims: [usize; 4]) -> Result<Tensor<T>> {
    if !mask.is_binary() {
        return Err(TensorError::Contract(
            "mask values must be exactly 0 or 1".into(),
        ));
    }
    if mask.dims() == dims {
        return Ok(mask.clone());
    }
    let [n, _, h, w] = dims;
    check_same_dims([n, 1, h, w], mask.dims())?;
    Ok(Tensor::from_fn(dims, |b, _, y, x| mask.at(b, 0, y, x)))
}

/// `M * gt + (1 - M) * out`: ground truth on valid pixels, output in holes.
pub fn compose_comp<T: Scalar>(
    i_out: &Tensor<T>,
    i_gt: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_same_dims(i_out.dims(), i_gt.dims())?;
    let m = broadcast_mask(mask, i_out.dims())?;
    let data = i_out
        .data()
        .iter()
        .zip(i_gt.data())
        .zip(m.data())
        .map(|((o, g), mv)| if *mv == T::one() { *g } else { *o })
        .collect();
    Tensor::from_vec(i_out.dims(), data)
}

/// Records `compose_comp` with `out` as the differentiable input.
pub fn comp_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    i_gt: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Var> {
    let dims = tape.value(out).dims();
    check_same_dims(dims, i_gt.dims())?;
    let m = broadcast_mask(mask, dims)?;
    let keep = m.map(|v| T::one() - v);
    let offset = Tensor::from_raw(
        dims,
        m.data()
            .iter()
            .zip(i_gt.data())
            .map(|(mv, g)| *mv * *g)
            .collect(),
    );
    tape.affine_const(out, &keep, &offset)
}

/// Hole-region L1, normalized by the element count of `gt`.
pub fn masked_term<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    i_gt: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Var> {
    let dims = tape.value(out).dims();
    check_same_dims(dims, i_gt.dims())?;
    let hole = broadcast_mask(mask, dims)?.map(|v| T::one() - v);
    tape.weighted_l1(out, i_gt, Some(&hole), i_gt.len() as f64)
}

/// Valid-region L1, normalized by the element count of `gt`.
pub fn valid_term<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    i_gt: &Tensor<T>,
    mask: &Tensor<T>,
) -> Result<Var> {
    let dims = tape.value(out).dims();
    check_same_dims(dims, i_gt.dims())?;
    let valid = broadcast_mask(mask, dims)?;
    tape.weighted_l1(out, i_gt, Some(&valid), i_gt.len() as f64)
}

/// Sum over levels of the L1 feature distance, each normalized by the
/// element count of the ground-truth level.
pub fn perceptual_term<T: Scalar>(
    tape: &mut Tape<T>,
    levels_out: &[Var],
    levels_comp: &[Var],
    pyr_gt: &FeaturePyramid<T>,
) -> Result<Var> {
    check_axis(Axis::Channel, pyr_gt.depth(), levels_out.len())?;
    check_axis(Axis::Channel, pyr_gt.depth(), levels_comp.len())?;
    let mut terms = Vec::with_capacity(2 * pyr_gt.depth());
    for levels in [levels_out, levels_comp] {
        for (&v, gt) in levels.iter().zip(&pyr_gt.levels) {
            check_same_dims(gt.dims(), tape.value(v).dims())?;
            let t = tape.weighted_l1(v, gt, None, gt.len() as f64)?;
            terms.push((t, 1.0));
        }
    }
    tape.linear(&terms)
}

/// Sum over levels of `||G(a) - G(gt)||_1 / C_p^2`, averaged over the batch,
/// where `G` is the normalized Gram matrix. `grams_gt` holds `G(gt)` per level.
pub fn style_term<T: Scalar>(
    tape: &mut Tape<T>,
    levels: &[Var],
    grams_gt: &[Tensor<T>],
) -> Result<Var> {
    check_axis(Axis::Channel, grams_gt.len(), levels.len())?;
    let mut terms = Vec::with_capacity(levels.len());
    for (&v, g_gt) in levels.iter().zip(grams_gt) {
        let [n, c, _, _] = tape.value(v).dims();
        let g = tape.gram(v);
        check_same_dims(g_gt.dims(), tape.value(g).dims())?;
        let t = tape.weighted_l1(g, g_gt, None, (c * c * n) as f64)?;
        terms.push((t, 1.0));
    }
    tape.linear(&terms)
}

/// Hole pixels grown by one pixel (3x3 square), one flag per (n, y, x).
pub fn tv_region<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<bool>> {
    let [n, c, h, w] = mask.dims();
    check_axis(Axis::Channel, 1, c)?;
    if !mask.is_binary() {
        return Err(TensorError::Contract(
            "mask values must be exactly 0 or 1".into(),
        ));
    }
    let mut region = Vec::with_capacity(n * h * w);
    for b in 0..n {
        let holes: Vec<bool> = mask.data()[b * h * w..(b + 1) * h * w]
            .iter()
            .map(|&v| v == T::zero())
            .collect();
        region.extend(dilate_raw(&holes, w, h, 1));
    }
    Ok(region)
}

/// Total variation of `comp` over the 1-pixel dilation of the hole region,
/// normalized by the element count of `comp`.
pub fn tv_term<T: Scalar>(tape: &mut Tape<T>, comp: Var, mask: &Tensor<T>) -> Result<Var> {
    let [n, c, h, w] = tape.value(comp).dims();
    check_same_dims([n, 1, h, w], mask.dims())?;
    let region = tv_region(mask)?;
    tape.total_variation(comp, region, (n * c * h * w) as f64)
}

/// Records the full weighted inpainting loss for network output `out`.
pub fn inpainting_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: Var,
    i_gt: &Tensor<T>,
    mask: &Tensor<T>,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossGraph> {
    weights.validate()?;
    let [n, _, h, w] = i_gt.dims();
    check_same_dims([n, 1, h, w], mask.dims())?;
    let masked = masked_term(tape, out, i_gt, mask)?;
    let valid = valid_term(tape, out, i_gt, mask)?;
    let comp = comp_on_tape(tape, out, i_gt, mask)?;
    let pyr_gt = extractor.extract(i_gt)?;
    let grams_gt: Vec<Tensor<T>> = pyr_gt.levels.iter().map(gram_matrix).collect();
    let levels_out = extractor.extract_on_tape(tape, out)?;
    let levels_comp = extractor.extract_on_tape(tape, comp)?;
    let perceptual = perceptual_term(tape, &levels_out, &levels_comp, &pyr_gt)?;
    let style_out = style_term(tape, &levels_out, &grams_gt)?;
    let style_comp = style_term(tape, &levels_comp, &grams_gt)?;
    let tv = tv_term(tape, comp, mask)?;
    let total = tape.linear(&[
        (masked, weights.masked),
        (valid, weights.valid),
        (perceptual, weights.perceptual),
        (style_out, weights.style),
        (style_comp, weights.style),
        (tv, weights.tv),
    ])?;
    Ok(LossGraph {
        total,
        masked,
        valid,
        perceptual,
        style_out,
        style_comp,
        tv,
    })
}

fn eval_scalar<T: Scalar>(
    input: &Tensor<T>,
    build: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let v = build(&mut tape, x)?;
    Ok(tape.value(v).data()[0].to_acc())
}

/// `||(1 - M) * (out - gt)||_1 / |gt|`
pub fn l_masked<T: Scalar>(i_out: &Tensor<T>, i_gt: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    eval_scalar(i_out, |t, x| masked_term(t, x, i_gt, mask))
}

/// `||M * (out - gt)||_1 / |gt|`
pub fn l_valid<T: Scalar>(i_out: &Tensor<T>, i_gt: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    eval_scalar(i_out, |t, x| valid_term(t, x, i_gt, mask))
}

/// Normalized Gram matrices `K * psi^T psi` with `K = 1 / (C * H * W)`,
/// shaped `(N, 1, C, C)`.
pub fn gram<T: Scalar>(psi: &Tensor<T>) -> Tensor<T> {
    gram_matrix(psi)
}

pub fn l_perc<T: Scalar>(
    pyr_out: &FeaturePyramid<T>,
    pyr_comp: &FeaturePyramid<T>,
    pyr_gt: &FeaturePyramid<T>,
) -> Result<f64> {
    check_axis(Axis::Channel, pyr_gt.depth(), pyr_out.depth())?;
    check_axis(Axis::Channel, pyr_gt.depth(), pyr_comp.depth())?;
    let mut tape = Tape::new();
    let out: Vec<Var> = pyr_out.levels.iter().map(|t| tape.leaf(t.clone())).collect();
    let comp: Vec<Var> = pyr_comp.levels.iter().map(|t| tape.leaf(t.clone())).collect();
    let v = perceptual_term(&mut tape, &out, &comp, pyr_gt)?;
    Ok(tape.value(v).data()[0].to_acc())
}

/// Style distance between pyramid `a` and the ground-truth pyramid.
pub fn l_style<T: Scalar>(pyr_a: &FeaturePyramid<T>, pyr_gt: &FeaturePyramid<T>) -> Result<f64> {
    check_axis(Axis::Channel, pyr_gt.depth(), pyr_a.depth())?;
    let mut tape = Tape::new();
    let a: Vec<Var> = pyr_a.levels.iter().map(|t| tape.leaf(t.clone())).collect();
    let grams: Vec<Tensor<T>> = pyr_gt.levels.iter().map(gram_matrix).collect();
    let v = style_term(&mut tape, &a, &grams)?;
    Ok(tape.value(v).data()[0].to_acc())
}

pub fn l_tv<T: Scalar>(i_comp: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    eval_scalar(i_comp, |t, x| tv_term(t, x, mask))
}

/// All terms and the weighted total for one output.
pub fn l_total<T: Scalar>(
    i_out: &Tensor<T>,
    i_gt: &Tensor<T>,
    mask: &Tensor<T>,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let x = tape.leaf(i_out.clone());
    let graph = inpainting_loss(&mut tape, x, i_gt, mask, extractor, weights)?;
    Ok(graph.breakdown(&tape))
}

/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

/// Mean binary cross-entropy; `target` must be exactly 0 or 1.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    check_same_dims(pred.dims(), target.dims())?;
    eval_scalar(pred, |t, x| t.bce(x, target, BCE_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(dims, v).unwrap()
    }

    #[test]
    fn comp_extremes() {
        let out = t([1, 1, 1, 3], vec![1.0, 2.0, 3.0]);
        let gt = t([1, 1, 1, 3], vec![4.0, 5.0, 6.0]);
        let ones = Tensor::ones([1, 1, 1, 3]);
        let zeros = Tensor::zeros([1, 1, 1, 3]);
        assert_eq!(compose_comp(&out, &gt, &ones).unwrap(), gt);
        assert_eq!(compose_comp(&out, &gt, &zeros).unwrap(), out);
        let m = t([1, 1, 1, 3], vec![1.0, 0.0, 1.0]);
        assert_eq!(compose_comp(&gt, &gt, &m).unwrap(), gt);
    }

    #[test]
    fn l1_terms_hand_values() {
        let gt = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let out = Tensor::full([1, 1, 2, 2], 0.5);
        let zeros = Tensor::zeros([1, 1, 2, 2]);
        let ones = Tensor::ones([1, 1, 2, 2]);
        assert_eq!(l_masked(&out, &gt, &zeros).unwrap(), 0.5);
        assert_eq!(l_valid(&out, &gt, &ones).unwrap(), 0.5);
        assert_eq!(l_masked(&gt, &gt, &zeros).unwrap(), 0.0);

        let out = t([1, 1, 2, 2], vec![1.0, 9.9, 9.9, 9.9]);
        let m = t([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 1.0]);
        assert_eq!(l_masked(&out, &gt, &m).unwrap(), 0.25);
    }

    #[test]
    fn gram_hand_values() {
        let g = gram(&Tensor::<f64>::ones([1, 1, 2, 2]));
        assert_eq!(g.data(), &[1.0]);
        let psi = t([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 3.0]);
        let g = gram(&psi);
        assert_eq!(g.dims(), [1, 1, 2, 2]);
        assert_eq!(g.data()[1], 0.0);
        assert_eq!(g.data()[2], 0.0);
        assert_eq!(g.data()[3], 9.0 / 4.0);
    }

    #[test]
    fn tv_constant_and_no_hole() {
        let img = Tensor::<f64>::full([1, 1, 4, 4], 0.3);
        let m = t([1, 1, 4, 4], {
            let mut v = vec![1.0; 16];
            v[5] = 0.0;
            v
        });
        assert_eq!(l_tv(&img, &m).unwrap(), 0.0);
        let ramp = Tensor::from_fn([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        assert_eq!(l_tv(&ramp, &Tensor::ones([1, 1, 4, 4])).unwrap(), 0.0);
    }

    #[test]
    fn total_weights_hand_terms() {
        let w = LossWeights::default();
        let total = w.combine(1.0, 1.0, 1.0, 1.0, 1.0, 1.0);
        assert!((total - 247.15).abs() < 1e-12);
        let doubled = LossWeights { tv: 0.2, ..w };
        let b = LossBreakdown {
            tv: 3.0,
            ..Default::default()
        };
        assert_eq!(b.recompose(&doubled), 2.0 * b.recompose(&w));
    }

    #[test]
    fn bce_analytic_values() {
        let p = Tensor::<f64>::full([1, 1, 2, 2], 0.5);
        let tgt = t([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]);
        assert!((bce_loss(&p, &tgt).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = bce_loss(&tgt, &tgt).unwrap();
        assert!(perfect <= -(1.0 - BCE_EPS).ln() + 1e-15);
        let bad = t([1, 1, 2, 2], vec![0.0, 0.5, 1.0, 0.0]);
        assert!(matches!(bce_loss(&p, &bad), Err(TensorError::Contract(_))));
    }

    #[test]
    fn all_terms_vanish_at_ground_truth() {
        let gt = Tensor::<f64>::from_fn([2, 1, 16, 16], |b, _, y, x| {
            ((x * 3 + y * 5 + b) % 13) as f64 / 13.0
        });
        let mask = Tensor::from_fn([2, 1, 16, 16], |_, _, y, x| {
            if (4..9).contains(&y) && (5..11).contains(&x) {
                0.0
            } else {
                1.0
            }
        });
        let w = LossWeights::default();
        let b = l_total(&gt, &gt, &mask, &FeatureExtractor::default(), &w).unwrap();
        let fidelity = [b.masked, b.valid, b.perceptual, b.style_out, b.style_comp];
        assert_eq!(fidelity, [0.0; 5]);
        // the smoothness term sees only the composite, here the ground truth
        let tv = l_tv(&gt, &mask).unwrap();
        assert!(tv > 0.0);
        assert_eq!(b.tv, tv);
        assert_eq!(b.total, w.tv * tv);
    }
}
