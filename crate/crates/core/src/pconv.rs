//! Partial convolution: a convolution evaluated over valid pixels only,
//! rescaled by `window_size / valid_count`, together with the mask update
//! that marks an output valid when its window saw any valid input.
//!
//! One mask channel is shared by every feature channel. Zero padding is
//! treated as invalid, and the window size always counts the full kernel
//! footprint, so border windows are upweighted exactly like windows that
//! overlap a hole. A window with no valid input produces exactly `0`; the
//! bias is not added there.

use crate::tensor::{
    bias_grad, check_axis, check_conv_args, conv_accumulate, conv_grad_input, conv_grad_weight,
    conv_output_extent,
    Axis, Result, Scalar, Tensor, TensorError,
};

/// Feature map paired with its spatial validity mask (1 = valid, 0 = hole).
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedFeature<T: Scalar = f32> {
    features: Tensor<T>,
    mask: Tensor<T>,
}

impl<T: Scalar> MaskedFeature<T> {
    /// `mask` must be `(N, 1, H, W)` matching the features and hold only 0 or 1.
    pub fn new(features: Tensor<T>, mask: Tensor<T>) -> Result<Self> {
        check_mask(&features, &mask)?;
        Ok(MaskedFeature { features, mask })
    }

    /// All-valid mask for `features`.
    pub fn unmasked(features: Tensor<T>) -> Self {
        let [n, _, h, w] = features.dims();
        MaskedFeature {
            features,
            mask: Tensor::ones([n, 1, h, w]),
        }
    }

    pub fn features(&self) -> &Tensor<T> {
        &self.features
    }

    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }

    pub fn into_parts(self) -> (Tensor<T>, Tensor<T>) {
        (self.features, self.mask)
    }

    pub fn valid_count(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == T::one()).count()
    }
}

pub(crate) fn check_mask<T: Scalar>(features: &Tensor<T>, mask: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = features.dims();
    let [mn, mc, mh, mw] = mask.dims();
    check_axis(Axis::Batch, n, mn)?;
    check_axis(Axis::Channel, 1, mc)?;
    check_axis(Axis::Height, h, mh)?;
    check_axis(Axis::Width, w, mw)?;
    if !mask.is_binary() {
        return Err(TensorError::Contract(
            "mask values must be exactly 0 or 1".into(),
        ));
    }
    Ok(())
}

/// Geometry of one masked convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerGeometry {
    /// Stride-1 layer with "same" padding.
    pub fn same(kernel: usize) -> Self {
        LayerGeometry {
            kernel,
            stride: 1,
            pad: kernel / 2,
        }
    }
}

/// Valid-pixel count per output window, `(N, OH, OW)` flattened, plus the
/// updated mask.
fn window_counts<T: Scalar>(
    mask: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(Vec<u32>, Tensor<T>, usize, usize)> {
    let [n, _, h, w] = mask.dims();
    let oh = conv_output_extent(Axis::Height, h, kh, stride, pad)?;
    let ow = conv_output_extent(Axis::Width, w, kw, stride, pad)?;
    let md = mask.data();
    let mut counts = vec![0u32; n * oh * ow];
    for b in 0..n {
        let mp = &md[b * h * w..(b + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut cnt = 0u32;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let row = &mp[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w && row[ix as usize] == T::one() {
                            cnt += 1;
                        }
                    }
                }
                counts[(b * oh + oy) * ow + ox] = cnt;
            }
        }
    }
    let out_mask = Tensor::from_raw(
        [n, 1, oh, ow],
        counts
            .iter()
            .map(|&c| if c > 0 { T::one() } else { T::zero() })
            .collect(),
    );
    Ok((counts, out_mask, oh, ow))
}

/// Features with hole pixels replaced by an exact `0`.
pub(crate) fn masked_input<T: Scalar>(x: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let mut data = x.data().to_vec();
    for b in 0..n {
        let mp = &mask.data()[b * plane..(b + 1) * plane];
        for ch in 0..c {
            let dst = &mut data[(b * c + ch) * plane..][..plane];
            for (v, &m) in dst.iter_mut().zip(mp) {
                if m != T::one() {
                    *v = T::zero();
                }
            }
        }
    }
    Tensor::from_raw(x.dims(), data)
}

pub(crate) struct PconvOutput<T: Scalar> {
    pub features: Tensor<T>,
    pub mask: Tensor<T>,
    pub counts: Vec<u32>,
}

pub(crate) fn pconv_kernel<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<PconvOutput<T>> {
    check_conv_args(x, w, stride)?;
    check_mask(x, mask)?;
    let [cout, _, kh, kw] = w.dims();
    check_axis(Axis::Channel, cout, b.len())?;
    let (counts, out_mask, oh, ow) = window_counts(mask, kh, kw, stride, pad)?;
    let xm = masked_input(x, mask);
    let acc = conv_accumulate(&xm, w, stride, pad, oh, ow);
    let footprint = (kh * kw) as f64;
    let plane = oh * ow;
    let bias = b.data();
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let (bc, pos) = (i / plane, i % plane);
            let (bb, co) = (bc / cout, bc % cout);
            let cnt = counts[bb * plane + pos];
            if cnt == 0 {
                T::zero()
            } else if cnt as f64 == footprint {
                T::from_acc(a + bias[co].to_acc())
            } else {
                T::from_acc(a * footprint / cnt as f64 + bias[co].to_acc())
            }
        })
        .collect();
    Ok(PconvOutput {
        features: Tensor::from_raw([x.batch(), cout, oh, ow], data),
        mask: out_mask,
        counts,
    })
}

/// Gradients of a partial convolution with the mask held constant.
#[derive(Clone, Debug, PartialEq)]
pub struct PconvGrads<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    /// Exactly zero at every hole position.
    pub features: Tensor<T>,
}

pub(crate) fn pconv_grads<T: Scalar>(
    x: &Tensor<T>,
    mask: &Tensor<T>,
    w: &Tensor<T>,
    counts: &[u32],
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> PconvGrads<T> {
    let [_, _, kh, kw] = w.dims();
    let [n, cout, oh, ow] = g.dims();
    let plane = oh * ow;
    let footprint = (kh * kw) as f64;
    // upstream gradient through the renormalization; zero where invalid
    let mut scaled = g.clone();
    let mut bias_src = g.clone();
    for (i, (s, bsrc)) in scaled
        .data_mut()
        .iter_mut()
        .zip(bias_src.data_mut().iter_mut())
        .enumerate()
    {
        let (bb, pos) = (i / plane / cout, i % plane);
        let cnt = counts[bb * plane + pos];
        if cnt == 0 {
            *s = T::zero();
            *bsrc = T::zero();
        } else if cnt as f64 != footprint {
            *s = T::from_acc(s.to_acc() * footprint / cnt as f64);
        }
    }
    debug_assert_eq!(n, x.batch());
    let xm = masked_input(x, mask);
    let dxm = conv_grad_input(&scaled, w, x.dims(), stride, pad);
    PconvGrads {
        weight: conv_grad_weight(&scaled, &xm, w.dims(), stride, pad),
        bias: bias_grad(&bias_src),
        features: masked_input(&dxm, mask),
    }
}

/// Renormalized masked convolution plus mask update.
///
/// `w` is `[Cout, Cin, Kh, Kw]` (odd extents) and `b` holds `Cout` values.
/// Output features at fully masked windows are exactly 0 and their output
/// mask is 0; every other output is
/// `sum(w * x * m) * (Kh * Kw) / sum(m) + b` with mask 1.
pub fn pconv_forward<T: Scalar>(
    input: &MaskedFeature<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<MaskedFeature<T>> {
    let out = pconv_kernel(&input.features, &input.mask, w, b, stride, pad)?;
    Ok(MaskedFeature {
        features: out.features,
        mask: out.mask,
    })
}

/// Backward pass of [`pconv_forward`] for an upstream gradient on its output
/// features.
pub fn pconv_backward<T: Scalar>(
    input: &MaskedFeature<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    upstream: &Tensor<T>,
) -> Result<PconvGrads<T>> {
    let out = pconv_kernel(&input.features, &input.mask, w, b, stride, pad)?;
    let od = out.features.dims();
    for (i, axis) in [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width]
        .into_iter()
        .enumerate()
    {
        check_axis(axis, od[i], upstream.dims()[i])?;
    }
    Ok(pconv_grads(
        &input.features,
        &input.mask,
        w,
        &out.counts,
        upstream,
        stride,
        pad,
    ))
}

/// Mask update alone: 1 where the window held any valid pixel.
pub fn update_mask<T: Scalar>(mask: &Tensor<T>, layer: LayerGeometry) -> Result<Tensor<T>> {
    if !mask.is_binary() {
        return Err(TensorError::Contract(
            "mask values must be exactly 0 or 1".into(),
        ));
    }
    if layer.kernel.is_multiple_of(2) || layer.stride == 0 {
        return Err(TensorError::Contract(format!(
            "invalid layer geometry {layer:?}"
        )));
    }
    let (_, m, _, _) = window_counts(mask, layer.kernel, layer.kernel, layer.stride, layer.pad)?;
    Ok(m)
}

/// Masks after each layer of a chain, starting from `initial`.
/// Element `d` is the mask output by layer `d`.
pub fn propagate_mask_chain<T: Scalar>(
    initial: &Tensor<T>,
    layers: &[LayerGeometry],
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::with_capacity(layers.len());
    let mut cur = initial.clone();
    for &layer in layers {
        cur = update_mask(&cur, layer)?;
        out.push(cur.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn vec1(v: Vec<f64>) -> Tensor<f64> {
        Tensor::vector(v).unwrap()
    }

    #[test]
    fn all_valid_mask_equals_conv() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let x = Tensor::from_fn([2, 3, 6, 7], |_, _, _, _| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([4, 3, 3, 3], |_, _, _, _| rng.random_range(-1.0..1.0));
        let b = vec1(vec![0.5, -0.5, 0.0, 1.0]);
        let out = pconv_forward(&MaskedFeature::unmasked(x.clone()), &w, &b, 1, 0).unwrap();
        assert_eq!(out.features(), &conv2d(&x, &w, &b, 1, 0).unwrap());
        assert!(out.mask().data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn fully_masked_window_ignores_bias() {
        let x = Tensor::<f64>::ones([1, 1, 3, 3]);
        let m = Tensor::zeros([1, 1, 3, 3]);
        let w = Tensor::ones([1, 1, 3, 3]);
        let out = pconv_forward(&MaskedFeature::new(x, m).unwrap(), &w, &vec1(vec![5.0]), 1, 0)
            .unwrap();
        assert_eq!(out.features().data(), &[0.0]);
        assert_eq!(out.mask().data(), &[0.0]);
    }

    #[test]
    fn three_valid_pixels_renormalize() {
        let x = Tensor::from_vec(
            [1, 1, 3, 3],
            vec![1.0, 2.0, 3.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0],
        )
        .unwrap();
        let m = Tensor::from_vec(
            [1, 1, 3, 3],
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let w = Tensor::ones([1, 1, 3, 3]);
        let out =
            pconv_forward(&MaskedFeature::new(x, m).unwrap(), &w, &vec1(vec![0.0]), 1, 0).unwrap();
        assert_eq!(out.features().data(), &[18.0]);
        assert_eq!(out.mask().data(), &[1.0]);
    }

    #[test]
    fn hole_values_do_not_leak() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let x = Tensor::from_fn([1, 2, 8, 8], |_, _, _, _| rng.random_range(-1.0f32..1.0));
        let m = Tensor::from_fn([1, 1, 8, 8], |_, _, _, _| {
            if rng.random_bool(0.6) {
                1.0f32
            } else {
                0.0
            }
        });
        let scrambled = Tensor::from_fn(x.dims(), |n, c, y, xx| {
            if m.at(n, 0, y, xx) == 0.0 {
                1e6 * (c as f32 + 1.0) - y as f32
            } else {
                x.at(n, c, y, xx)
            }
        });
        let w = Tensor::from_fn([3, 2, 3, 3], |_, _, _, _| rng.random_range(-1.0f32..1.0));
        let b = Tensor::vector(vec![0.1f32, 0.2, -0.3]).unwrap();
        let a = pconv_forward(&MaskedFeature::new(x, m.clone()).unwrap(), &w, &b, 2, 1).unwrap();
        let s = pconv_forward(&MaskedFeature::new(scrambled, m).unwrap(), &w, &b, 2, 1).unwrap();
        assert_eq!(
            a.features().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            s.features().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_non_binary_mask() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let m = Tensor::full([1, 1, 3, 3], 0.5);
        assert!(matches!(
            MaskedFeature::new(x, m),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn backward_zero_at_holes() {
        let x = Tensor::<f64>::from_fn([1, 1, 5, 5], |_, _, y, x| (y * 5 + x) as f64 * 0.1);
        let m = Tensor::from_fn([1, 1, 5, 5], |_, _, y, x| if (1..4).contains(&y) && x == 2 { 0.0 } else { 1.0 });
        let w = Tensor::from_fn([2, 1, 3, 3], |o, _, y, x| (o + y + 2 * x) as f64 * 0.1 - 0.2);
        let b = vec1(vec![0.0, 0.0]);
        let input = MaskedFeature::new(x, m.clone()).unwrap();
        let g = Tensor::ones([1, 2, 5, 5]);
        let grads = pconv_backward(&input, &w, &b, 1, 1, &g).unwrap();
        for (gv, mv) in grads.features.data().iter().zip(m.data()) {
            if *mv == 0.0 {
                assert_eq!(*gv, 0.0);
            }
        }
        assert!(grads.features.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn backward_with_full_mask_matches_conv_gradients() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(4);
        let x = Tensor::from_fn([2, 2, 5, 5], |_, _, _, _| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn([3, 2, 3, 3], |_, _, _, _| rng.random_range(-1.0..1.0));
        let g = Tensor::from_fn([2, 3, 3, 3], |_, _, _, _| rng.random_range(-1.0..1.0));
        let b = vec1(vec![0.0; 3]);
        let grads = pconv_backward(&MaskedFeature::unmasked(x.clone()), &w, &b, 1, 0, &g).unwrap();
        assert_eq!(grads.weight, conv_grad_weight(&g, &x, w.dims(), 1, 0));
        assert_eq!(grads.features, conv_grad_input(&g, &w, x.dims(), 1, 0));
        assert_eq!(grads.bias, bias_grad(&g));
    }

    #[test]
    fn mask_chain_fixed_point_and_single_hole() {
        let ones = Tensor::<f32>::ones([1, 1, 6, 6]);
        let chain = propagate_mask_chain(&ones, &[LayerGeometry::same(3); 3]).unwrap();
        assert!(chain.iter().all(|m| m.data().iter().all(|&v| v == 1.0)));

        let mut m = Tensor::<f32>::ones([1, 1, 5, 5]);
        m.set(12, 0.0).unwrap();
        let chain = propagate_mask_chain(&m, &[LayerGeometry::same(3)]).unwrap();
        assert!(chain[0].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn seven_pixel_hole_closes_after_four_layers() {
        let m = Tensor::<f32>::from_fn([1, 1, 15, 15], |_, _, y, x| {
            if (4..11).contains(&y) && (4..11).contains(&x) {
                0.0
            } else {
                1.0
            }
        });
        let chain = propagate_mask_chain(&m, &[LayerGeometry::same(3); 4]).unwrap();
        let holes: Vec<usize> = chain
            .iter()
            .map(|t| t.data().iter().filter(|&&v| v == 0.0).count())
            .collect();
        assert_eq!(holes, vec![25, 9, 1, 0]);
    }
}
