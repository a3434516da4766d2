use super::{check_axis, Axis, Dims, Result, Scalar, Tensor, TensorError};
use crate::par;

/// Output extent of a convolution along one axis.
pub(crate) fn conv_output_extent(
    axis: Axis,
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<usize> {
    if input + 2 * pad < kernel {
        return Err(TensorError::Dimension {
            axis,
            expected: kernel,
            found: input + 2 * pad,
        });
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

/// Range of output coordinates whose tap `k` lands inside `0..input`.
#[inline]
fn tap_range(k: usize, pad: usize, stride: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    if input + pad <= k {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - k) / stride + 1).min(output);
    (lo.min(hi), hi)
}

pub(crate) fn check_conv_args<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
) -> Result<()> {
    let [_, cin, kh, kw] = w.dims();
    check_axis(Axis::Channel, cin, x.channels())?;
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::Contract(format!(
            "kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride == 0 {
        return Err(TensorError::Contract("stride must be positive".into()));
    }
    Ok(())
}

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_acc()).collect()
}

/// `out[i] += w * src[i * stride]` for every `i` in `out`.
#[inline(always)]
fn axpy_gather(out: &mut [f64], src: &[f64], w: f64, stride: usize) {
    if stride == 1 {
        let len = out.len();
        for (o, v) in out.iter_mut().zip(&src[..len]) {
            *o += w * v;
        }
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            *o += w * src[i * stride];
        }
    }
}

/// `out[i * stride] += w * src[i]` for every `i` in `src`.
#[inline(always)]
fn axpy_scatter(out: &mut [f64], src: &[f64], w: f64, stride: usize) {
    if stride == 1 {
        for (o, v) in out[..src.len()].iter_mut().zip(src) {
            *o += w * v;
        }
    } else {
        for (i, v) in src.iter().enumerate() {
            out[i * stride] += w * v;
        }
    }
}

/// `lane[i] += a[i] * b[i * stride]` for every `i` in `lane`.
#[inline(always)]
fn lane_product(lane: &mut [f64], a: &[f64], b: &[f64], stride: usize) {
    if stride == 1 {
        let len = lane.len();
        for ((l, x), y) in lane.iter_mut().zip(&a[..len]).zip(&b[..len]) {
            *l += x * y;
        }
    } else {
        for (i, (l, x)) in lane.iter_mut().zip(a).enumerate() {
            *l += x * b[i * stride];
        }
    }
}

/// Raw windowed dot products `sum(w * x)` per output element, in `f64`.
pub(crate) fn conv_accumulate<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims();
    let [cout, _, kh, kw] = w.dims();
    let plane = oh * ow;
    let mut acc = vec![0f64; n * cout * plane];
    let (xd, wdat) = (widen(x.data()), widen(w.data()));
    par::for_each_chunk(&mut acc, plane, |idx, out| {
        let (b, co) = (idx / cout, idx % cout);
        for ci in 0..cin {
            let xp = &xd[(b * cin + ci) * h * wd..][..h * wd];
            let wp = &wdat[(co * cin + ci) * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wp[ky * kw + kx];
                    let (ox0, ox1) = tap_range(kx, pad, stride, wd, ow);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let row = &xp[iy * wd + ox0 * stride + kx - pad..(iy + 1) * wd];
                        axpy_gather(&mut out[oy * ow + ox0..oy * ow + ox1], row, wv, stride);
                    }
                }
            }
        }
    });
    acc
}

/// Gradient with respect to the convolution input.
pub(crate) fn conv_grad_input<T: Scalar>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    x_dims: Dims,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, cin, h, wd] = x_dims;
    let [cout, _, kh, kw] = w.dims();
    let [_, _, oh, ow] = g.dims();
    let plane = h * wd;
    let mut dx = vec![T::zero(); n * cin * plane];
    let (gd, wdat) = (widen(g.data()), widen(w.data()));
    par::for_each_chunk(&mut dx, plane, |idx, out| {
        let (b, ci) = (idx / cin, idx % cin);
        let mut acc = vec![0f64; plane];
        for co in 0..cout {
            let gp = &gd[(b * cout + co) * oh * ow..][..oh * ow];
            let wp = &wdat[(co * cin + ci) * kh * kw..][..kh * kw];
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let wv = wp[ky * kw + kx];
                    let (ox0, ox1) = tap_range(kx, pad, stride, wd, ow);
                    if ox0 == ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - pad;
                        let arow = &mut acc[iy * wd + ox0 * stride + kx - pad..(iy + 1) * wd];
                        axpy_scatter(arow, &gp[oy * ow + ox0..oy * ow + ox1], wv, stride);
                    }
                }
            }
        }
        for (o, a) in out.iter_mut().zip(acc) {
            *o = T::from_acc(a);
        }
    });
    Tensor::from_raw(x_dims, dx)
}

/// Gradient with respect to the convolution weights, reduced over the batch.
pub(crate) fn conv_grad_weight<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w_dims: Dims,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, cin, h, wd] = x.dims();
    let [cout, _, kh, kw] = w_dims;
    let [_, _, oh, ow] = g.dims();
    let per_co = cin * kh * kw;
    let mut dw = vec![T::zero(); cout * per_co];
    let (gd, xd) = (widen(g.data()), widen(x.data()));
    par::for_each_chunk(&mut dw, per_co, |co, out| {
        // one partial sum per output column, reduced in order at the end
        let mut lane = vec![0f64; ow];
        for ci in 0..cin {
            for ky in 0..kh {
                let (oy0, oy1) = tap_range(ky, pad, stride, h, oh);
                for kx in 0..kw {
                    let (ox0, ox1) = tap_range(kx, pad, stride, wd, ow);
                    if ox0 == ox1 {
                        continue;
                    }
                    let lane = &mut lane[..ox1 - ox0];
                    lane.fill(0.0);
                    for b in 0..n {
                        let gp = &gd[(b * cout + co) * oh * ow..][..oh * ow];
                        let xp = &xd[(b * cin + ci) * h * wd..][..h * wd];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - pad;
                            lane_product(
                                lane,
                                &gp[oy * ow + ox0..oy * ow + ox1],
                                &xp[iy * wd + ox0 * stride + kx - pad..(iy + 1) * wd],
                                stride,
                            );
                        }
                    }
                    out[(ci * kh + ky) * kw + kx] = T::from_acc(lane.iter().sum());
                }
            }
        }
    });
    Tensor::from_raw(w_dims, dw)
}

/// Per-channel sum of `g` over batch and space, as a `[1, C, 1, 1]` vector.
pub(crate) fn bias_grad<T: Scalar>(g: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = g.dims();
    let plane = h * w;
    let sums = par::map_range(c, |ch| {
        let mut s = 0f64;
        for b in 0..n {
            s += g.data()[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|v| v.to_acc())
                .sum::<f64>();
        }
        T::from_acc(s)
    });
    Tensor::from_raw([1, c, 1, 1], sums)
}

/// Standard 2-D cross-correlation with zero padding.
///
/// `w` is `[Cout, Cin, Kh, Kw]` with odd kernel extents and `b` holds `Cout`
/// values. Output extents are `floor((H + 2*pad - Kh) / stride) + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    check_conv_args(x, w, stride)?;
    let [cout, _, kh, kw] = w.dims();
    check_axis(Axis::Channel, cout, b.len())?;
    let [n, _, h, wd] = x.dims();
    let oh = conv_output_extent(Axis::Height, h, kh, stride, pad)?;
    let ow = conv_output_extent(Axis::Width, wd, kw, stride, pad)?;
    let acc = conv_accumulate(x, w, stride, pad, oh, ow);
    let plane = oh * ow;
    let bias = b.data();
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, a)| T::from_acc(a + bias[(i / plane) % cout].to_acc()))
        .collect();
    Ok(Tensor::from_raw([n, cout, oh, ow], data))
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return Err(TensorError::Contract("upsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let [n, c, h, w] = x.dims();
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); n * c * oh * ow];
    par::for_each_chunk(&mut out, oh * ow, |idx, plane| {
        let src = &x.data()[idx * h * w..][..h * w];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..][..w];
            for ox in 0..ow {
                plane[oy * ow + ox] = row[ox / factor];
            }
        }
    });
    Ok(Tensor::from_raw([n, c, oh, ow], out))
}

pub(crate) fn upsample_backward<T: Scalar>(g: &Tensor<T>, factor: usize) -> Tensor<T> {
    if factor == 1 {
        return g.clone();
    }
    let [n, c, oh, ow] = g.dims();
    let (h, w) = (oh / factor, ow / factor);
    let mut out = vec![T::zero(); n * c * h * w];
    par::for_each_chunk(&mut out, h * w, |idx, plane| {
        let src = &g.data()[idx * oh * ow..][..oh * ow];
        let mut acc = vec![0f64; h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                acc[(oy / factor) * w + ox / factor] += src[oy * ow + ox].to_acc();
            }
        }
        for (o, a) in plane.iter_mut().zip(acc) {
            *o = T::from_acc(a);
        }
    });
    Tensor::from_raw([n, c, h, w], out)
}

/// Non-overlapping `k x k` average pooling; extents must divide by `k`.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if k == 0 {
        return Err(TensorError::Contract("pool size must be >= 1".into()));
    }
    check_axis(Axis::Height, h - h % k, h)?;
    check_axis(Axis::Width, w - w % k, w)?;
    let (oh, ow) = (h / k, w / k);
    let norm = (k * k) as f64;
    Ok(Tensor::from_fn([n, c, oh, ow], |b, ch, y, xx| {
        let mut s = 0f64;
        for dy in 0..k {
            for dx in 0..k {
                s += x.at(b, ch, y * k + dy, xx * k + dx).to_acc();
            }
        }
        T::from_acc(s / norm)
    }))
}

/// 2x2 max pooling with stride 2. Also returns, per output element, the flat
/// input index that won (first maximum in row-major window order).
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = x.dims();
    check_axis(Axis::Height, h - h % 2, h)?;
    check_axis(Axis::Width, w - w % 2, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = x.index(b, ch, 2 * y, 2 * xx);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(b, ch, 2 * y + dy, 2 * xx + dx);
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    out.push(x.data()[best]);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::from_raw([n, c, oh, ow], out), arg))
}

/// Concatenates along the channel axis; `a` occupies the leading channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    check_axis(Axis::Batch, n, nb)?;
    check_axis(Axis::Height, h, hb)?;
    check_axis(Axis::Width, w, wb)?;
    let plane = h * w;
    let mut data = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Ok(Tensor::from_raw([n, ca + cb, h, w], data))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative inputs are multiplied by the slope, which must lie in (0, 1).
    LeakyRelu(f64),
}

impl Activation {
    /// Default leaky slope for decoder layers.
    pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

    pub(crate) fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(s) if !(s > 0.0 && s < 1.0) => Err(TensorError::Contract(
                format!("leaky slope must lie in (0, 1), got {s}"),
            )),
            _ => Ok(()),
        }
    }

    #[inline]
    pub(crate) fn apply<T: Scalar>(self, v: T) -> T {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu(s) => {
                if v < T::zero() {
                    T::from_acc(s * v.to_acc())
                } else {
                    v
                }
            }
        }
    }

    #[inline]
    pub(crate) fn derivative<T: Scalar>(self, v: T) -> f64 {
        match self {
            Activation::Relu => {
                if v > T::zero() {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if v < T::zero() {
                    s
                } else {
                    1.0
                }
            }
        }
    }
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Result<Tensor<T>> {
    kind.validate()?;
    Ok(x.map(|v| kind.apply(v)))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_acc(sigmoid_f64(v.to_acc())))
}

#[inline]
pub(crate) fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Scalar = f32> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormState<T> {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::ones([1, channels, 1, 1]),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    /// Exponential moving average update from one batch.
    pub(crate) fn update(&mut self, mean: &[f64], unbiased_var: &[f64]) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.data_mut().iter_mut().zip(mean) {
            *r = T::from_acc((1.0 - m) * r.to_acc() + m * v);
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(unbiased_var) {
            *r = T::from_acc((1.0 - m) * r.to_acc() + m * v);
        }
    }
}

/// Per-channel mean and inverse standard deviation used by a normalization.
#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub train: bool,
}

pub(crate) fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    stats: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<(Tensor<T>, BnCache)> {
    let [n, c, h, w] = x.dims();
    check_axis(Axis::Channel, c, gamma.len())?;
    check_axis(Axis::Channel, c, beta.len())?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let (mean, var): (Vec<f64>, Vec<f64>) = match stats {
        Some((rm, rv)) => {
            check_axis(Axis::Channel, c, rm.len())?;
            check_axis(Axis::Channel, c, rv.len())?;
            (
                rm.data().iter().map(|v| v.to_acc()).collect(),
                rv.data().iter().map(|v| v.to_acc()).collect(),
            )
        }
        None => par::map_range(c, |ch| {
            let mut s = 0f64;
            for b in 0..n {
                s += x.data()[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| v.to_acc())
                    .sum::<f64>();
            }
            let mu = s / count;
            let mut ss = 0f64;
            for b in 0..n {
                ss += x.data()[(b * c + ch) * plane..][..plane]
                    .iter()
                    .map(|v| (v.to_acc() - mu).powi(2))
                    .sum::<f64>();
            }
            (mu, ss / count)
        })
        .into_iter()
        .unzip(),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut out, plane, |idx, o| {
        let ch = idx % c;
        let (g, bt) = (gamma.data()[ch].to_acc(), beta.data()[ch].to_acc());
        let src = &x.data()[idx * plane..][..plane];
        for (dst, v) in o.iter_mut().zip(src) {
            *dst = T::from_acc(g * (v.to_acc() - mean[ch]) * inv_std[ch] + bt);
        }
    });
    Ok((
        Tensor::from_raw(x.dims(), out),
        BnCache {
            mean,
            inv_std,
            batch_var: var,
            train: stats.is_none(),
        },
    ))
}

/// Returns (dx, dgamma, dbeta).
pub(crate) fn bn_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let count = (n * plane) as f64;
    // per channel: sum(g), sum(g * xhat)
    let sums: Vec<(f64, f64)> = par::map_range(c, |ch| {
        let (mut sg, mut sgx) = (0f64, 0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let gv = g.data()[i].to_acc();
                let xhat = (x.data()[i].to_acc() - cache.mean[ch]) * cache.inv_std[ch];
                sg += gv;
                sgx += gv * xhat;
            }
        }
        (sg, sgx)
    });
    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut dx, plane, |idx, o| {
        let ch = idx % c;
        let gm = gamma.data()[ch].to_acc();
        let (sg, sgx) = sums[ch];
        let (mu, inv) = (cache.mean[ch], cache.inv_std[ch]);
        let off = idx * plane;
        for (k, dst) in o.iter_mut().enumerate() {
            let gv = g.data()[off + k].to_acc();
            let v = if cache.train {
                let xhat = (x.data()[off + k].to_acc() - mu) * inv;
                gm * inv * (gv - sg / count - xhat * sgx / count)
            } else {
                gm * inv * gv
            };
            *dst = T::from_acc(v);
        }
    });
    let dgamma = sums.iter().map(|s| T::from_acc(s.1)).collect();
    let dbeta = sums.iter().map(|s| T::from_acc(s.0)).collect();
    (
        Tensor::from_raw(x.dims(), dx),
        Tensor::from_raw([1, c, 1, 1], dgamma),
        Tensor::from_raw([1, c, 1, 1], dbeta),
    )
}

/// Batch normalization over (N, H, W) per channel.
///
/// In [`BnMode::Train`] batch statistics are used (population variance) and
/// the running averages in `state` are updated with the unbiased variance.
/// A zero-variance channel maps to `beta` through the `eps` guard.
pub fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode,
    state: &mut BatchNormState<T>,
) -> Result<Tensor<T>> {
    match mode {
        BnMode::Train => {
            let (y, cache) = bn_forward(x, gamma, beta, state.eps, None)?;
            let count = (x.batch() * x.plane_len()) as f64;
            let unbiased: Vec<f64> = cache
                .batch_var
                .iter()
                .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                .collect();
            state.update(&cache.mean, &unbiased);
            Ok(y)
        }
        BnMode::Eval => {
            let (y, _) = bn_forward(
                x,
                gamma,
                beta,
                state.eps,
                Some((&state.running_mean, &state.running_var)),
            )?;
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(dims: Dims, rng: &mut Xoshiro256PlusPlus) -> Tensor<f64> {
        Tensor::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    /// Independent direct convolution with explicit bounds checks.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], s: usize, p: usize) -> Tensor<f64> {
        let [n, cin, h, wd] = x.dims();
        let [cout, _, kh, kw] = w.dims();
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (wd + 2 * p - kw) / s + 1;
        Tensor::from_fn([n, cout, oh, ow], |bb, co, oy, ox| {
            let mut acc = b[co];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * s + ky) as isize - p as isize;
                        let ix = (ox * s + kx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += w.at(co, ci, ky, kx) * x.at(bb, ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_scalar_multiply_add() {
        let x = Tensor::scalar(2.0f32);
        let w = Tensor::scalar(3.0f32);
        let b = Tensor::vector(vec![1.0f32]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn conv_ones_sum_nine() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::<f32>::ones([1, 1, 3, 3]);
        let b = Tensor::vector(vec![0.0f32]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        let x = random([1, 2, 5, 5], &mut rng);
        let w = random([3, 2, 3, 3], &mut rng);
        let b = vec![0.1, -0.2, 0.3];
        let y = conv2d(&x, &w, &Tensor::vector(b.clone()).unwrap(), 1, 1).unwrap();
        let want = naive_conv(&x, &w, &b, 1, 1);
        assert_eq!(y.dims(), [1, 3, 5, 5]);
        assert!(y.max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn conv_small_extents_oracle_sweep() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(5);
        for _ in 0..60 {
            let n = rng.random_range(1..3);
            let cin = rng.random_range(1..4);
            let cout = rng.random_range(1..4);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let h = rng.random_range(k..=8);
            let wd = rng.random_range(k..=8);
            let s = rng.random_range(1..3);
            let p = rng.random_range(0..=k / 2);
            let x = random([n, cin, h, wd], &mut rng);
            let w = random([cout, cin, k, k], &mut rng);
            let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv2d(&x, &w, &Tensor::vector(b.clone()).unwrap(), s, p).unwrap();
            assert!(got.max_abs_diff(&naive_conv(&x, &w, &b, s, p)) < 1e-5);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::<f32>::zeros([1, 2, 4, 4]);
        let w = Tensor::<f32>::zeros([1, 3, 3, 3]);
        let b = Tensor::<f32>::zeros([1, 1, 1, 1]);
        match conv2d(&x, &w, &b, 1, 0) {
            Err(TensorError::Dimension { axis, .. }) => assert_eq!(axis, Axis::Channel),
            other => panic!("unexpected {other:?}"),
        }
        let w = Tensor::<f32>::zeros([1, 2, 2, 2]);
        assert!(matches!(
            conv2d(&x, &w, &b, 1, 0),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn upsample_replicates_pixels() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        assert_eq!(upsample_nearest(&x, 1).unwrap(), x);
    }

    #[test]
    fn upsample_then_average_pool_recovers_input() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        let x = random([2, 3, 4, 5], &mut rng);
        for f in 1..4 {
            let back = avg_pool(&upsample_nearest(&x, f).unwrap(), f).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-12);
        }
    }

    #[test]
    fn activations() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        let r = activation(&x, Activation::Relu).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert_eq!(activation(&r, Activation::Relu).unwrap(), r);
        let x = Tensor::from_vec([1, 1, 1, 2], vec![-1.0f32, 2.0]).unwrap();
        let l = activation(&x, Activation::LeakyRelu(0.2)).unwrap();
        assert_eq!(l.data(), &[-0.2, 2.0]);
        assert!(activation(&x, Activation::LeakyRelu(1.5)).is_err());
    }

    #[test]
    fn concat_shapes_and_slices() {
        let a = Tensor::from_fn([1, 1, 2, 2], |_, _, y, x| (y * 2 + x) as f32);
        let b = Tensor::<f32>::ones([1, 2, 2, 2]);
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.dims(), [1, 3, 2, 2]);
        assert_eq!(c.slice_channels(0..1).unwrap(), a);
        let empty = Tensor::<f32>::zeros([1, 0, 2, 2]);
        assert_eq!(concat_channels(&a, &empty).unwrap(), a);
        let bad = Tensor::<f32>::zeros([1, 1, 3, 2]);
        assert!(matches!(
            concat_channels(&a, &bad),
            Err(TensorError::Dimension { axis: Axis::Height, .. })
        ));
    }

    #[test]
    fn batch_norm_two_point_and_constant_channel() {
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0f64, 3.0, 5.0, 5.0]).unwrap();
        let gamma = Tensor::vector(vec![1.0, 1.0]).unwrap();
        let beta = Tensor::vector(vec![0.0, 0.7]).unwrap();
        let mut st = BatchNormState::new(2);
        let y = batch_norm(&x, &gamma, &beta, BnMode::Train, &mut st).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-5);
        assert!((y.data()[1] - 1.0).abs() < 1e-5);
        assert_eq!(y.data()[2], 0.7);
        assert_eq!(y.data()[3], 0.7);
        // running stats moved toward the batch statistics
        assert!((st.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((st.running_mean.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_moments_and_affine_inversion() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(21);
        let x = random([3, 4, 5, 6], &mut rng).map(|v| 3.0 * v + 1.5);
        let gamma = Tensor::vector(vec![2.0, -0.5, 1.0, 0.3]).unwrap();
        let beta = Tensor::vector(vec![0.1, -1.0, 2.0, 0.0]).unwrap();
        let mut st = BatchNormState::new(4);
        let y = batch_norm(&x, &gamma, &beta, BnMode::Train, &mut st).unwrap();
        let count = (3 * 5 * 6) as f64;
        for ch in 0..4 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| (0..5).flat_map(move |yy| (0..6).map(move |xx| (b, yy, xx))))
                .map(|(b, yy, xx)| y.at(b, ch, yy, xx))
                .collect();
            let mean = vals.iter().sum::<f64>() / count;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count).sqrt();
            assert!((mean - beta.data()[ch]).abs() < 1e-5);
            assert!((std - gamma.data()[ch].abs()).abs() < 1e-4);
            // undo the affine part and compare with direct standardization
            let xs: Vec<f64> = (0..3)
                .flat_map(|b| (0..5).flat_map(move |yy| (0..6).map(move |xx| (b, yy, xx))))
                .map(|(b, yy, xx)| x.at(b, ch, yy, xx))
                .collect();
            let xm = xs.iter().sum::<f64>() / count;
            let xsd = (xs.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / count).sqrt();
            for (yv, xv) in vals.iter().zip(&xs) {
                let standardized = (yv - beta.data()[ch]) / gamma.data()[ch];
                assert!((standardized - (xv - xm) / xsd).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let x = Tensor::from_vec(
            [1, 1, 2, 4],
            vec![1.0f32, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 0.0],
        )
        .unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }
}
