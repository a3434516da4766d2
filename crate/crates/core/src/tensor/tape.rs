use super::ops::{self, bn_backward, bn_forward, upsample_backward, Activation, BnCache};
use super::{check_axis, Axis, Dims, Result, Scalar, Tensor, TensorError};
use crate::pconv;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Scalar> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    PConv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        mask: Tensor<T>,
        counts: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: BnCache,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Sigmoid {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    /// `x * scale + offset` with constant tensors; only `scale` matters for backward.
    AffineConst {
        x: Var,
        scale: Tensor<T>,
    },
    Sum {
        x: Var,
    },
    Gram {
        x: Var,
    },
    /// `sum(weight * |x - target|) / denom`
    WeightedL1 {
        x: Var,
        target: Tensor<T>,
        weight: Option<Tensor<T>>,
        denom: f64,
    },
    /// Absolute neighbour differences over pixel pairs inside `region`.
    TotalVariation {
        x: Var,
        region: Vec<bool>,
        denom: f64,
    },
    Bce {
        p: Var,
        target: Tensor<T>,
        eps: f64,
    },
    Linear {
        terms: Vec<(Var, f64)>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Statistics of one training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance, as fed to running averages.
    pub var: Vec<f64>,
}

/// Normalization source for [`Tape::batch_norm`].
pub enum BnForward<'a, T: Scalar> {
    Batch { eps: f64 },
    Running {
        mean: &'a Tensor<T>,
        var: &'a Tensor<T>,
        eps: f64,
    },
}

/// Record of one forward pass, replayed in reverse by [`Tape::backward`].
///
/// A tape is built per forward pass and dropped after the backward pass.
/// Recorded values are not screened for NaN or infinity; callers check the
/// loss and gradients they read back.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Dims>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`; exactly zero for values not on a path to the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.dims[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.dims[v.0]))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        Ok(self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Partial convolution of `x` under a constant `mask`; returns the
    /// output and its updated mask.
    pub fn pconv(
        &mut self,
        x: Var,
        mask: &Tensor<T>,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<(Var, Tensor<T>)> {
        let out = pconv::pconv_kernel(
            self.value(x),
            mask,
            self.value(w),
            self.value(b),
            stride,
            pad,
        )?;
        let v = self.push(
            out.features,
            Op::PConv {
                x,
                w,
                b,
                stride,
                pad,
                mask: mask.clone(),
                counts: out.counts,
            },
        );
        Ok((v, out.mask))
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        source: BnForward<'_, T>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (eps, stats) = match source {
            BnForward::Batch { eps } => (eps, None),
            BnForward::Running { mean, var, eps } => (eps, Some((mean, var))),
        };
        let (y, cache) = bn_forward(self.value(x), self.value(gamma), self.value(beta), eps, stats)?;
        let batch = cache.train.then(|| {
            let count = (self.value(x).batch() * self.value(x).plane_len()) as f64;
            BatchStats {
                mean: cache.mean.clone(),
                var: cache
                    .batch_var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect(),
            }
        });
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
        );
        Ok((v, batch))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = ops::activation(self.value(x), kind)?;
        Ok(self.push(y, Op::Act { x, kind }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_nearest(self.value(x), factor)?;
        Ok(self.push(y, Op::Upsample { x, factor }))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (y, argmax) = ops::max_pool2(self.value(x))?;
        Ok(self.push(y, Op::MaxPool { x, argmax }))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::Concat { a, b }))
    }

    fn same_dims(&self, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dims(), self.value(b).dims());
        for (i, axis) in [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width]
            .into_iter()
            .enumerate()
        {
            check_axis(axis, da[i], db[i])?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let y = Tensor::from_raw(va.dims(), data);
        Ok(self.push(y, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let y = Tensor::from_raw(va.dims(), data);
        Ok(self.push(y, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let y = self.value(x).map(|v| T::from_acc(v.to_acc() * k));
        self.push(y, Op::Scale { x, k })
    }

    /// Elementwise `x * scale + offset` with constant `scale` and `offset`.
    pub fn affine_const(&mut self, x: Var, scale: &Tensor<T>, offset: &Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        for t in [scale, offset] {
            for (i, axis) in [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width]
                .into_iter()
                .enumerate()
            {
                check_axis(axis, vx.dims()[i], t.dims()[i])?;
            }
        }
        let data = vx
            .data()
            .iter()
            .zip(scale.data())
            .zip(offset.data())
            .map(|((v, s), o)| *v * *s + *o)
            .collect();
        let y = Tensor::from_raw(vx.dims(), data);
        Ok(self.push(
            y,
            Op::AffineConst {
                x,
                scale: scale.clone(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(T::from_acc(s)), Op::Sum { x })
    }

    /// Normalized Gram matrix per batch item: `(N, 1, C, C)` with entries
    /// `sum_k psi[c1,k] psi[c2,k] / (C * H * W)`.
    pub fn gram(&mut self, x: Var) -> Var {
        let y = gram_matrix(self.value(x));
        self.push(y, Op::Gram { x })
    }

    /// `sum(weight * |x - target|) / denom` as a scalar.
    pub fn weighted_l1(
        &mut self,
        x: Var,
        target: &Tensor<T>,
        weight: Option<&Tensor<T>>,
        denom: f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        check_axis(Axis::Batch, vx.len(), target.len())?;
        if let Some(w) = weight {
            check_axis(Axis::Batch, vx.len(), w.len())?;
        }
        let mut s = 0f64;
        for (i, (a, t)) in vx.data().iter().zip(target.data()).enumerate() {
            let wt = weight.map_or(1.0, |w| w.data()[i].to_acc());
            if wt != 0.0 {
                s += wt * (a.to_acc() - t.to_acc()).abs();
            }
        }
        Ok(self.push(
            Tensor::scalar(T::from_acc(s / denom)),
            Op::WeightedL1 {
                x,
                target: target.clone(),
                weight: weight.cloned(),
                denom,
            },
        ))
    }

    /// Sum of `|x[i,j+1] - x[i,j]|` and `|x[i+1,j] - x[i,j]|` over pairs with
    /// both pixels in `region` (one flag per (n, y, x), shared by channels),
    /// divided by `denom`.
    pub fn total_variation(&mut self, x: Var, region: Vec<bool>, denom: f64) -> Result<Var> {
        let vx = self.value(x);
        let [n, _, h, w] = vx.dims();
        check_axis(Axis::Batch, n * h * w, region.len())?;
        let s = tv_pairs(vx, &region, |_, _, d| d.abs());
        Ok(self.push(
            Tensor::scalar(T::from_acc(s / denom)),
            Op::TotalVariation { x, region, denom },
        ))
    }

    /// Mean binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        let vp = self.value(p);
        check_axis(Axis::Batch, vp.len(), target.len())?;
        if !target.is_binary() {
            return Err(TensorError::Contract(
                "binary cross-entropy targets must be 0 or 1".into(),
            ));
        }
        let mut s = 0f64;
        for (pv, tv) in vp.data().iter().zip(target.data()) {
            let q = pv.to_acc().clamp(eps, 1.0 - eps);
            let t = tv.to_acc();
            s -= t * q.ln() + (1.0 - t) * (1.0 - q).ln();
        }
        let mean = s / vp.len() as f64;
        Ok(self.push(
            Tensor::scalar(T::from_acc(mean)),
            Op::Bce {
                p,
                target: target.clone(),
                eps,
            },
        ))
    }

    /// Weighted sum of scalar values, accumulated in `f64`.
    pub fn linear(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0f64;
        for &(v, k) in terms {
            let val = self.value(v);
            if val.len() != 1 {
                return Err(TensorError::NotScalar(val.dims()));
            }
            s += k * val.data()[0].to_acc();
        }
        Ok(self.push(
            Tensor::scalar(T::from_acc(s)),
            Op::Linear {
                terms: terms.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Each recorded operation up to
    /// `loss` is visited once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.dims()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.dims()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims()).collect(),
        })
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                acc(*x, ops::conv_grad_input(g, wv, xv.dims(), *stride, *pad));
                acc(*w, ops::conv_grad_weight(g, xv, wv.dims(), *stride, *pad));
                acc(*b, ops::bias_grad(g));
            }
            Op::PConv {
                x,
                w,
                b,
                stride,
                pad,
                mask,
                counts,
            } => {
                let wv = self.value(*w);
                let pg = pconv::pconv_grads(self.value(*x), mask, wv, counts, g, *stride, *pad);
                acc(*x, pg.features);
                acc(*w, pg.weight);
                acc(*b, pg.bias);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = bn_backward(g, self.value(*x), self.value(*gamma), cache);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gv)| T::from_acc(kind.derivative(*v) * gv.to_acc()))
                    .collect();
                acc(*x, Tensor::from_raw(xv.dims(), data));
            }
            Op::Sigmoid { x } => {
                let data = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(s, gv)| {
                        let s = s.to_acc();
                        T::from_acc(s * (1.0 - s) * gv.to_acc())
                    })
                    .collect();
                acc(*x, Tensor::from_raw(node.value.dims(), data));
            }
            Op::Upsample { x, factor } => acc(*x, upsample_backward(g, *factor)),
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.value(*x).dims());
                let d = dx.data_mut();
                for (o, &i) in argmax.iter().enumerate() {
                    d[i] = d[i] + g.data()[o];
                }
                acc(*x, dx);
            }
            Op::Concat { a, b } => {
                let ca = self.value(*a).channels();
                let cb = self.value(*b).channels();
                acc(*a, g.slice_channels(0..ca).expect("concat grad split"));
                acc(*b, g.slice_channels(ca..ca + cb).expect("concat grad split"));
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
                let db = g.data().iter().zip(va.data()).map(|(x, y)| *x * *y).collect();
                acc(*a, Tensor::from_raw(va.dims(), da));
                acc(*b, Tensor::from_raw(vb.dims(), db));
            }
            Op::Scale { x, k } => acc(*x, g.map(|v| T::from_acc(v.to_acc() * k))),
            Op::AffineConst { x, scale } => {
                let data = g
                    .data()
                    .iter()
                    .zip(scale.data())
                    .map(|(a, s)| *a * *s)
                    .collect();
                acc(*x, Tensor::from_raw(g.dims(), data));
            }
            Op::Sum { x } => {
                let gs = g.data()[0];
                acc(*x, Tensor::full(self.value(*x).dims(), gs));
            }
            Op::Gram { x } => acc(*x, gram_backward(self.value(*x), g)),
            Op::WeightedL1 {
                x,
                target,
                weight,
                denom,
            } => {
                let gs = g.data()[0].to_acc() / denom;
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .enumerate()
                    .map(|(i, (a, t))| {
                        let wt = weight.as_ref().map_or(1.0, |w| w.data()[i].to_acc());
                        let d = a.to_acc() - t.to_acc();
                        // subgradient of |d| at 0 is 0
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        T::from_acc(gs * wt * sign)
                    })
                    .collect();
                acc(*x, Tensor::from_raw(xv.dims(), data));
            }
            Op::TotalVariation { x, region, denom } => {
                let xv = self.value(*x);
                let gs = g.data()[0].to_acc() / denom;
                let mut dx = vec![0f64; xv.len()];
                tv_pairs(xv, region, |i, j, d| {
                    // d = x[j] - x[i]
                    let s = if d > 0.0 {
                        gs
                    } else if d < 0.0 {
                        -gs
                    } else {
                        0.0
                    };
                    dx[j] += s;
                    dx[i] -= s;
                    0.0
                });
                acc(
                    *x,
                    Tensor::from_raw(xv.dims(), dx.into_iter().map(T::from_acc).collect()),
                );
            }
            Op::Bce { p, target, eps } => {
                let pv = self.value(*p);
                let gs = g.data()[0].to_acc() / pv.len() as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(pp, tt)| {
                        let (q, t) = (pp.to_acc(), tt.to_acc());
                        if q <= *eps || q >= 1.0 - eps {
                            T::zero()
                        } else {
                            T::from_acc(gs * (-t / q + (1.0 - t) / (1.0 - q)))
                        }
                    })
                    .collect();
                acc(*p, Tensor::from_raw(pv.dims(), data));
            }
            Op::Linear { terms } => {
                let gs = g.data()[0].to_acc();
                for &(v, k) in terms {
                    acc(v, Tensor::scalar(T::from_acc(gs * k)));
                }
            }
        }
    }
}

/// Visits horizontal then vertical neighbour pairs `(i, j)` (flat indices,
/// `j` right of or below `i`) whose pixels both lie in `region`, calling
/// `f(i, j, x[j] - x[i])` and summing its results.
fn tv_pairs<T: Scalar>(
    x: &Tensor<T>,
    region: &[bool],
    mut f: impl FnMut(usize, usize, f64) -> f64,
) -> f64 {
    let [n, c, h, w] = x.dims();
    let d = x.data();
    let mut s = 0f64;
    for b in 0..n {
        let r = &region[b * h * w..(b + 1) * h * w];
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..h {
                for xx in 0..w.saturating_sub(1) {
                    if r[y * w + xx] && r[y * w + xx + 1] {
                        let (i, j) = (base + y * w + xx, base + y * w + xx + 1);
                        s += f(i, j, d[j].to_acc() - d[i].to_acc());
                    }
                }
            }
            for y in 0..h.saturating_sub(1) {
                for xx in 0..w {
                    if r[y * w + xx] && r[(y + 1) * w + xx] {
                        let (i, j) = (base + y * w + xx, base + (y + 1) * w + xx);
                        s += f(i, j, d[j].to_acc() - d[i].to_acc());
                    }
                }
            }
        }
    }
    s
}

/// Normalized Gram matrices, `(N, 1, C, C)`.
pub(crate) fn gram_matrix<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    let k = 1.0 / (c * plane) as f64;
    let mut out = vec![T::zero(); n * c * c];
    crate::par::for_each_chunk(&mut out, c, |row, o| {
        let (b, c1) = (row / c, row % c);
        let p1 = &x.data()[(b * c + c1) * plane..][..plane];
        for (c2, dst) in o.iter_mut().enumerate() {
            let p2 = &x.data()[(b * c + c2) * plane..][..plane];
            let dot: f64 = p1.iter().zip(p2).map(|(a, b)| a.to_acc() * b.to_acc()).sum();
            *dst = T::from_acc(k * dot);
        }
    });
    Tensor::from_raw([n, 1, c, c], out)
}

fn gram_backward<T: Scalar>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    // dG[c1,c2]/dpsi[c,k] contributes (g[c,c2] + g[c2,c]) * psi[c2,k] * K
    let [_, c, h, w] = x.dims();
    let plane = h * w;
    let k = 1.0 / (c * plane) as f64;
    let mut out = vec![T::zero(); x.len()];
    crate::par::for_each_chunk(&mut out, plane, |idx, o| {
        let (b, c1) = (idx / c, idx % c);
        let gb = &g.data()[b * c * c..][..c * c];
        let mut acc = vec![0f64; plane];
        for c2 in 0..c {
            let coef = k * (gb[c1 * c + c2].to_acc() + gb[c2 * c + c1].to_acc());
            if coef == 0.0 {
                continue;
            }
            let p2 = &x.data()[(b * c + c2) * plane..][..plane];
            for (a, v) in acc.iter_mut().zip(p2) {
                *a += coef * v.to_acc();
            }
        }
        for (dst, a) in o.iter_mut().zip(acc) {
            *dst = T::from_acc(a);
        }
    });
    Tensor::from_raw(x.dims(), out)
}
